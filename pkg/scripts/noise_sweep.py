"""Single-shot vs distributed noise accumulation at t=38, 50 seeds, written as CSV."""

import sys

from dragbench.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "runs/noise_sweep.csv"
    sys.exit(main(["noise-sweep", "--seeds", "50", "--n-noise", "10", "--sigma", "0.1", "--t-start", "38", "--out", out]))
