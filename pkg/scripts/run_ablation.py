"""Run the 2x2 schedule/loss grid over the bundled fixture suite with the bundled checkpoint."""

import sys

from dragbench.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "runs/ablation"
    sys.exit(main(["ablate", "--seed", "0", "--jobs", "1", "--out", out]))
