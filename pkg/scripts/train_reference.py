"""Retrain the bundled blob denoiser and stage it, with its sidecar and loss curve, into the package data dir."""

import hashlib
import shutil
import sys
from pathlib import Path

from dragbench.cli import main

DATA = Path(__file__).resolve().parents[1] / "src" / "dragbench" / "data"

if __name__ == "__main__":
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/train/blob_denoiser.ckpt")
    rc = main(["train-toy", "--steps", "5000", "--batch", "16", "--lr", "0.02", "--momentum", "0.9",
               "--seed", "0", "--out", str(out)])
    if rc:
        sys.exit(rc)
    for suffix in (".ckpt", ".json", ".loss.csv"):
        src = out.with_name(out.name.removesuffix(".ckpt") + suffix)
        shutil.copy2(src, DATA / ("blob_denoiser" + suffix))
    print("sha256", hashlib.sha256((DATA / "blob_denoiser.ckpt").read_bytes()).hexdigest())
