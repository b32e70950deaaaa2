"""``dragbench`` command line: train the toy denoiser, run drags, ablations, the noise sweep, and evaluation.

Exit status is 0 when every case succeeded (including the empty-manifest
case), 1 when at least one case failed, and 2 on usage or input errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from dragbench.drag import DragConfig
from dragbench.manifest import ManifestError, fixture_suite, load_manifest

log = logging.getLogger("dragbench")


def _cases(args):
    if args.manifest is None:
        return fixture_suite()
    return load_manifest(args.manifest)


def _bundle(args):
    from dragbench.runner import load_bundle

    return load_bundle(args.checkpoint)


def _base_config(args) -> DragConfig | None:
    if not getattr(args, "set", None):
        return None
    overrides = {}
    for item in args.set:
        key, _, val = item.partition("=")
        overrides[key] = json.loads(val)
    return DragConfig(**overrides)


def cmd_train_toy(args) -> int:
    from dragbench.runner import ScheduleSpec, save_bundle
    from dragbench.trainer import TrainConfig, train_denoiser

    cfg = TrainConfig(steps=args.steps, batch=args.batch, learning_rate=args.lr, seed=args.seed,
                      momentum=args.momentum)
    spec = ScheduleSpec(args.t_max, args.beta_min, args.beta_max)
    t0 = time.perf_counter()
    res = train_denoiser(cfg, spec.build(), log_every=args.log_every)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"train": {"steps": cfg.steps, "batch": cfg.batch, "learning_rate": cfg.learning_rate,
                      "seed": cfg.seed, "momentum": cfg.momentum},
            "final_loss_mean_last_200": float(np.mean(res.losses[-200:])) if res.losses else None,
            "wall_time": time.perf_counter() - t0}
    save_bundle(out, res.model, spec, meta)
    res.write_loss_csv(out.with_suffix(".loss.csv"))
    print(f"wrote {out} (loss {res.losses[0]:.4f} -> {meta['final_loss_mean_last_200']:.4f})"
          if res.losses else f"wrote {out}")
    return 0


def cmd_drag(args) -> int:
    from dragbench.runner import run_cases

    cases = _cases(args)
    bundle = _bundle(args)
    records = run_cases(cases, bundle, args.mode, args.loss, args.seed, args.out, args.jobs,
                        f"{args.mode}_{args.loss}", args.base)
    failed = [r for r in records if r.status != "ok"]
    for r in records:
        line = f"{r.case_id:14s} {r.status:8s} {r.wall_time:6.2f}s"
        if r.status == "ok":
            line += "  dai@1 {:.4f}  drift {:.3f}  handle err {:.2f}".format(
                r.metrics["dai"]["1"], r.metrics["drift"], r.metrics["max_handle_distance"])
        else:
            line += f"  {r.error}"
        print(line)
    print(f"{len(records)} cases, {len(failed)} failed")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    from dragbench.runner import run_ablation, summarize_ablation, write_ablation_csv

    cases = _cases(args)
    grid = run_ablation(cases, _bundle(args), args.seed, args.out, args.jobs, args.base)
    summary = summarize_ablation(grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(out / "ablation.csv", grid)
    (out / "ablation_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for arm, s in summary.items():
        print(f"{arm:24s} n={s['n']:3d} failed={s['failed']}  drift {s['median_drift']:.3f}  "
              f"handle {s['median_handle_distance']:.2f}  out-of-mask {s['median_out_of_mask_change']:.5f}  "
              f"within2px {s['within_2px']:.2f}")
    failed = sum(s["failed"] for s in summary.values())
    return 1 if failed else 0


def cmd_noise_sweep(args) -> int:
    from dragbench.runner import noise_sweep, write_rows_csv

    rows = noise_sweep(_bundle(args), range(args.seed, args.seed + args.seeds), args.n_noise, args.sigma,
                      args.t_start)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_rows_csv(out, rows)
    wins = float(np.mean([r["distributed_wins"] for r in rows])) if rows else 0.0
    print(f"{len(rows)} seeds, distributed < single in {wins:.0%}; wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    from dragbench.runner import evaluate, format_dai_table

    root = Path(args.records)
    if not root.is_dir():
        print(f"records directory not found: {root}", file=sys.stderr)
        return 2
    client = None
    if args.gscore:
        from dragbench.gscore import EndpointConfig, GscoreClient

        client = GscoreClient(EndpointConfig.load(args.gscore_config))
    try:
        report = evaluate(root, client, args.human_ranks)
    finally:
        if client is not None:
            client.close()
    if report["n_records"]:
        print(format_dai_table(report["dai"]))
    for key, err in report["gscore_errors"].items():
        print(f"gscore failed for {key}: {err}", file=sys.stderr)
    for key, rho in report["spearman"].items():
        print(f"spearman[{key}] = {'n/a' if rho is None else f'{rho:.3f}'}")
    out = Path(args.out) if args.out else root / "evaluation.json"
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"{report['n_records']} records ({report['n_failed']} failed); wrote {out}")
    return 0


def cmd_replay(args) -> int:
    from dragbench.runner import RunRecord, replay_record

    rec = RunRecord.from_dict(json.loads(Path(args.record).read_text()))
    again = replay_record(rec, args.checkpoint)
    same = again.outputs.get("edited_sha256") == rec.outputs.get("edited_sha256")
    print("bit-identical" if same else "MISMATCH")
    return 0 if same else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dragbench", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-toy", help="train the blob denoiser")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-max", type=int, default=50)
    p.add_argument("--beta-min", type=float, default=None)
    p.add_argument("--beta-max", type=float, default=None)
    p.add_argument("--log-every", type=int, default=500)
    p.add_argument("--out", required=True, help="checkpoint path; sidecar .json and .loss.csv go beside it")
    p.set_defaults(func=cmd_train_toy)

    def common(p, out_required=True):
        p.add_argument("--manifest", help="JSONL case manifest (default: bundled fixture suite)")
        p.add_argument("--checkpoint", help="denoiser checkpoint (default: bundled model)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--out", required=out_required)
        p.add_argument("--set", action="append", metavar="KEY=JSON", help="override a drag setting, e.g. K=40")

    p = sub.add_parser("drag", help="run drag sessions over a manifest")
    common(p)
    p.add_argument("--mode", choices=("gooddrag", "all-at-once"), default="gooddrag")
    p.add_argument("--loss", choices=("ip", "baseline"), default="ip")
    p.set_defaults(func=cmd_drag)

    p = sub.add_parser("ablate", help="2x2 grid of schedule and loss variants")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("noise-sweep", aliases=["fig5"], help="single-shot vs distributed noise accumulation sweep")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--seeds", type=int, default=50)
    p.add_argument("--n-noise", type=int, default=10)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--t-start", type=int, default=38)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("evaluate", help="aggregate a records directory")
    p.add_argument("records")
    p.add_argument("--gscore", action="store_true", help="score each edit through the configured endpoint")
    p.add_argument("--gscore-config", help="JSON endpoint config (GSCORE_* env vars override)")
    p.add_argument("--human-ranks", help="CSV with columns case, method, rank")
    p.add_argument("--out", help="report path (default: <records>/evaluation.json)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("replay", help="re-execute a record and compare outputs")
    p.add_argument("record")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "train-toy":
        from dragbench.diffusion import DEFAULT_BETA_MAX, DEFAULT_BETA_MIN

        args.beta_min = DEFAULT_BETA_MIN if args.beta_min is None else args.beta_min
        args.beta_max = DEFAULT_BETA_MAX if args.beta_max is None else args.beta_max
    try:
        if hasattr(args, "set"):
            args.base = _base_config(args)
        return args.func(args)
    except (ManifestError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
