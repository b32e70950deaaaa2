"""Benchmark orchestration: model bundles, per-case drag runs, ablation grid, noise sweep, evaluation.

Everything a run depends on is written into its RunRecord (case manifest,
drag config, schedule, checkpoint digest, seed), so ``replay_record``
reproduces the edited latent bit for bit.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from dragbench.denoiser import ConvDenoiser
from dragbench.diffusion import DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, T_MAX, NoiseSchedule, build_schedule
from dragbench.drag import DragConfig, run_session
from dragbench.manifest import CaseManifest
from dragbench.metrics import (
    DAI_GAMMAS, DaiConfig, content_handle_distance, dai, drift_curve, fidelity_mse, out_of_mask_change,
)
from dragbench.tensorio import save_tensor
from dragbench.trainer import random_scene, render_scene

log = logging.getLogger(__name__)

BUNDLED_CHECKPOINT = "blob_denoiser.ckpt"
MODES = ("gooddrag", "all-at-once")
LOSSES = ("ip", "baseline")


# --- model bundles --------------------------------------------------------

@dataclass(frozen=True)
class ScheduleSpec:
    t_max: int = T_MAX
    beta_min: float = DEFAULT_BETA_MIN
    beta_max: float = DEFAULT_BETA_MAX

    def build(self) -> NoiseSchedule:
        return build_schedule(self.t_max, self.beta_min, self.beta_max)


@dataclass
class ModelBundle:
    denoiser: ConvDenoiser
    schedule: ScheduleSpec
    path: str
    digest: str
    meta: dict = field(default_factory=dict)

    @property
    def sched(self) -> NoiseSchedule:
        return self.schedule.build()


def bundled_checkpoint_path() -> Path:
    return Path(str(resources.files("dragbench").joinpath(f"data/{BUNDLED_CHECKPOINT}")))


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_bundle(path: str | Path | None = None) -> ModelBundle:
    """Checkpoint plus its JSON sidecar (schedule and training config); defaults to the bundled model."""
    path = bundled_checkpoint_path() if path is None else Path(path)
    meta = {}
    if _sidecar(path).exists():
        meta = json.loads(_sidecar(path).read_text())
    sched = ScheduleSpec(**meta.get("schedule", {}))
    return ModelBundle(ConvDenoiser.load(path), sched, str(path), file_digest(path), meta)


def save_bundle(path: str | Path, denoiser: ConvDenoiser, schedule: ScheduleSpec, meta: dict) -> None:
    path = Path(path)
    denoiser.save(path)
    _sidecar(path).write_text(json.dumps({**meta, "schedule": dataclasses.asdict(schedule)}, indent=2) + "\n")


# --- rendering ------------------------------------------------------------

def save_png(path: str | Path, latent_data: np.ndarray) -> None:
    a = np.asarray(latent_data)
    a = a[0] if a.ndim == 3 else a
    Image.fromarray(np.round(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8), mode="L").save(path)


# --- single case ----------------------------------------------------------

@dataclass
class RunRecord:
    case_id: str
    config: dict
    seed: int
    outputs: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0
    status: str = "ok"
    error: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        return cls(**d)


def case_metrics(case: CaseManifest, source, edited, mask, report, cfg: DragConfig) -> dict:
    """DAI at every radius (zero-padded where the patch leaves the canvas), fidelity, drift, handle error.

    Handle error comes in two flavours. ``tracked_distance`` uses the
    session's own final handles, which freeze within ``converge_radius`` and
    follow whatever the tracker matched. ``handle_distance`` locates the
    original handle content in the edited image, so it measures whether the
    content actually arrived.
    """
    m = {"dai": {str(g): dai(source, edited, case.pairs, DaiConfig(g, "zero")) for g in DAI_GAMMAS},
         "fidelity_mse": fidelity_mse(source, edited),
         "out_of_mask_change": out_of_mask_change(source, edited, mask),
         "drift": drift_curve(report)[-1][1],
         "tracked_distance": [float(np.hypot(*np.subtract(h, pr.q)))
                              for h, pr in zip(report.final_handles, case.pairs)],
         "handle_distance": content_handle_distance(source, edited, case.pairs, cfg.r1, cfg.r2),
         "drags_with_live_handles": sum(1 for r in report.records if r["live_handles"])}
    m["max_handle_distance"] = max(m["handle_distance"])
    m["max_tracked_distance"] = max(m["tracked_distance"])
    return m


def run_case(case: CaseManifest, bundle: ModelBundle, mode: str = "gooddrag", loss: str = "ip",
             seed: int = 0, base: DragConfig | None = None, out_dir: str | Path | None = None) -> RunRecord:
    """Run one drag session; failures are caught and reported in the record rather than raised."""
    cfg = case.drag_config(base)
    config = {"case": case.to_dict(), "drag": cfg.to_dict(), "mode": mode, "loss": loss,
              "schedule": dataclasses.asdict(bundle.schedule),
              "checkpoint": {"path": bundle.path, "sha256": bundle.digest}}
    rec = RunRecord(case.case_id, config, seed)
    t0 = time.perf_counter()
    try:
        if mode not in MODES or loss not in LOSSES:
            raise ValueError(f"unknown mode/loss {mode!r}/{loss!r}")
        case.validate(base)
        # nothing in a session is stochastic, but keep the global stream pinned to the record's seed
        np.random.seed(seed)
        source = case.source()
        mask = case.edit_mask(source.shape[-2:])
        edited, report = run_session(source, case.pairs, mask, cfg, bundle.denoiser, bundle.sched, mode, loss)
        rec.metrics = case_metrics(case, source, edited, mask, report, cfg)
        rec.metrics["drift_curve"] = drift_curve(report)
        if report.status != "ok":
            rec.status, rec.error = report.status, report.error
        if out_dir is not None:
            d = Path(out_dir)
            d.mkdir(parents=True, exist_ok=True)
            save_tensor(d / "edited.tensor", edited.data)
            save_png(d / "edited.png", edited.data)
            save_png(d / "source.png", source.data)
            (d / "report.json").write_text(json.dumps(report.to_dict()) + "\n")
            rec.outputs = {"edited_tensor": "edited.tensor", "edited_png": "edited.png",
                           "source_png": "source.png", "report": "report.json"}
        rec.outputs["edited_sha256"] = hashlib.sha256(np.ascontiguousarray(edited.data).tobytes()).hexdigest()
    except Exception as exc:  # per-case isolation: one bad case never takes down the batch
        log.error("case %s failed: %s", case.case_id, exc)
        rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
        rec.outputs["traceback"] = traceback.format_exc()
    rec.wall_time = time.perf_counter() - t0
    return rec


def _run_case_job(args):
    case_dict, ckpt, mode, loss, seed, base, out_dir = args
    base = None if base is None else DragConfig(**base)
    return run_case(CaseManifest.from_dict(case_dict), load_bundle(ckpt), mode, loss, seed, base, out_dir)


def run_cases(cases, bundle: ModelBundle, mode="gooddrag", loss="ip", seed=0, out_dir=None, jobs=1,
              tag: str | None = None, base: DragConfig | None = None) -> list[RunRecord]:
    """Run every case (in a process pool when ``jobs > 1``); records come back in manifest order."""
    def case_dir(c):
        if out_dir is None:
            return None
        return str(Path(out_dir) / c.case_id / tag) if tag else str(Path(out_dir) / c.case_id)

    if jobs <= 1:
        records = [run_case(c, bundle, mode, loss, seed, base, case_dir(c)) for c in cases]
    else:
        base_d = None if base is None else base.to_dict()
        args = [(c.to_dict(), bundle.path, mode, loss, seed, base_d, case_dir(c)) for c in cases]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_case_job, args))
    if out_dir is not None:
        for c, r in zip(cases, records):
            write_record(Path(case_dir(c)) / "record.json", r)
    return records


def write_record(path: str | Path, rec: RunRecord) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rec.to_dict(), indent=2, sort_keys=True) + "\n")


def load_records(root: str | Path) -> list[RunRecord]:
    return [RunRecord.from_dict(json.loads(p.read_text())) for p in sorted(Path(root).rglob("record.json"))]


def replay_record(rec: RunRecord, checkpoint: str | Path | None = None) -> RunRecord:
    """Re-run a record from its own config snapshot; the checkpoint digest must match."""
    cfg = rec.config
    bundle = load_bundle(checkpoint or cfg["checkpoint"]["path"])
    if bundle.digest != cfg["checkpoint"]["sha256"]:
        raise ValueError("checkpoint digest differs from the one recorded")
    if dataclasses.asdict(bundle.schedule) != cfg["schedule"]:
        raise ValueError("checkpoint schedule differs from the one recorded")
    case = CaseManifest.from_dict(cfg["case"])
    base = DragConfig(**cfg["drag"])
    return run_case(dataclasses.replace(case, config={}), bundle, cfg["mode"], cfg["loss"], rec.seed, base=base)


# --- ablation grid --------------------------------------------------------

ARMS = tuple((m, v) for m in MODES for v in LOSSES)


def run_ablation(cases, bundle: ModelBundle, seed=0, out_dir=None, jobs=1,
                 base: DragConfig | None = None) -> dict[tuple[str, str], list[RunRecord]]:
    """Every case under all four (schedule, loss) arms; 4 records per case."""
    return {(m, v): run_cases(cases, bundle, m, v, seed, out_dir, jobs, f"{m}_{v}", base) for m, v in ARMS}


def summarize_ablation(grid: dict) -> dict:
    """Per-arm medians plus the two directional comparisons (AlDD vs all-at-once, IP vs baseline)."""
    def med(records, key):
        vals = [r.metrics[key] for r in records if r.status == "ok"]
        return float(np.median(vals)) if vals else float("nan")

    arms = {}
    for (m, v), recs in grid.items():
        ok = [r for r in recs if r.status == "ok"]
        arms[f"{m}/{v}"] = {
            "n": len(recs), "failed": len(recs) - len(ok),
            "median_drift": med(recs, "drift"),
            "median_handle_distance": med(recs, "max_handle_distance"),
            "median_tracked_distance": med(recs, "max_tracked_distance"),
            "median_out_of_mask_change": med(recs, "out_of_mask_change"),
            "median_dai1": float(np.median([r.metrics["dai"]["1"] for r in ok])) if ok else float("nan"),
            "within_2px": float(np.mean([r.metrics["max_handle_distance"] <= 2.0 for r in ok])) if ok else 0.0,
            "tracked_within_2px": float(np.mean([r.metrics["max_tracked_distance"] <= 2.0 for r in ok])) if ok else 0.0,
        }
    return arms


def write_ablation_csv(path: str | Path, grid: dict) -> None:
    """One row per (case, arm) with the paired metrics."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["case", "mode", "loss", "status", "drift", "max_handle_distance", "max_tracked_distance",
                     "out_of_mask_change",
                     "fidelity_mse", *(f"dai_{g}" for g in DAI_GAMMAS), "wall_time"])
        for (m, v), recs in grid.items():
            for r in recs:
                mt = r.metrics
                wr.writerow([r.case_id, m, v, r.status, mt.get("drift"), mt.get("max_handle_distance"),
                             mt.get("max_tracked_distance"), mt.get("out_of_mask_change"), mt.get("fidelity_mse"),
                             *(mt.get("dai", {}).get(str(g)) for g in DAI_GAMMAS), f"{r.wall_time:.3f}"])


# --- noise accumulation sweep ---------------------------------------------

def noise_sweep(bundle: ModelBundle, seeds, n_noise: int = 10, sigma: float = 0.1, t_start: int = 38) -> list[dict]:
    """Per seed: a random blob scene and seeded noise fields; returns rows of both arms' MSE."""
    from dragbench.metrics import noise_accumulation_experiment

    rows = []
    sched = bundle.sched
    for s in seeds:
        z0 = render_scene(random_scene(np.random.default_rng(s)))
        single, distributed = noise_accumulation_experiment(z0, n_noise, sigma, sched, bundle.denoiser, s, t_start)
        rows.append({"seed": s, "mse_single": single, "mse_distributed": distributed,
                     "distributed_wins": int(distributed < single)})
    return rows


def write_rows_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)


# --- evaluation -------------------------------------------------------------

def method_name(rec: RunRecord) -> str:
    return f"{rec.config.get('mode', '?')}/{rec.config.get('loss', '?')}"


def dai_table(records) -> dict[str, dict[str, float]]:
    """Mean DAI per method and radius over successful records (one row per method)."""
    table: dict[str, dict[str, list]] = {}
    for r in records:
        if r.status != "ok":
            continue
        row = table.setdefault(method_name(r), {str(g): [] for g in DAI_GAMMAS})
        for g in DAI_GAMMAS:
            row[str(g)].append(r.metrics["dai"][str(g)])
    return {m: {g: float(np.mean(v)) for g, v in row.items()} for m, row in sorted(table.items())}


def read_human_ranks(path: str | Path) -> dict[str, dict[str, int]]:
    """CSV with columns case, method, rank -> {case: {method: rank}}."""
    out: dict[str, dict[str, int]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["case"], {})[row["method"]] = int(row["rank"])
    return out


def metric_spearman(records, human: dict, key, higher_is_better: bool) -> float | None:
    """Spearman between human ranks and ranks induced by ``key(record)`` over fully covered cases."""
    from dragbench.metrics import RankTable, ranks_from_scores, spearman

    by_case: dict[str, dict[str, float]] = {}
    for r in records:
        v = key(r)
        if r.status == "ok" and v is not None:
            by_case.setdefault(r.case_id, {})[method_name(r)] = v
    U, S = [], []
    for case, ranks in sorted(human.items()):
        methods = sorted(ranks)
        if len(methods) < 2 or not all(m in by_case.get(case, {}) for m in methods):
            continue
        U.append([ranks[m] for m in methods])
        S.append([by_case[case][m] for m in methods])
    if not U or len({len(u) for u in U}) != 1:
        return None
    return spearman(RankTable(np.array(U), ranks_from_scores(np.array(S), higher_is_better)))


def evaluate(root: str | Path, gscore_client=None, human_ranks: str | Path | None = None) -> dict:
    """Aggregate a records directory; GScore failures are reported per case and do not stop the run."""
    root = Path(root)
    paths = sorted(root.rglob("record.json"))
    records = [RunRecord.from_dict(json.loads(p.read_text())) for p in paths]
    report = {"n_records": len(records), "n_failed": sum(r.status != "ok" for r in records),
              "dai": dai_table(records), "gscore": {}, "gscore_errors": {}, "spearman": {}}
    if gscore_client is not None:
        from dragbench.gscore import GscoreRequest

        reqs, keys = [], []
        for p, r in zip(paths, records):
            if r.status != "ok" or "edited_png" not in r.outputs:
                continue
            src = np.asarray(Image.open(p.parent / r.outputs["source_png"]), dtype=np.float64) / 255.0
            out = np.asarray(Image.open(p.parent / r.outputs["edited_png"]), dtype=np.float64) / 255.0
            reqs.append(GscoreRequest.from_arrays(src, out))
            keys.append((r, f"{r.case_id}:{method_name(r)}"))
        results = gscore_client.score_batch(reqs, return_exceptions=True)
        for (r, key), res in zip(keys, results):
            if isinstance(res, Exception):
                report["gscore_errors"][key] = f"{type(res).__name__}: {res}"
            else:
                r.metrics["gscore"] = res.score
                report["gscore"][key] = res.score
    if human_ranks is not None:
        human = read_human_ranks(human_ranks)
        report["spearman"]["dai_1"] = metric_spearman(records, human, lambda r: r.metrics["dai"]["1"], False)
        if gscore_client is not None:
            report["spearman"]["gscore"] = metric_spearman(records, human, lambda r: r.metrics.get("gscore"), True)
    return report


def format_dai_table(table: dict) -> str:
    head = "method".ljust(24) + "".join(f"gamma={g}".rjust(12) for g in DAI_GAMMAS)
    lines = [head]
    for m, row in table.items():
        lines.append(m.ljust(24) + "".join(f"{row[str(g)]:12.4f}" for g in DAI_GAMMAS))
    return "\n".join(lines)
