"""Line-delimited JSON case manifests and the bundled 20-case blob fixture suite.

One JSON object per line::

    {"id": "reloc-00", "scene": {...BlobScene...} | "path/to/image.png",
     "pairs": [[[py, px], [qy, qx]], ...], "mask": "all" | {"shape": [H, W], "rle": [...]},
     "config": {...DragConfig overrides...}}

The mask run lengths alternate zeros and ones over the row-major grid,
starting with a (possibly empty) run of zeros.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from dragbench.diffusion import Latent
from dragbench.drag import ControlPair, DragConfig, EditMask
from dragbench.trainer import Blob, BlobScene, render_scene


class ManifestError(ValueError):
    pass


def rle_encode(mask: np.ndarray) -> dict:
    flat = np.asarray(mask, dtype=np.int64).ravel()
    runs, cur, n = [], 0, 0
    for v in flat:
        if v == cur:
            n += 1
        else:
            runs.append(n)
            cur, n = int(v), 1
    runs.append(n)
    return {"shape": list(np.shape(mask)), "rle": runs}


def rle_decode(spec: dict) -> np.ndarray:
    shape = tuple(spec["shape"])
    runs = spec["rle"]
    if any(r < 0 for r in runs) or sum(runs) != int(np.prod(shape)):
        raise ManifestError(f"run lengths sum to {sum(runs)}, grid {shape} needs {int(np.prod(shape))}")
    vals = np.repeat(np.arange(len(runs)) % 2, runs)
    return vals.reshape(shape)


def load_image_scene(path: str | Path) -> Latent:
    """Grayscale image file as a clean (1, H, W) latent in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return Latent(arr[None])


@dataclass(frozen=True)
class CaseManifest:
    case_id: str
    scene: BlobScene | str
    pairs: tuple[ControlPair, ...]
    mask: EditMask | None = None  # None means every pixel is editable
    config: dict = field(default_factory=dict)
    base_dir: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if not self.pairs:
            raise ManifestError(f"case {self.case_id}: no control pairs")
        try:
            self.drag_config()
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"case {self.case_id}: bad config override: {exc}") from None

    def drag_config(self, base: DragConfig | None = None) -> DragConfig:
        return dataclasses.replace(base or DragConfig(), **self.config)

    def image_path(self) -> Path:
        p = Path(self.scene)
        return p if p.is_absolute() or self.base_dir is None else self.base_dir / p

    def source(self) -> Latent:
        if isinstance(self.scene, BlobScene):
            return render_scene(self.scene)
        return load_image_scene(self.image_path())

    def edit_mask(self, shape) -> EditMask:
        return EditMask.full(shape) if self.mask is None else self.mask

    def validate(self, base: DragConfig | None = None) -> None:
        """Check points against the canvas margin and the mask against the canvas size."""
        shape = self.canvas()
        margin = self.drag_config(base).boundary_margin
        for pr in self.pairs:
            try:
                pr.check_inside(shape, margin)
            except ValueError as exc:
                raise ManifestError(f"case {self.case_id}: {exc}") from None
        if self.mask is not None and self.mask.data.shape != shape:
            raise ManifestError(f"case {self.case_id}: mask {self.mask.data.shape} != canvas {shape}")

    def canvas(self) -> tuple[int, int]:
        if isinstance(self.scene, BlobScene):
            return tuple(self.scene.canvas)
        return self.source().shape[-2:]

    def to_dict(self) -> dict:
        d = {"id": self.case_id,
             "scene": self.scene.to_dict() if isinstance(self.scene, BlobScene) else str(self.scene),
             "pairs": [[list(p.p), list(p.q)] for p in self.pairs],
             "mask": "all" if self.mask is None else rle_encode(self.mask.data.astype(np.int64))}
        if self.config:
            d["config"] = dict(self.config)
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> CaseManifest:
        try:
            scene = d["scene"]
            scene = scene if isinstance(scene, str) else BlobScene.from_dict(scene)
            pairs = tuple(ControlPair(tuple(p), tuple(q)) for p, q in d["pairs"])
            m = d.get("mask", "all")
            mask = None if m == "all" else EditMask(rle_decode(m))
            return cls(str(d["id"]), scene, pairs, mask, dict(d.get("config", {})), base_dir)
        except ManifestError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"case {d.get('id', '?')}: {exc}") from None


def parse_manifest(text: str, base_dir: Path | None = None) -> list[CaseManifest]:
    cases, seen = [], set()
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {n}: {exc}") from None
        case = CaseManifest.from_dict(d, base_dir)
        if case.case_id in seen:
            raise ManifestError(f"line {n}: duplicate case id {case.case_id!r}")
        seen.add(case.case_id)
        cases.append(case)
    return cases


def serialize_manifest(cases) -> str:
    return "".join(json.dumps(c.to_dict(), sort_keys=True) + "\n" for c in cases)


def load_manifest(path: str | Path) -> list[CaseManifest]:
    path = Path(path)
    return parse_manifest(path.read_text(), base_dir=path.parent)


def write_manifest(path: str | Path, cases) -> None:
    Path(path).write_text(serialize_manifest(cases))


# --- fixture suite --------------------------------------------------------

FIXTURE_FILE = "fixture_suite.jsonl"


def _box_mask(points, pad: int, canvas=(32, 32)) -> EditMask:
    pts = np.asarray(points)
    y0, x0 = np.maximum(pts.min(axis=0) - pad, 0)
    y1, x1 = np.minimum(pts.max(axis=0) + pad, np.array(canvas) - 1)
    m = np.zeros(canvas, dtype=int)
    m[y0:y1 + 1, x0:x1 + 1] = 1
    return EditMask(m)


def build_fixture_suite() -> list[CaseManifest]:
    """20 hand-designed cases: 8 relocations, 4 two-point rotations, 4 inward and 4 outward rescalings."""
    cases = []
    # single-blob relocations with a distractor blob outside the mask
    reloc = [((16, 11), (16, 19), 4.0), ((12, 12), (19, 18), 4.0), ((20, 20), (14, 14), 4.5),
             ((15, 19), (15, 12), 4.0), ((11, 16), (20, 16), 4.5), ((21, 14), (13, 17), 4.0),
             ((13, 20), (19, 13), 3.5), ((17, 13), (12, 19), 5.0)]
    corners = [(4, 4), (4, 27), (27, 4), (27, 27)]
    for i, (p, q, r) in enumerate(reloc):
        # a small dim distractor in the corner farthest (L-inf) from the drag path
        path = [np.add(p, s * np.subtract(q, p)) for s in np.linspace(0.0, 1.0, 21)]
        d = max(corners, key=lambda c: min(np.abs(pt - c).max() for pt in path))
        scene = BlobScene((Blob(p, r, 0.9), Blob(d, 2.5, 0.35)))
        mask = _box_mask([p, q], int(np.ceil(r)) + 2)
        cases.append(CaseManifest(f"reloc-{i:02d}", scene, (ControlPair(p, q),), mask))
    # rotation-like: a rod of three blobs; both ends move along a circle about the middle blob
    for i, (deg, angle0) in enumerate([(30, 0), (-35, 90), (40, 45), (-25, 135)]):
        c = np.array([16.0, 16.0])
        half = 5.0
        a0, a1 = np.deg2rad(angle0), np.deg2rad(angle0 + deg)
        u0 = np.array([np.sin(a0), np.cos(a0)])
        u1 = np.array([np.sin(a1), np.cos(a1)])
        p = [tuple(int(v) for v in np.round(c + s * half * u0)) for s in (-1, 1)]
        q = [tuple(int(v) for v in np.round(c + s * half * u1)) for s in (-1, 1)]
        blobs = (Blob(p[0], 4.0, 0.6), Blob((16, 16), 4.0, 0.6), Blob(p[1], 4.0, 0.6))
        mask = _box_mask(p + q, 4)
        cases.append(CaseManifest(f"rotate-{i:02d}", BlobScene(blobs),
                                  tuple(ControlPair(a, b) for a, b in zip(p, q)), mask))
    # rescaling-like: two handles on opposite rims of one blob, pulled apart or pushed together
    specs = [("inward", (16, 16), 5.0, 5, 3, 0), ("inward", (15, 16), 5.5, 6, 3, 1),
             ("inward", (16, 15), 5.0, 5, 2, 0), ("inward", (17, 16), 6.0, 6, 3, 1),
             ("outward", (16, 16), 4.0, 4, 3, 0), ("outward", (16, 16), 3.5, 4, 3, 1),
             ("outward", (15, 15), 4.0, 3, 3, 0), ("outward", (16, 17), 4.0, 4, 2, 1)]
    counts = {"inward": 0, "outward": 0}
    for kind, center, r, off, shift, axis in specs:
        c = np.array(center)
        u = np.array([0, 1]) if axis == 0 else np.array([1, 0])
        sgn = -1 if kind == "inward" else 1
        p = [tuple(int(v) for v in c - off * u), tuple(int(v) for v in c + off * u)]
        q = [tuple(int(v) for v in c - (off + sgn * shift) * u), tuple(int(v) for v in c + (off + sgn * shift) * u)]
        scene = BlobScene((Blob(center, r, 0.85),))
        mask = _box_mask(p + q, int(np.ceil(r)))
        cases.append(CaseManifest(f"{kind}-{counts[kind]:02d}", scene,
                                  tuple(ControlPair(a, b) for a, b in zip(p, q)), mask))
        counts[kind] += 1
    return cases


def fixture_suite() -> list[CaseManifest]:
    text = resources.files("dragbench").joinpath(f"data/{FIXTURE_FILE}").read_text()
    return parse_manifest(text)
