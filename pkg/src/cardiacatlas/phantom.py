"""Synthetic 4-chamber cardiac phantoms.

Each sample is built from five overlapping ellipse-like regions: a whole-heart
hull containing four chamber ellipses (LA, RA, LV, RV). Disease samples shrink
the left-sided chambers and brighten the hypoplastic ventricle. Images get a
class-dependent base intensity, a point-spread blur, a smooth illumination
gradient and multiplicative speckle.

Dataset layout on disk::

    <root>/manifest.json
    <root>/images/<id>.png   8-bit grayscale
    <root>/labels/<id>.png   8-bit indexed; 0 BG, 1 LA, 2 RA, 3 LV, 4 RV, 5 WH

The generator is deterministic: the same config (including seed) produces
bit-identical PNGs and manifest bytes. Diseased samples are kept strictly
separable from healthy ones in the LV/RV area ratio (an enforced margin), so
downstream diagnostic tasks are learnable by construction.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .seeds import child_rng

FORMAT_VERSION = 1

CLASS_NAMES = ("BG", "LA", "RA", "LV", "RV", "WH")
BG, LA, RA, LV, RV, WH = range(6)

# display palette for the indexed label PNGs (also documents the class ids)
PALETTE = {
    BG: (0, 0, 0),
    LA: (230, 60, 60),
    RA: (60, 120, 230),
    LV: (240, 200, 40),
    RV: (70, 200, 90),
    WH: (150, 150, 150),
}

# Margin enforced between the classes in oracle LV/RV ratio space. Healthy
# samples are regenerated until ratio >= HEALTHY_MIN_LV_RV, diseased ones
# until ratio <= HLHS_MAX_LV_RV, so the two populations never interleave.
HEALTHY_MIN_LV_RV = 0.70
HLHS_MAX_LV_RV = 0.58

_MIN_CLASS_PIXELS = 20
_MAX_RETRIES = 100

# base geometry at the reference 112x144 canvas, (dx, dy) from canvas centre
_REFERENCE_HW = (112.0, 144.0)
_HULL = dict(center=(0.0, 0.0), semi=(56.0, 40.0))
_CHAMBERS = {
    LA: dict(center=(20.0, 16.0), semi=(16.0, 12.0)),
    RA: dict(center=(-20.0, 16.0), semi=(16.0, 12.0)),
    LV: dict(center=(23.0, -15.0), semi=(19.0, 15.0)),
    RV: dict(center=(-23.0, -15.0), semi=(19.0, 15.0)),
}

_BASE_INTENSITY = {BG: 0.25, LA: 0.12, RA: 0.12, LV: 0.12, RV: 0.12, WH: 0.62}
_HLHS_LV_INTENSITY = 0.45  # echogenic fill of the hypoplastic ventricle
_HLHS_LA_INTENSITY = 0.28


class DatasetError(Exception):
    """Raised when persisted dataset files fail validation."""


class PhantomGeometryError(Exception):
    """Raised when a sample cannot be placed on the canvas after retries."""


@dataclass
class PhantomConfig:
    n_samples: int
    image_height: int = 112
    image_width: int = 144
    hlhs_fraction: float = 0.10
    lv_shrink_range: tuple[float, float] = (0.15, 0.45)
    rotation_jitter: float = 8.0      # degrees, +-
    translation_jitter: float = 6.0   # pixels, +-
    scale_jitter: float = 0.10        # relative, +-
    speckle_strength: float = 0.25
    shadowing: bool = False
    wh_excludes_chambers: bool = True
    split_fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.image_height < 32 or self.image_width < 32:
            raise ValueError("image dimensions must be >= 32")
        if not 0.0 <= self.hlhs_fraction <= 1.0:
            raise ValueError("hlhs_fraction must lie in [0, 1]")
        lo, hi = self.lv_shrink_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError("lv_shrink_range must be an interval within (0, 1)")
        if self.speckle_strength < 0:
            raise ValueError("speckle_strength must be >= 0")
        fr = self.split_fractions
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError("split_fractions must be three nonnegative values summing to 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lv_shrink_range"] = list(self.lv_shrink_range)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        d["lv_shrink_range"] = tuple(d["lv_shrink_range"])
        d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d)


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray      # float in [0,1], (H, W)
    labelmap: np.ndarray   # uint8 class ids 0..5, (H, W)
    hlhs: int
    true_areas: tuple[int, ...]  # exact per-class pixel counts of labelmap


@dataclass
class ManifestEntry:
    id: str
    split: str
    hlhs: int
    image: str
    label: str
    image_sha256: str
    label_sha256: str
    true_areas: list[int]


@dataclass
class DatasetManifest:
    format_version: int
    config: dict
    samples: list[ManifestEntry] = field(default_factory=list)

    def ids_for_split(self, split: str) -> list[str]:
        return [s.id for s in self.samples if s.split == split]

    def to_json(self) -> str:
        payload = {
            "format_version": self.format_version,
            "config": self.config,
            "palette": {str(c): CLASS_NAMES[c] for c in range(6)},
            "samples": [asdict(s) for s in self.samples],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        payload = json.loads(text)
        if payload.get("format_version") != FORMAT_VERSION:
            raise DatasetError(
                f"unsupported manifest format_version {payload.get('format_version')!r}"
            )
        samples = [ManifestEntry(**s) for s in payload["samples"]]
        return cls(payload["format_version"], payload["config"], samples)


def _rot(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


class _Ellipse:
    """Axis pair + centre + orientation, with analytic membership tests."""

    def __init__(self, center, semi, angle_deg=0.0):
        self.center = np.asarray(center, dtype=float)  # (x, y) from canvas centre
        self.semi = np.asarray(semi, dtype=float)
        self.angle = float(angle_deg)

    def transformed(self, rot_deg: float, scale: float, shift) -> "_Ellipse":
        center = scale * (_rot(rot_deg) @ self.center) + np.asarray(shift, float)
        return _Ellipse(center, scale * self.semi, self.angle + rot_deg)

    def _local(self, x: np.ndarray, y: np.ndarray):
        dx, dy = x - self.center[0], y - self.center[1]
        r = _rot(-self.angle)
        return r[0, 0] * dx + r[0, 1] * dy, r[1, 0] * dx + r[1, 1] * dy

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        lx, ly = self._local(x, y)
        return (lx / self.semi[0]) ** 2 + (ly / self.semi[1]) ** 2 <= 1.0

    def boundary(self, n: int = 64) -> np.ndarray:
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        p = np.stack([self.semi[0] * np.cos(t), self.semi[1] * np.sin(t)])
        return (_rot(self.angle) @ p) + self.center[:, None]


def _sample_geometry(cfg: PhantomConfig, rng: np.random.Generator, hlhs: bool):
    """Draw jittered ellipse parameters for one sample, in canvas-centred coords."""
    scale_ref = min(cfg.image_height / _REFERENCE_HW[0], cfg.image_width / _REFERENCE_HW[1])

    rot = rng.uniform(-cfg.rotation_jitter, cfg.rotation_jitter)
    shift = rng.uniform(-cfg.translation_jitter, cfg.translation_jitter, size=2)
    scale = scale_ref * (1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter))

    hull_semi = np.array(_HULL["semi"]) * (1.0 + rng.uniform(-0.05, 0.05, size=2))
    hull = _Ellipse(_HULL["center"], hull_semi).transformed(rot, scale, shift)

    shrink = rng.uniform(*cfg.lv_shrink_range) if hlhs else None
    chambers = {}
    for cid, spec in _CHAMBERS.items():
        center = np.array(spec["center"]) + rng.uniform(-2.0, 2.0, size=2)
        semi = np.array(spec["semi"]) * (1.0 + rng.uniform(-0.08, 0.08, size=2))
        angle = rng.uniform(-6.0, 6.0)
        if hlhs and cid in (LV, LA):
            semi = semi * np.sqrt(shrink)  # area scales by the draw
        chambers[cid] = _Ellipse(center, semi, angle).transformed(rot, scale, shift)
    return hull, chambers


def _geometry_ok(cfg: PhantomConfig, hull: _Ellipse, chambers: dict) -> bool:
    h, w = cfg.image_height, cfg.image_width
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    bx, by = hull.boundary()
    if (bx + cx).min() < 2 or (bx + cx).max() > w - 3:
        return False
    if (by + cy).min() < 2 or (by + cy).max() > h - 3:
        return False
    for ell in chambers.values():
        px, py = ell.boundary()
        lx, ly = hull._local(px, py)
        if np.any((lx / hull.semi[0]) ** 2 + (ly / hull.semi[1]) ** 2 > 0.97**2):
            return False  # chamber too close to (or beyond) the hull wall
    return True


def _rasterize(cfg: PhantomConfig, hull: _Ellipse, chambers: dict) -> np.ndarray:
    h, w = cfg.image_height, cfg.image_width
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    xs, ys = np.meshgrid(np.arange(w) - cx, np.arange(h) - cy)
    lab = np.zeros((h, w), dtype=np.uint8)
    lab[hull.contains(xs, ys)] = WH
    # assign chambers in descending id order so the lowest id wins conflicts;
    # chambers override the hull label
    for cid in sorted(chambers, reverse=True):
        lab[chambers[cid].contains(xs, ys)] = cid
    return lab


def _render_image(cfg: PhantomConfig, lab: np.ndarray, hlhs: bool,
                  rng: np.random.Generator) -> np.ndarray:
    h, w = lab.shape
    intensity = dict(_BASE_INTENSITY)
    if hlhs:
        intensity[LV] = _HLHS_LV_INTENSITY
        intensity[LA] = _HLHS_LA_INTENSITY
    img = np.zeros((h, w), dtype=np.float64)
    for cid, val in intensity.items():
        img[lab == cid] = val
    img = gaussian_filter(img, sigma=0.8)

    # smooth multiplicative illumination gradient along a random direction
    ang = rng.uniform(0, 2 * np.pi)
    xs, ys = np.meshgrid(np.linspace(-1, 1, w), np.linspace(-1, 1, h))
    img *= 1.0 + 0.12 * (np.cos(ang) * xs + np.sin(ang) * ys)

    if cfg.speckle_strength > 0:
        noise = rng.standard_normal((h, w))
        noise = gaussian_filter(noise, sigma=1.2)
        noise /= max(noise.std(), 1e-12)
        img *= 1.0 + cfg.speckle_strength * noise

    if cfg.shadowing:
        # crude attenuation wedge fanning down from a random top position
        x0 = rng.uniform(0.2, 0.8) * (w - 1)
        spread = rng.uniform(0.08, 0.2)
        xs_pix, ys_pix = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        within = np.abs(xs_pix - x0) < spread * (ys_pix + 8)
        img = np.where(within, img * 0.45, img)

    return np.clip(img, 0.0, 1.0)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


def generate_sample(cfg: PhantomConfig, sample_id: str, hlhs: bool,
                    rng: np.random.Generator) -> SampleRecord:
    """Generate one phantom, retrying jitter draws until geometry and the
    LV/RV ratio margin are satisfied."""
    for _ in range(_MAX_RETRIES):
        hull, chambers = _sample_geometry(cfg, rng, hlhs)
        if not _geometry_ok(cfg, hull, chambers):
            continue
        lab = _rasterize(cfg, hull, chambers)
        counts = np.bincount(lab.ravel(), minlength=6)
        if counts.min() < _MIN_CLASS_PIXELS:
            continue
        ratio = counts[LV] / counts[RV]
        if hlhs and ratio > HLHS_MAX_LV_RV:
            continue
        if not hlhs and ratio < HEALTHY_MIN_LV_RV:
            continue
        img = _render_image(cfg, lab, hlhs, rng)
        img = _quantize(img).astype(np.float64) / 255.0  # match on-disk precision
        return SampleRecord(sample_id, img, lab, int(hlhs), tuple(int(c) for c in counts))
    raise PhantomGeometryError(
        f"sample {sample_id}: no viable geometry after {_MAX_RETRIES} retries"
    )


def _stratified_flags(cfg: PhantomConfig) -> np.ndarray:
    """Exact-count disease assignment: round(n * fraction) positives, shuffled."""
    n = cfg.n_samples
    n_pos = int(round(n * cfg.hlhs_fraction))
    flags = np.array([1] * n_pos + [0] * (n - n_pos), dtype=np.int64)
    child_rng(cfg.seed, "hlhs-assignment").shuffle(flags)
    return flags


def _stratified_splits(cfg: PhantomConfig, flags: np.ndarray) -> list[str]:
    """Largest-remainder split within each class; keeps per-split imbalance
    within one sample of the configured fraction."""
    names = ("train", "val", "test")
    out = [""] * cfg.n_samples
    rng = child_rng(cfg.seed, "split-assignment")
    for cls in (0, 1):
        idx = np.flatnonzero(flags == cls)
        rng.shuffle(idx)
        quotas = np.array(cfg.split_fractions) * len(idx)
        base = np.floor(quotas).astype(int)
        rem = len(idx) - base.sum()
        order = np.argsort(-(quotas - base), kind="stable")
        base[order[:rem]] += 1
        start = 0
        for name, k in zip(names, base):
            for i in idx[start:start + k]:
                out[i] = name
            start += k
    return out


def _png_bytes(arr: np.ndarray, indexed: bool) -> bytes:
    if indexed:
        im = Image.fromarray(arr.astype(np.uint8), mode="P")
        flat = []
        for c in range(256):
            flat.extend(PALETTE.get(c, (0, 0, 0)))
        im.putpalette(flat)
    else:
        im = Image.fromarray(arr.astype(np.uint8), mode="L")
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


def generate_dataset(cfg: PhantomConfig, out_dir: str | Path) -> DatasetManifest:
    """Generate, persist, and describe a phantom dataset under ``out_dir``."""
    cfg.validate()
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory {root}: {e}") from e

    flags = _stratified_flags(cfg)
    splits = _stratified_splits(cfg, flags)

    manifest = DatasetManifest(FORMAT_VERSION, cfg.to_dict())
    for i in range(cfg.n_samples):
        sid = f"{i:05d}"
        rec = generate_sample(cfg, sid, bool(flags[i]), child_rng(cfg.seed, f"sample-{i}"))
        img_png = _png_bytes(_quantize(rec.image), indexed=False)
        lab_png = _png_bytes(rec.labelmap, indexed=True)
        img_rel, lab_rel = f"images/{sid}.png", f"labels/{sid}.png"
        (root / img_rel).write_bytes(img_png)
        (root / lab_rel).write_bytes(lab_png)
        manifest.samples.append(ManifestEntry(
            id=sid, split=splits[i], hlhs=rec.hlhs,
            image=img_rel, label=lab_rel,
            image_sha256=hashlib.sha256(img_png).hexdigest(),
            label_sha256=hashlib.sha256(lab_png).hexdigest(),
            true_areas=list(rec.true_areas),
        ))
    (root / "manifest.json").write_text(manifest.to_json())
    return manifest


def _load_checked(root: Path, rel: str, sha256: str) -> bytes:
    path = root / rel
    if not path.exists():
        raise DatasetError(f"missing dataset file: {path}")
    data = path.read_bytes()
    if hashlib.sha256(data).hexdigest() != sha256:
        raise DatasetError(f"checksum mismatch for {path}")
    return data


def load_manifest(manifest_path: str | Path) -> DatasetManifest:
    path = Path(manifest_path)
    if not path.exists():
        raise DatasetError(f"missing dataset file: {path}")
    return DatasetManifest.from_json(path.read_text())


def load_dataset(manifest_path: str | Path,
                 split: str | None = None) -> list[SampleRecord]:
    """Load samples (optionally one split) with checksum and label validation."""
    path = Path(manifest_path)
    manifest = load_manifest(path)
    root = path.parent
    records = []
    for entry in manifest.samples:
        if split is not None and entry.split != split:
            continue
        img_bytes = _load_checked(root, entry.image, entry.image_sha256)
        lab_bytes = _load_checked(root, entry.label, entry.label_sha256)
        img = np.asarray(Image.open(io.BytesIO(img_bytes)), dtype=np.float64) / 255.0
        lab = np.asarray(Image.open(io.BytesIO(lab_bytes)), dtype=np.uint8)
        if lab.max() >= 6:
            raise DatasetError(
                f"unknown class id {int(lab.max())} in {root / entry.label}"
            )
        records.append(SampleRecord(
            entry.id, img, lab, entry.hlhs, tuple(entry.true_areas)
        ))
    return records
