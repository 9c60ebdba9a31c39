"""Shape features from label maps: per-class pixel areas and the ten
pairwise area ratios between the four chambers and the whole heart.

Feature vectors are ordered canonically (see RATIO_NAMES) and carry a source
tag telling whether they came from expert labels or from a model's predicted
segmentation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import CLASS_NAMES, N_CLASSES

# Pairs (numerator class, denominator class) over LA=1, RA=2, LV=3, RV=4, WH=5.
RATIO_PAIRS: tuple[tuple[int, int], ...] = (
    (1, 2), (1, 3), (1, 4), (1, 5),
    (2, 3), (2, 4), (2, 5),
    (3, 4), (3, 5),
    (4, 5),
)
RATIO_NAMES: tuple[str, ...] = tuple(
    f"r_{CLASS_NAMES[a]}_{CLASS_NAMES[b]}" for a, b in RATIO_PAIRS
)

_AREA_EPS = 1.0  # pixels; floor for empty denominator classes

VALID_SOURCES = ("expert_gt", "seg_prediction")


@dataclass
class RatioFeatures:
    values: np.ndarray          # (10,) float
    source: str
    floored: bool = False       # True when any class area was floored

    def validate(self) -> None:
        if self.values.shape != (len(RATIO_PAIRS),):
            raise ValueError(f"expected {len(RATIO_PAIRS)} ratios")
        if self.source not in VALID_SOURCES:
            raise ValueError(f"unknown feature source {self.source!r}")


def area_counts(labelmap: np.ndarray, wh_excludes_chambers: bool = True) -> np.ndarray:
    """Per-class pixel counts of a label map, as int64 of length 6.

    Label maps partition the image, so the raw WH count covers only the
    myocardium/background band of the heart. With
    ``wh_excludes_chambers=False`` the chamber areas are added back into WH,
    making it the area of the filled heart silhouette.
    """
    lm = np.asarray(labelmap)
    if lm.ndim != 2:
        raise ValueError("labelmap must be 2D")
    if lm.size and lm.max() >= N_CLASSES:
        raise ValueError(f"unknown class id {int(lm.max())} in labelmap")
    counts = np.bincount(lm.ravel().astype(np.int64), minlength=N_CLASSES)
    if not wh_excludes_chambers:
        counts = counts.copy()
        counts[5] += counts[1] + counts[2] + counts[3] + counts[4]
    return counts


def ratio_features(counts: np.ndarray, source: str = "expert_gt") -> RatioFeatures:
    """Pairwise area ratios from per-class counts.

    Classes with zero area are floored to one pixel (and the result flagged)
    so that a missing chamber yields extreme-but-finite ratios instead of
    infinities. A segmentation with no foreground at all is an error.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != (N_CLASSES,):
        raise ValueError(f"expected {N_CLASSES} class counts")
    if counts[1:].sum() == 0:
        raise ValueError("empty segmentation: no foreground pixels")
    floored = bool((counts[1:] < _AREA_EPS).any())
    safe = np.maximum(counts, _AREA_EPS)
    values = np.array([safe[a] / safe[b] for a, b in RATIO_PAIRS])
    feats = RatioFeatures(values=values, source=source, floored=floored)
    feats.validate()
    return feats


def features_from_labelmap(labelmap: np.ndarray, source: str,
                           wh_excludes_chambers: bool = True) -> RatioFeatures:
    return ratio_features(area_counts(labelmap, wh_excludes_chambers), source)


_CSV_HEADER = ("id", *RATIO_NAMES, "source", "hlhs")


@dataclass
class FeatureRow:
    sample_id: str
    features: RatioFeatures
    hlhs: bool


def write_features_csv(path: str | Path, rows: list[FeatureRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for row in rows:
            row.features.validate()
            writer.writerow([
                row.sample_id,
                *(repr(float(v)) for v in row.features.values),
                row.features.source,
                int(row.hlhs),
            ])


def read_features_csv(path: str | Path) -> list[FeatureRow]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing features file: {path}")
    rows: list[FeatureRow] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != _CSV_HEADER:
            raise ValueError(f"unexpected features header in {path}: {header}")
        for rec in reader:
            if len(rec) != len(_CSV_HEADER):
                raise ValueError(f"malformed features row in {path}: {rec}")
            values = np.array([float(v) for v in rec[1:1 + len(RATIO_PAIRS)]])
            feats = RatioFeatures(values=values, source=rec[-2])
            feats.validate()
            rows.append(FeatureRow(sample_id=rec[0], features=feats,
                                   hlhs=bool(int(rec[-1]))))
    return rows


def feature_matrix(rows: list[FeatureRow]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Stack rows into (X, y, ids) with y = 1 for disease."""
    if not rows:
        raise ValueError("no feature rows")
    X = np.stack([r.features.values for r in rows])
    y = np.array([int(r.hlhs) for r in rows])
    ids = [r.sample_id for r in rows]
    return X, y, ids
