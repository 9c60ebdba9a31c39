"""Evaluation: overlap and classification metrics, per-experiment report
files, confusion plots, and the experiment grid that ties together data,
training, feature extraction, and classification.

Reports are canonical JSON (sorted keys, fixed indentation) so identical
experiments produce byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
from scipy.stats import rankdata

from . import CLASS_NAMES
from . import features as feat
from . import classifiers as clf
from .seeds import child_seed

REPORT_FORMAT_VERSION = 1

FOREGROUND_CLASSES = (1, 2, 3, 4, 5)


def dice(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """Dice overlap of one class between two label maps.

    Defined as 1.0 when the class is absent from both maps (perfect
    agreement on absence), and 0.0 when absent from exactly one.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    a = pred == class_id
    b = gt == class_id
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def dice_per_class(pred: np.ndarray, gt: np.ndarray,
                   class_ids=FOREGROUND_CLASSES) -> np.ndarray:
    return np.array([dice(pred, gt, c) for c in class_ids])


def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Area under the ROC curve via mid-ranks (ties contribute 1/2).

    Equals the Mann-Whitney statistic: the fraction of (positive, negative)
    pairs ranked correctly, counting ties as half.
    """
    labels = np.asarray(labels).astype(np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError("labels and scores must be matching 1D arrays")
    if not np.isfinite(scores).all():
        raise ValueError("scores contain non-finite values")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC AUC requires both classes present")
    ranks = rankdata(scores)
    r_pos = ranks[labels == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class BinaryMetrics:
    confusion: np.ndarray   # [[tn, fp], [fn, tp]]
    f1_negative: float
    f1_positive: float


def f1_and_confusion(labels: np.ndarray, preds: np.ndarray) -> BinaryMetrics:
    """Confusion counts and per-class F1 for hard binary predictions.

    F1 of a class is 0 when precision + recall is 0 for that class.
    """
    labels = np.asarray(labels).astype(np.int64)
    preds = np.asarray(preds).astype(np.int64)
    if labels.shape != preds.shape or labels.ndim != 1:
        raise ValueError("labels and preds must be matching 1D arrays")
    for arr, name in ((labels, "labels"), (preds, "preds")):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} must be binary 0/1")
    tp = int(((labels == 1) & (preds == 1)).sum())
    tn = int(((labels == 0) & (preds == 0)).sum())
    fp = int(((labels == 0) & (preds == 1)).sum())
    fn = int(((labels == 1) & (preds == 0)).sum())

    def _f1(tp_k: int, fp_k: int, fn_k: int) -> float:
        denom = 2 * tp_k + fp_k + fn_k
        return 2.0 * tp_k / denom if denom else 0.0

    return BinaryMetrics(
        confusion=np.array([[tn, fp], [fn, tp]], dtype=np.int64),
        f1_negative=_f1(tn, fn, fp),
        f1_positive=_f1(tp, fp, fn),
    )


@dataclass
class MetricsReport:
    variant: str
    classifier: str
    omega: float
    lam: float
    gamma: float
    n_test: int
    dice_mean: dict
    dice_std: dict
    auc: float
    f1_healthy: float
    f1_disease: float
    confusion: list
    provenance: dict = field(default_factory=dict)
    format_version: int = REPORT_FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        payload = json.loads(text)
        version = payload.get("format_version")
        if version != REPORT_FORMAT_VERSION:
            raise ValueError(f"unsupported report format version: {version!r}")
        return cls(**payload)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"missing report file: {path}")
        return cls.from_json(path.read_text())


def build_report(*, variant: str, classifier: str, omega: float, lam: float,
                 gamma: float, dice_matrix: np.ndarray | None,
                 labels: np.ndarray, probs: np.ndarray,
                 provenance: dict | None = None,
                 threshold: float = 0.5) -> MetricsReport:
    """Assemble a report from raw per-sample metrics.

    ``dice_matrix`` is (n_samples, n_fg_classes) or None when segmentation
    quality is not applicable (expert features).
    """
    labels = np.asarray(labels).astype(np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    preds = (probs >= threshold).astype(np.int64)
    binm = f1_and_confusion(labels, preds)
    auc = roc_auc(labels, probs)
    dice_mean: dict = {}
    dice_std: dict = {}
    if dice_matrix is not None:
        dice_matrix = np.asarray(dice_matrix, dtype=np.float64)
        for j, cid in enumerate(FOREGROUND_CLASSES):
            dice_mean[CLASS_NAMES[cid]] = float(dice_matrix[:, j].mean())
            dice_std[CLASS_NAMES[cid]] = float(dice_matrix[:, j].std())
        dice_mean["mean_fg"] = float(dice_matrix.mean())
        dice_std["mean_fg"] = float(dice_matrix.mean(axis=1).std())
    return MetricsReport(
        variant=variant, classifier=classifier,
        omega=float(omega), lam=float(lam), gamma=float(gamma),
        n_test=int(labels.size),
        dice_mean=dice_mean, dice_std=dice_std,
        auc=float(auc),
        f1_healthy=float(binm.f1_negative),
        f1_disease=float(binm.f1_positive),
        confusion=binm.confusion.tolist(),
        provenance=provenance or {},
    )


def render_confusion(confusion, path: str | Path, title: str = "") -> Path:
    """Save a 2x2 confusion-matrix heatmap with annotated counts."""
    conf = np.asarray(confusion)
    if conf.shape != (2, 2):
        raise ValueError("confusion must be 2x2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(3.2, 3.0), dpi=120)
    ax.imshow(conf, cmap="Blues", vmin=0)
    for i in range(2):
        for j in range(2):
            frac = conf[i, j] / max(conf.max(), 1)
            ax.text(j, i, str(int(conf[i, j])), ha="center", va="center",
                    color="white" if frac > 0.5 else "black")
    ax.set_xticks([0, 1], ["healthy", "disease"])
    ax.set_yticks([0, 1], ["healthy", "disease"])
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Experiment grid
# ---------------------------------------------------------------------------

# Grid rows: name -> (train variant, omega, lam, gamma); None trains nothing.
GRID_ROWS: dict[str, tuple[str | None, float, float, float]] = {
    "expert": (None, 0.0, 0.0, 0.0),
    "unet": ("unet", 0.0, 0.0, 0.0),
    "ssn": ("ssn", 0.0, 0.0, 0.0),
    "atlas_g0_l1": ("atlas_istn", 1.0, 1.0, 0.0),
    "atlas_g1_l1": ("atlas_istn", 1.0, 1.0, 1.0),
    "atlas_g1_l1000": ("atlas_istn", 1.0, 1000.0, 1.0),
}

_ATLAS_ROWS = ("atlas_g0_l1", "atlas_g1_l1", "atlas_g1_l1000")


def expand_variants(names) -> list[str]:
    """Expand shorthand row names; 'atlas' covers all atlas weightings."""
    out: list[str] = []
    for name in names:
        if name == "atlas":
            out.extend(_ATLAS_ROWS)
        elif name in GRID_ROWS:
            out.append(name)
        else:
            raise ValueError(f"unknown grid variant {name!r}; "
                             f"choose from {sorted(GRID_ROWS)} or 'atlas'")
    seen: set[str] = set()
    return [v for v in out if not (v in seen or seen.add(v))]


@dataclass
class GridResult:
    report_paths: list
    summary_path: Path


def _feature_rows_from_maps(ids, labelmaps, hlhs_flags, source,
                            wh_excludes_chambers=True) -> list[feat.FeatureRow]:
    rows = []
    for sid, lm, flag in zip(ids, labelmaps, hlhs_flags):
        rows.append(feat.FeatureRow(
            sample_id=sid,
            features=feat.features_from_labelmap(lm, source, wh_excludes_chambers),
            hlhs=bool(flag)))
    return rows


def run_experiment_grid(manifest_path, out_dir, *,
                        variants=("expert", "unet", "ssn", "atlas"),
                        classifier_kinds=("logistic", "gp"),
                        epochs: int = 20, seed: int = 0,
                        deterministic: bool = True,
                        train_overrides: dict | None = None) -> GridResult:
    """Train each requested variant, extract features on train/test, fit the
    requested classifiers, and write one report (plus confusion plot and
    predictions CSV) per grid cell. Existing checkpoints are reused.

    Atlas variants with an active disease branch additionally get a
    ``disease_head`` column evaluated directly from the branch's test-set
    probabilities.
    """
    from . import training  # deferred: training pulls in torch

    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = expand_variants(variants)

    report_paths: list[Path] = []
    for row_name in rows:
        train_variant, omega, lam, gamma = GRID_ROWS[row_name]
        row_dir = out_dir / row_name
        row_dir.mkdir(parents=True, exist_ok=True)

        if train_variant is None:
            checkpoint = None
        else:
            checkpoint = row_dir / "checkpoint_best.pt"
            if not checkpoint.exists():
                overrides = dict(train_overrides or {})
                if train_variant == "ssn":
                    # the stochastic head only gets gradients from the
                    # sample-based objective
                    overrides.setdefault("seg_loss", "mc")
                cfg = training.TrainConfig(
                    manifest=str(manifest_path), out_dir=str(row_dir),
                    variant=train_variant, epochs=epochs,
                    seed=child_seed(seed, f"train-{row_name}"),
                    deterministic=deterministic,
                    weights={"omega": omega, "lam": lam, "gamma": gamma},
                    **overrides)
                training.train(cfg)

        cell = _evaluate_row(
            row_name=row_name, checkpoint=checkpoint,
            manifest_path=manifest_path, row_dir=row_dir,
            classifier_kinds=classifier_kinds,
            omega=omega, lam=lam, gamma=gamma, seed=seed)
        report_paths.extend(cell)

    summary_path = summarize_reports(report_paths, out_dir)
    return GridResult(report_paths=report_paths, summary_path=summary_path)


def _evaluate_row(*, row_name, checkpoint, manifest_path, row_dir,
                  classifier_kinds, omega, lam, gamma, seed) -> list[Path]:
    from . import networks, training

    source = "expert_gt" if checkpoint is None else "seg_prediction"

    train_data = training.load_split_tensors(manifest_path, "train")
    test_data = training.load_split_tensors(manifest_path, "test")

    disease_probs = None
    if checkpoint is None:
        train_maps = train_data.labelmaps.numpy()
        test_maps = test_data.labelmaps.numpy()
        # expert features come from the ground truth itself: overlap with
        # itself is exactly 1 for every class
        dice_matrix = np.ones((len(test_data.ids), len(FOREGROUND_CLASSES)))
    else:
        model, _ = networks.load_checkpoint(checkpoint)
        train_maps = training.predict_labelmaps(model, train_data.images)
        test_maps = training.predict_labelmaps(model, test_data.images)
        dice_matrix = np.stack([
            dice_per_class(pm, gt) for pm, gt in
            zip(test_maps, test_data.labelmaps.numpy())])
        if gamma > 0 and model.disease is not None:
            disease_probs = training.predict_disease_probs(model, test_data.images)

    train_rows = _feature_rows_from_maps(
        train_data.ids, train_maps, train_data.hlhs, source)
    test_rows = _feature_rows_from_maps(
        test_data.ids, test_maps, test_data.hlhs, source)
    feat.write_features_csv(row_dir / "features_train.csv", train_rows)
    feat.write_features_csv(row_dir / "features_test.csv", test_rows)

    X_tr, y_tr, _ = feat.feature_matrix(train_rows)
    X_te, y_te, ids_te = feat.feature_matrix(test_rows)

    provenance = {
        "manifest": str(manifest_path), "split": "test", "seed": seed,
        "checkpoint": str(checkpoint) if checkpoint else None,
        "n_train": int(y_tr.size), "feature_source": source,
    }

    paths: list[Path] = []
    columns: list[tuple[str, np.ndarray]] = []
    for kind in classifier_kinds:
        model = clf.fit(kind, X_tr, y_tr)
        clf.save_model(row_dir / f"model_{kind}.json", model)
        probs, _ = clf.predict(model, X_te)
        columns.append((kind, probs))
    if disease_probs is not None:
        columns.append(("disease_head", disease_probs))

    for kind, probs in columns:
        report = build_report(
            variant=row_name, classifier=kind, omega=omega, lam=lam,
            gamma=gamma, dice_matrix=dice_matrix, labels=y_te, probs=probs,
            provenance=provenance)
        rpath = row_dir / f"report_{row_name}_{kind}.json"
        report.save(rpath)
        _write_predictions_csv(row_dir / f"predictions_{kind}.csv",
                               ids_te, probs)
        render_confusion(report.confusion,
                         row_dir / f"{row_name}_{kind}_confusion.png",
                         title=f"{row_name} / {kind}")
        paths.append(rpath)
    return paths


def _write_predictions_csv(path: Path, ids, probs, threshold: float = 0.5) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "probability", "predicted_label"])
        for sid, p in zip(ids, probs):
            writer.writerow([sid, repr(float(p)), int(p >= threshold)])


def summarize_reports(report_paths, out_dir) -> Path:
    """Aggregate report files into summary.csv and summary.md tables."""
    import csv
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = [MetricsReport.load(p) for p in report_paths]
    reports.sort(key=lambda r: (r.variant, r.classifier))
    headers = ["variant", "classifier", "omega", "lam", "gamma",
               "dice_mean_fg", "auc", "f1_healthy", "f1_disease", "n_test"]

    def _row(r: MetricsReport) -> list:
        dmf = r.dice_mean.get("mean_fg")
        return [r.variant, r.classifier, r.omega, r.lam, r.gamma,
                "" if dmf is None else f"{dmf:.4f}",
                f"{r.auc:.4f}", f"{r.f1_healthy:.4f}", f"{r.f1_disease:.4f}",
                r.n_test]

    csv_path = out_dir / "summary.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        for r in reports:
            writer.writerow(_row(r))

    md_path = out_dir / "summary.md"
    with open(md_path, "w") as fh:
        fh.write("| " + " | ".join(headers) + " |\n")
        fh.write("|" + "---|" * len(headers) + "\n")
        for r in reports:
            fh.write("| " + " | ".join(str(v) for v in _row(r)) + " |\n")
    return csv_path
