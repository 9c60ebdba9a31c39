"""Shape-based disease classification from area-ratio features.

Run from the repository root:

    python3 demos/diagnose.py

Generates phantoms, computes chamber-area ratio features from the reference
label maps, fits both classifiers on the training split, and scores the test
split. The left-ventricle shrinkage that defines the diseased class makes
ratios involving the LV nearly separable, so both classifiers should land
close to a perfect AUC. Artifacts go to ``demo_runs/diagnosis/``.
"""

from pathlib import Path

import numpy as np

from cardiacatlas import classifiers as clf
from cardiacatlas import evaluation as ev
from cardiacatlas import features as feat
from cardiacatlas import phantom, training

OUT = Path("demo_runs/diagnosis")

cfg = phantom.PhantomConfig(
    n_samples=80, image_height=48, image_width=64,
    hlhs_fraction=0.3, split_fractions=(0.6, 0.15, 0.25), seed=2)
phantom.generate_dataset(cfg, OUT / "data")
manifest = OUT / "data" / "manifest.json"


def split_features(split):
    data = training.load_split_tensors(manifest, split)
    rows = ev._feature_rows_from_maps(
        data.ids, data.labelmaps.numpy(), data.hlhs, "expert_gt")
    return feat.feature_matrix(rows)


X_train, y_train, _ = split_features("train")
X_test, y_test, ids = split_features("test")
print(f"train: {y_train.size} samples ({int(y_train.sum())} diseased), "
      f"test: {y_test.size} samples ({int(y_test.sum())} diseased)")
print(f"features: {', '.join(feat.RATIO_NAMES)}")

for kind in ("logistic", "gp"):
    model = clf.fit(kind, X_train, y_train)
    probs, labels = clf.predict(model, X_test)
    auc = ev.roc_auc(y_test, probs)
    metrics = ev.f1_and_confusion(y_test, labels)
    print(f"\n{kind}:")
    print(f"  AUC {auc:.4f}   F1(disease) {metrics.f1_positive:.4f}   "
          f"confusion [[tn fp] [fn tp]] = {metrics.confusion.tolist()}")
    clf.save_model(OUT / f"model_{kind}.json", model)

# The strongest single feature, for intuition: LV/RV area ratio.
lv_rv = X_test[:, feat.RATIO_PAIRS.index((3, 4))]
print(f"\nLV/RV ratio  healthy: {lv_rv[y_test == 0].mean():.3f} +- "
      f"{lv_rv[y_test == 0].std():.3f}")
print(f"LV/RV ratio  disease: {lv_rv[y_test == 1].mean():.3f} +- "
      f"{lv_rv[y_test == 1].std():.3f}")
print(f"\nmodels written to {OUT}/")
