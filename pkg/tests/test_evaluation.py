"""Tests for overlap/classification metrics, report files, confusion plots,
and the expert row of the experiment grid."""

import json

import numpy as np
import pytest

from cardiacatlas import evaluation as E


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

def test_dice_identical_masks():
    lm = np.array([[0, 1, 1], [2, 2, 0]])
    assert E.dice(lm, lm, 1) == 1.0
    assert E.dice(lm, lm, 2) == 1.0


def test_dice_disjoint_nonempty_masks():
    a = np.array([[1, 1, 0, 0]])
    b = np.array([[0, 0, 1, 1]])
    assert E.dice(a, b, 1) == 0.0


def test_dice_half_overlap_hand_value():
    # prediction covers the left half, truth covers the full image:
    # 2*(HW/2) / (HW/2 + HW) = 2/3
    h, w = 6, 8
    pred = np.zeros((h, w), dtype=int)
    pred[:, : w // 2] = 1
    gt = np.ones((h, w), dtype=int)
    assert E.dice(pred, gt, 1) == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_dice_empty_mask_conventions():
    zeros = np.zeros((4, 4), dtype=int)
    ones = np.ones((4, 4), dtype=int)
    assert E.dice(zeros, zeros, 1) == 1.0  # absent from both: agreement
    assert E.dice(ones, zeros, 1) == 0.0   # absent from exactly one


def test_dice_is_symmetric():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 3, size=(10, 10))
    b = rng.integers(0, 3, size=(10, 10))
    for c in (0, 1, 2):
        assert E.dice(a, b, c) == E.dice(b, a, c)


def test_dice_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        E.dice(np.zeros((2, 2)), np.zeros((2, 3)), 1)


def test_dice_per_class_hand_counts():
    pred = np.array([[1, 1, 2], [0, 5, 5]])
    gt = np.array([[1, 2, 2], [0, 5, 3]])
    got = E.dice_per_class(pred, gt)
    # class 1: |P|=2 |G|=1 overlap 1 -> 2/3 ; class 2: 2*1/(1+2) = 2/3
    # class 3: 0 of (0+1) -> 0 ; class 4: both empty -> 1 ; class 5: 2*1/3
    want = np.array([2 / 3, 2 / 3, 0.0, 1.0, 2 / 3])
    assert np.allclose(got, want, atol=1e-12)


# ---------------------------------------------------------------------------
# ROC AUC
# ---------------------------------------------------------------------------

def _auc_pair_counting(labels, scores):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def test_auc_perfect_separation():
    labels = np.array([0, 0, 0, 1, 1, 1])
    scores = np.array([0.1, 0.2, 0.3, 0.7, 0.8, 0.9])
    assert E.roc_auc(labels, scores) == 1.0
    assert E.roc_auc(labels, -scores) == 0.0


def test_auc_all_tied_scores_is_half():
    labels = np.array([0, 1, 0, 1, 1])
    scores = np.full(5, 0.42)
    assert E.roc_auc(labels, scores) == 0.5


def test_auc_matches_pair_counting_oracle():
    rng = np.random.default_rng(1)
    for trial in range(5):
        labels = np.zeros(20, dtype=int)
        labels[rng.choice(20, size=8, replace=False)] = 1
        # integer scores from a narrow range force plenty of ties
        scores = rng.integers(0, 6, size=20).astype(float)
        got = E.roc_auc(labels, scores)
        want = _auc_pair_counting(labels, scores)
        assert got == pytest.approx(want, abs=1e-12), f"trial {trial}"


def test_auc_complement_identity_for_tie_free_scores():
    rng = np.random.default_rng(2)
    labels = np.array([0] * 10 + [1] * 10)
    scores = rng.permutation(np.linspace(0.0, 1.0, 20))
    total = E.roc_auc(labels, scores) + E.roc_auc(labels, -scores)
    assert total == pytest.approx(1.0, abs=1e-12)


def test_auc_input_validation():
    with pytest.raises(ValueError, match="both classes"):
        E.roc_auc(np.zeros(5, dtype=int), np.arange(5.0))
    with pytest.raises(ValueError, match="non-finite"):
        E.roc_auc(np.array([0, 1]), np.array([np.nan, 1.0]))
    with pytest.raises(ValueError, match="matching 1D"):
        E.roc_auc(np.array([0, 1]), np.arange(3.0))


# ---------------------------------------------------------------------------
# F1 / confusion
# ---------------------------------------------------------------------------

def test_f1_all_correct_is_diagonal():
    labels = np.array([0, 0, 1, 1, 1])
    m = E.f1_and_confusion(labels, labels)
    assert m.confusion.tolist() == [[2, 0], [0, 3]]
    assert m.f1_negative == 1.0
    assert m.f1_positive == 1.0


def test_f1_all_predicted_healthy_zeroes_disease_f1():
    labels = np.zeros(20, dtype=int)
    labels[:2] = 1  # 10% prevalence
    preds = np.zeros(20, dtype=int)
    m = E.f1_and_confusion(labels, preds)
    assert m.f1_positive == 0.0
    assert m.confusion.tolist() == [[18, 0], [2, 0]]


def test_f1_matches_hand_counting_oracle():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 2, size=30)
    preds = rng.integers(0, 2, size=30)
    m = E.f1_and_confusion(labels, preds)
    tp = sum(1 for l, p in zip(labels, preds) if l == 1 and p == 1)
    tn = sum(1 for l, p in zip(labels, preds) if l == 0 and p == 0)
    fp = sum(1 for l, p in zip(labels, preds) if l == 0 and p == 1)
    fn = sum(1 for l, p in zip(labels, preds) if l == 1 and p == 0)
    assert m.confusion.tolist() == [[tn, fp], [fn, tp]]
    assert int(m.confusion.sum()) == 30
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    want = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    assert m.f1_positive == pytest.approx(want, abs=1e-12)


def test_f1_input_validation():
    with pytest.raises(ValueError, match="matching 1D"):
        E.f1_and_confusion(np.array([0, 1]), np.array([0, 1, 1]))
    with pytest.raises(ValueError, match="binary"):
        E.f1_and_confusion(np.array([0, 2]), np.array([0, 1]))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _example_report():
    rng = np.random.default_rng(4)
    labels = np.array([0] * 6 + [1] * 4)
    probs = np.clip(labels * 0.6 + rng.uniform(0, 0.4, size=10), 0.0, 1.0)
    dice_matrix = rng.uniform(0.8, 1.0, size=(10, 5))
    return E.build_report(variant="atlas_g1_l1", classifier="gp",
                          omega=1.0, lam=1.0, gamma=1.0,
                          dice_matrix=dice_matrix, labels=labels, probs=probs,
                          provenance={"seed": 0})


def test_report_totals_and_ranges():
    r = _example_report()
    assert int(np.sum(r.confusion)) == r.n_test == 10
    assert 0.0 <= r.auc <= 1.0
    assert 0.0 <= r.f1_healthy <= 1.0 and 0.0 <= r.f1_disease <= 1.0
    for key in ("LA", "RA", "LV", "RV", "WH", "mean_fg"):
        assert 0.0 <= r.dice_mean[key] <= 1.0
        assert r.dice_std[key] >= 0.0


def test_report_json_round_trip(tmp_path):
    r = _example_report()
    path = tmp_path / "report.json"
    r.save(path)
    back = E.MetricsReport.load(path)
    assert back == r
    # canonical output: saving the loaded report reproduces the bytes
    assert back.to_json() == path.read_text()


def test_report_version_rejection(tmp_path):
    r = _example_report()
    payload = json.loads(r.to_json())
    payload["format_version"] = 9
    with pytest.raises(ValueError, match="format version"):
        E.MetricsReport.from_json(json.dumps(payload))
    with pytest.raises(FileNotFoundError, match="missing report"):
        E.MetricsReport.load(tmp_path / "none.json")


def test_render_confusion_writes_png(tmp_path):
    out = E.render_confusion([[5, 1], [2, 7]], tmp_path / "c.png", title="x")
    data = out.read_bytes()
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    with pytest.raises(ValueError, match="2x2"):
        E.render_confusion([[1, 2, 3]], tmp_path / "bad.png")


# ---------------------------------------------------------------------------
# grid plumbing
# ---------------------------------------------------------------------------

def test_expand_variants():
    assert E.expand_variants(["expert", "unet"]) == ["expert", "unet"]
    assert E.expand_variants(["atlas"]) == [
        "atlas_g0_l1", "atlas_g1_l1", "atlas_g1_l1000"]
    # duplicates collapse, order of first occurrence wins
    assert E.expand_variants(["atlas_g1_l1", "atlas"]) == [
        "atlas_g1_l1", "atlas_g0_l1", "atlas_g1_l1000"]
    with pytest.raises(ValueError, match="unknown grid variant"):
        E.expand_variants(["resnet"])


def test_summarize_reports(tmp_path):
    r = _example_report()
    paths = []
    for i, variant in enumerate(["unet", "expert"]):
        r2 = E.MetricsReport(**{**json.loads(r.to_json())})
        r2.variant = variant
        p = tmp_path / f"report_{variant}.json"
        r2.save(p)
        paths.append(p)
    csv_path = E.summarize_reports(paths, tmp_path)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0].startswith("variant,classifier,")
    assert len(lines) == 3
    # sorted by variant: expert before unet
    assert lines[1].startswith("expert,") and lines[2].startswith("unet,")
    assert (tmp_path / "summary.md").exists()


def test_grid_expert_row(tiny_dataset, tmp_path):
    result = E.run_experiment_grid(
        tiny_dataset, tmp_path, variants=("expert",),
        classifier_kinds=("logistic", "gp"))
    assert len(result.report_paths) == 2
    for p in result.report_paths:
        r = E.MetricsReport.load(p)
        assert r.variant == "expert"
        # ground truth against itself: Dice exactly 1.000 for every class
        for key in ("LA", "RA", "LV", "RV", "WH", "mean_fg"):
            assert r.dice_mean[key] == 1.0
            assert r.dice_std[key] == 0.0
        assert int(np.sum(r.confusion)) == r.n_test == 9
        assert r.provenance["feature_source"] == "expert_gt"
    row_dir = tmp_path / "expert"
    assert (row_dir / "features_train.csv").exists()
    assert (row_dir / "features_test.csv").exists()
    assert (row_dir / "model_logistic.json").exists()
    assert (row_dir / "model_gp.json").exists()
    assert (row_dir / "predictions_gp.csv").exists()
    assert (row_dir / "expert_gp_confusion.png").exists()
    assert result.summary_path.exists()
    # no disease-branch column without a trained branch
    assert not (row_dir / "report_expert_disease_head.json").exists()
