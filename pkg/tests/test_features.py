"""Tests for area counting, the ten pairwise area ratios, and the feature CSV
round trip."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardiacatlas import features as F
from cardiacatlas.phantom import PhantomConfig, generate_sample
from cardiacatlas.seeds import child_rng


def _labelmap_from_counts(counts, h=20, w=30, seed=0):
    """A shuffled 2D label map whose class histogram equals ``counts``."""
    flat = np.repeat(np.arange(len(counts)), counts).astype(np.uint8)
    assert flat.size == h * w
    rng = np.random.default_rng(seed)
    rng.shuffle(flat)
    return flat.reshape(h, w)


# ---------------------------------------------------------------------------
# area counts
# ---------------------------------------------------------------------------

def test_counts_of_all_background():
    counts = F.area_counts(np.zeros((8, 9), dtype=np.uint8))
    assert counts[0] == 72
    assert counts[1:].sum() == 0


def test_counts_partition_the_image():
    lm = _labelmap_from_counts([300, 80, 70, 60, 50, 40])
    counts = F.area_counts(lm)
    assert counts.sum() == lm.size
    assert tuple(counts) == (300, 80, 70, 60, 50, 40)


def test_counts_match_generator_bookkeeping():
    cfg = PhantomConfig(n_samples=1, image_height=48, image_width=64, seed=3)
    rec = generate_sample(cfg, "s0", hlhs=False, rng=child_rng(3, "s0"))
    assert tuple(F.area_counts(rec.labelmap)) == rec.true_areas


def test_counts_wh_flag_adds_chambers_back():
    lm = _labelmap_from_counts([300, 80, 70, 60, 50, 40])
    excl = F.area_counts(lm, wh_excludes_chambers=True)
    incl = F.area_counts(lm, wh_excludes_chambers=False)
    assert incl[5] == excl[5] + excl[1] + excl[2] + excl[3] + excl[4]
    assert tuple(incl[:5]) == tuple(excl[:5])


def test_counts_reject_bad_input():
    with pytest.raises(ValueError, match="unknown class id 7"):
        F.area_counts(np.full((4, 4), 7, dtype=np.uint8))
    with pytest.raises(ValueError, match="2D"):
        F.area_counts(np.zeros((2, 4, 4), dtype=np.uint8))


# ---------------------------------------------------------------------------
# ratios
# ---------------------------------------------------------------------------

def test_ratio_canonical_order_and_names():
    assert len(F.RATIO_PAIRS) == 10
    assert F.RATIO_PAIRS == ((1, 2), (1, 3), (1, 4), (1, 5), (2, 3), (2, 4),
                             (2, 5), (3, 4), (3, 5), (4, 5))
    # each unordered pair of the five foreground classes appears exactly once
    assert len({frozenset(p) for p in F.RATIO_PAIRS}) == 10
    assert len(F.RATIO_NAMES) == 10
    assert F.RATIO_NAMES[0] == "r_LA_RA"
    assert F.RATIO_NAMES[-1] == "r_RV_WH"


def test_equal_areas_give_all_ones():
    feats = F.ratio_features(np.array([100, 20, 20, 20, 20, 20]))
    assert np.allclose(feats.values, 1.0)
    assert not feats.floored


def test_hand_computed_ratio():
    counts = np.array([100, 40, 80, 50, 200, 120])
    feats = F.ratio_features(counts)
    # LV=50, RV=200 -> r_LV_RV = 0.25 at canonical position (3, 4)
    idx = F.RATIO_PAIRS.index((3, 4))
    assert feats.values[idx] == 0.25
    for k, (a, b) in enumerate(F.RATIO_PAIRS):
        assert feats.values[k] == counts[a] / counts[b]


def test_ratio_scale_invariance():
    counts = np.array([10, 7, 13, 29, 31, 37], dtype=np.float64)
    f1 = F.ratio_features(counts).values
    f2 = F.ratio_features(17.0 * counts).values
    assert np.allclose(f1, f2, rtol=1e-12)


def test_ratio_traversal_order_independence():
    counts = [256, 90, 80, 70, 60, 44]
    a = _labelmap_from_counts(counts, seed=1)
    b = _labelmap_from_counts(counts, seed=2)
    fa = F.features_from_labelmap(a, "expert_gt")
    fb = F.features_from_labelmap(b, "expert_gt")
    assert np.array_equal(fa.values, fb.values)


def test_empty_class_is_floored_and_flagged():
    feats = F.ratio_features(np.array([500, 50, 0, 25, 25, 0]))
    assert feats.floored
    assert np.isfinite(feats.values).all()
    assert (feats.values > 0).all()
    # LA=50 over floored RA=1
    assert feats.values[F.RATIO_PAIRS.index((1, 2))] == 50.0


def test_empty_segmentation_is_an_error():
    with pytest.raises(ValueError, match="empty segmentation"):
        F.ratio_features(np.array([600, 0, 0, 0, 0, 0]))


def test_ratio_validation_errors():
    with pytest.raises(ValueError, match="class counts"):
        F.ratio_features(np.array([1, 2, 3]))
    with pytest.raises(ValueError, match="unknown feature source"):
        F.ratio_features(np.array([0, 1, 1, 1, 1, 1]), source="guess")


def test_generator_margin_separates_lv_rv_ratio():
    cfg = PhantomConfig(n_samples=1, image_height=48, image_width=64, seed=5)
    healthy = generate_sample(cfg, "h", hlhs=False, rng=child_rng(5, "h"))
    sick = generate_sample(cfg, "s", hlhs=True, rng=child_rng(5, "s"))
    idx = F.RATIO_PAIRS.index((3, 4))
    r_h = F.features_from_labelmap(healthy.labelmap, "expert_gt").values[idx]
    r_s = F.features_from_labelmap(sick.labelmap, "expert_gt").values[idx]
    assert r_h >= 0.70
    assert r_s <= 0.58


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------

def _rows(n=6, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        counts = np.concatenate([[400], rng.integers(20, 200, size=5)])
        feats = F.ratio_features(counts, source="seg_prediction")
        rows.append(F.FeatureRow(sample_id=f"{i:05d}", features=feats,
                                 hlhs=bool(i % 2)))
    return rows


def test_csv_round_trip_is_lossless(tmp_path):
    rows = _rows()
    path = tmp_path / "features.csv"
    F.write_features_csv(path, rows)
    back = F.read_features_csv(path)
    assert len(back) == len(rows)
    for orig, readback in zip(rows, back):
        assert readback.sample_id == orig.sample_id
        assert readback.hlhs == orig.hlhs
        assert readback.features.source == orig.features.source
        assert np.array_equal(readback.features.values, orig.features.values)


def test_csv_rejects_bad_header_and_rows(tmp_path):
    path = tmp_path / "features.csv"
    path.write_text("id,oops\n")
    with pytest.raises(ValueError, match="header"):
        F.read_features_csv(path)
    F.write_features_csv(path, _rows(2))
    with open(path, "a") as fh:
        fh.write("stub,1.0\n")
    with pytest.raises(ValueError, match="malformed"):
        F.read_features_csv(path)
    with pytest.raises(FileNotFoundError, match="missing features file"):
        F.read_features_csv(tmp_path / "nope.csv")


def test_feature_matrix_stacking():
    rows = _rows(4)
    X, y, ids = F.feature_matrix(rows)
    assert X.shape == (4, 10)
    assert y.tolist() == [0, 1, 0, 1]
    assert ids == ["00000", "00001", "00002", "00003"]
    with pytest.raises(ValueError, match="no feature rows"):
        F.feature_matrix([])


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(counts=st.lists(st.integers(1, 10_000), min_size=5, max_size=5),
       k=st.integers(2, 50))
def test_property_scale_invariance_and_positivity(counts, k):
    base = np.array([123] + counts, dtype=np.float64)
    f1 = F.ratio_features(base)
    f2 = F.ratio_features(k * base)
    assert np.allclose(f1.values, f2.values, rtol=1e-12)
    assert (f1.values > 0).all() and np.isfinite(f1.values).all()
