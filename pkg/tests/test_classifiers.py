"""Tests for the logistic and Gaussian-process classifiers.

The GP is checked against a reference Laplace implementation written here
from scratch: quasi-Newton mode search on the exact penalized log-likelihood
with explicit kernel inverses, a log-determinant marginal likelihood, direct
solves for the predictive variance, and adaptive quadrature for the
predictive probability. It shares no code path with the library version.
"""

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.optimize import minimize

from cardiacatlas import classifiers as C


def _sep_1d():
    X = np.array([[-1.0], [-1.0], [1.0], [1.0]])
    y = np.array([0, 0, 1, 1])
    return X, y


def _blob_2d(n_per=6, gap=2.5, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n_per, 2))
    b = rng.standard_normal((n_per, 2)) + gap
    X = np.vstack([a, b])
    y = np.concatenate([np.zeros(n_per, int), np.ones(n_per, int)])
    return X, y


# ---------------------------------------------------------------------------
# logistic regression
# ---------------------------------------------------------------------------

def test_logistic_separable_grid_oracle():
    X, y = _sep_1d()
    model = C.fit_logistic(X, y, l2=0.5)
    probs, labels = C.predict(model, X)
    assert labels.tolist() == y.tolist()  # accuracy 1.0 on training points
    assert (probs[y == 1] > 0.5).all() and (probs[y == 0] < 0.5).all()

    # grid-search oracle on the identical objective: the Newton optimum must
    # be at least as good as every point of a dense (w, b) grid
    Xs = model.standardizer.transform(X)
    sw = 1.0 / (2.0 * np.bincount(y)[y])
    fit_obj = C._logistic_objective(
        np.array([model.coef[0], model.intercept]), Xs, y.astype(float), sw, 0.5)
    ws = np.linspace(-10, 10, 201)
    bs = np.linspace(-10, 10, 201)
    grid_best = min(
        C._logistic_objective(np.array([w, b]), Xs, y.astype(float), sw, 0.5)
        for w in ws for b in bs)
    assert fit_obj <= grid_best + 1e-9


def test_logistic_symmetric_data_has_zero_bias():
    rng = np.random.default_rng(1)
    half = rng.standard_normal((8, 3)) + 1.0
    X = np.vstack([half, -half])
    y = np.concatenate([np.ones(8, int), np.zeros(8, int)])
    model = C.fit_logistic(X, y, l2=1.0)
    assert abs(model.intercept) <= 1e-6


def test_logistic_duplication_reweighting_equivalence():
    X, y = _blob_2d()
    base = C.fit_logistic(X, y, l2=1.0, balanced=True)
    # triplicate class 0: balanced weights must absorb the imbalance exactly
    X_dup = np.vstack([X[y == 0]] * 3 + [X[y == 1]])
    y_dup = np.concatenate([np.zeros(3 * (y == 0).sum(), int),
                            np.ones((y == 1).sum(), int)])
    dup = C.fit_logistic(X_dup, y_dup, l2=1.0, balanced=True)
    assert np.abs(base.coef - dup.coef).max() <= 1e-6
    assert abs(base.intercept - dup.intercept) <= 1e-6


def test_logistic_local_optimality_probe():
    X, y = _blob_2d(seed=2)
    model = C.fit_logistic(X, y, l2=0.1)
    Xs = model.standardizer.transform(X)
    sw = 1.0 / (2.0 * np.bincount(y)[y])
    theta = np.concatenate([model.coef, [model.intercept]])
    best = C._logistic_objective(theta, Xs, y.astype(float), sw, 0.1)
    rng = np.random.default_rng(3)
    for _ in range(1000):
        d = rng.standard_normal(theta.size)
        d *= 1e-2 / np.linalg.norm(d)
        assert C._logistic_objective(theta + d, Xs, y.astype(float),
                                     sw, 0.1) >= best


def test_logistic_convergence_error_carries_diagnostics():
    X, y = _blob_2d(seed=4)
    with pytest.raises(C.ConvergenceError) as exc:
        C.fit_logistic(X, y, max_iter=0)
    assert "grad_norm" in exc.value.diagnostics


def test_fit_input_validation():
    X, y = _blob_2d(seed=5)
    with pytest.raises(ValueError, match="single-class"):
        C.fit_logistic(X, np.zeros(len(y), int))
    with pytest.raises(ValueError, match="0/1"):
        C.fit_logistic(X, y + 1)
    with pytest.raises(ValueError, match="non-finite"):
        C.fit_logistic(np.full_like(X, np.nan), y)
    with pytest.raises(ValueError, match="2D"):
        C.fit_logistic(X[:, 0], y)
    with pytest.raises(ValueError, match="1D matching"):
        C.fit_logistic(X, y[:-1])
    with pytest.raises(ValueError, match="l2"):
        C.fit_logistic(X, y, l2=-1.0)
    with pytest.raises(ValueError, match="unknown classifier kind"):
        C.fit("forest", X, y)


# ---------------------------------------------------------------------------
# reference Laplace GP implementation (independent oracle)
# ---------------------------------------------------------------------------

def _ref_kernel(A, B, sigma_f, length):
    d2 = ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=-1)
    return sigma_f ** 2 * np.exp(-0.5 * d2 / length ** 2)


def _ref_gp(Xs, y_pm, X_test_s, sigma_f, length, jitter):
    """Reference Laplace GP: returns (mode, lml, test probabilities)."""
    n = len(y_pm)
    K = _ref_kernel(Xs, Xs, sigma_f, length)
    K[np.diag_indices(n)] += jitter
    K_inv = np.linalg.inv(K)

    def neg_psi(f):
        return 0.5 * f @ K_inv @ f + np.logaddexp(0.0, -y_pm * f).sum()

    def neg_psi_grad(f):
        return K_inv @ f - y_pm / (1.0 + np.exp(y_pm * f))

    res = minimize(neg_psi, np.zeros(n), jac=neg_psi_grad, method="BFGS",
                   options={"gtol": 1e-12, "maxiter": 1000})
    f_hat = res.x

    pi = 1.0 / (1.0 + np.exp(-f_hat))
    W = np.diag(pi * (1.0 - pi))
    B = np.eye(n) + np.sqrt(W) @ K @ np.sqrt(W)
    lml = -res.fun - 0.5 * np.linalg.slogdet(B)[1]

    k_star = _ref_kernel(Xs, X_test_s, sigma_f, length)
    mean = k_star.T @ (K_inv @ f_hat)
    cov_solve = np.linalg.solve(K + np.linalg.inv(W), k_star)
    var = sigma_f ** 2 - (k_star * cov_solve).sum(axis=0)

    probs = np.array([
        quad(lambda z: (1.0 / (1.0 + np.exp(-z)))
             * np.exp(-0.5 * (z - m) ** 2 / v) / np.sqrt(2 * np.pi * v),
             m - 12 * np.sqrt(v), m + 12 * np.sqrt(v), limit=200)[0]
        for m, v in zip(mean, var)
    ])
    return f_hat, lml, probs


def test_gp_matches_independent_reference_on_eight_points():
    rng = np.random.default_rng(6)
    X = np.vstack([rng.standard_normal((4, 2)),
                   rng.standard_normal((4, 2)) + 1.5])
    y = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    X_test = rng.standard_normal((5, 2)) + 0.75

    model = C.fit_gp(X, y, optimize=False, sigma_f=1.5, length=0.8)
    got = model.predict_proba(X_test)

    f_ref, lml_ref, probs_ref = _ref_gp(
        model.X_train, model.y_pm, model.standardizer.transform(X_test),
        sigma_f=1.5, length=0.8, jitter=model.jitter)

    sol = model._solution()
    assert np.abs(sol["f_hat"] - f_ref).max() <= 1e-6
    assert abs(model.lml - lml_ref) <= 1e-6
    assert np.abs(got - probs_ref).max() <= 1e-6


def test_gp_symmetric_pair_predicts_half_at_midpoint():
    X = np.array([[-1.0], [1.0]])
    y = np.array([0, 1])
    model = C.fit_gp(X, y, optimize=False)
    p = model.predict_proba(np.array([[0.0]]))
    assert abs(p[0] - 0.5) <= 1e-6


def test_gp_reverts_to_prior_far_from_data():
    X, y = _blob_2d(seed=7)
    model = C.fit_gp(X, y, optimize=False, sigma_f=1.0, length=1.0)
    # 50 standardized units away >= 10 length scales
    far = (model.standardizer.mean + 50.0 * model.standardizer.std)[None, :]
    p = model.predict_proba(far)
    assert abs(p[0] - 0.5) <= 0.01


def test_gp_optimization_improves_marginal_likelihood():
    X, y = _blob_2d(seed=8)
    fixed = C.fit_gp(X, y, optimize=False, sigma_f=1.0, length=1.0)
    opt = C.fit_gp(X, y, optimize=True)
    assert opt.optimized and not fixed.optimized
    assert opt.lml >= fixed.lml - 1e-9
    lo, hi = C._GP_BOUNDS[0]
    assert lo - 1e-12 <= opt.log_sigma_f <= hi + 1e-12


def test_gp_handles_duplicate_rows_via_jitter():
    X, y = _blob_2d(seed=9)
    X[1] = X[0]  # exact duplicate with the same label: singular kernel
    y[1] = y[0]
    model = C.fit_gp(X, y, optimize=False)
    assert np.isfinite(model.predict_proba(X)).all()


def test_gp_sample_order_invariance():
    X, y = _blob_2d(seed=10)
    X_test = np.random.default_rng(11).standard_normal((6, 2)) + 1.0
    base = C.fit_gp(X, y, optimize=False, sigma_f=1.2, length=0.9)
    perm = np.random.default_rng(12).permutation(len(y))
    shuf = C.fit_gp(X[perm], y[perm], optimize=False, sigma_f=1.2, length=0.9)
    assert np.abs(base.predict_proba(X_test)
                  - shuf.predict_proba(X_test)).max() <= 1e-9


def test_gp_convergence_error_carries_diagnostics():
    K = np.eye(4)
    y_pm = np.array([-1.0, -1.0, 1.0, 1.0])
    with pytest.raises(C.ConvergenceError) as exc:
        C._laplace_mode(K, y_pm, tol=-1.0, max_iter=3)
    assert exc.value.diagnostics["max_iter"] == 3


# ---------------------------------------------------------------------------
# shared prediction contract
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["logistic", "gp"])
def test_batch_prediction_equals_loop(kind):
    X, y = _blob_2d(seed=13)
    X_test = np.random.default_rng(14).standard_normal((7, 2)) + 1.2
    model = C.fit(kind, X, y, **({} if kind == "logistic"
                                 else {"optimize": False}))
    batch = model.predict_proba(X_test)
    loop = np.array([model.predict_proba(X_test[i:i + 1])[0]
                     for i in range(len(X_test))])
    assert np.abs(batch - loop).max() <= 1e-12


@pytest.mark.parametrize("kind", ["logistic", "gp"])
def test_prediction_invariant_to_affine_feature_rescaling(kind):
    X, y = _blob_2d(seed=15)
    X_test = np.random.default_rng(16).standard_normal((10, 2)) + 1.2
    scale = np.array([3.0, 0.25])
    shift = np.array([-7.0, 40.0])
    a = C.fit(kind, X, y, **({} if kind == "logistic"
                             else {"optimize": False}))
    b = C.fit(kind, X * scale + shift, y, **({} if kind == "logistic"
                                             else {"optimize": False}))
    pa, la = C.predict(a, X_test)
    pb, lb = C.predict(b, X_test * scale + shift)
    assert np.abs(pa - pb).max() <= 1e-8
    assert np.array_equal(la, lb)


def test_predict_rejects_dimension_mismatch():
    X, y = _blob_2d(seed=17)
    model = C.fit_logistic(X, y)
    with pytest.raises(ValueError, match="dimension mismatch"):
        model.predict_proba(np.zeros((3, 5)))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["logistic", "gp"])
def test_model_json_round_trip(tmp_path, kind):
    X, y = _blob_2d(seed=18)
    X_test = np.random.default_rng(19).standard_normal((5, 2)) + 1.2
    model = C.fit(kind, X, y, **({} if kind == "logistic"
                                 else {"optimize": False}))
    path = tmp_path / f"model_{kind}.json"
    C.save_model(path, model)
    loaded = C.load_model(path)
    assert np.abs(model.predict_proba(X_test)
                  - loaded.predict_proba(X_test)).max() <= 1e-12
    # serialization is stable: a second save emits identical bytes
    assert C.model_to_json(loaded) == path.read_text()


def test_model_json_version_and_kind_rejection(tmp_path):
    X, y = _blob_2d(seed=20)
    text = C.model_to_json(C.fit_logistic(X, y))
    import json
    payload = json.loads(text)
    payload["format_version"] = 42
    with pytest.raises(ValueError, match="format version"):
        C.model_from_json(json.dumps(payload))
    payload["format_version"] = C.MODEL_FORMAT_VERSION
    payload["kind"] = "tree"
    with pytest.raises(ValueError, match="unknown classifier kind"):
        C.model_from_json(json.dumps(payload))
    with pytest.raises(FileNotFoundError, match="missing model file"):
        C.load_model(tmp_path / "absent.json")
