"""Binary classifiers over shape-ratio features: regularized logistic
regression fit by damped Newton iterations, and a Gaussian-process
classifier with a Laplace posterior approximation and an RBF kernel.

Both are written against explicit numerical contracts (fixed tolerances,
deterministic initialization and restarts) so fits are reproducible to the
bit and verifiable against independent references:

- Logistic: minimizes ``sum_i bce_i / (2 * n_{class(i)}) + l2/2 * ||w||^2``
  (bias unregularized). The per-class normalization makes fits invariant to
  duplicating samples of one class.
- GP: logistic link with labels in {-1, +1}; the mode is found by damped
  Newton steps on the penalized log-likelihood, stabilized through the
  Cholesky factor of ``B = I + W^1/2 K W^1/2``. Hyperparameters maximize the
  Laplace marginal likelihood from three fixed restarts. The predictive
  class probability integrates the link over the latent Gaussian with
  Gauss-Hermite quadrature.

Features are standardized to train-set mean and unit variance inside the
models; callers always pass raw feature matrices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

MODEL_FORMAT_VERSION = 1

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(64)

# Fixed (log sigma_f, log length) starts for marginal-likelihood ascent.
_GP_RESTARTS = ((0.0, 0.0), (np.log(2.0), np.log(3.0)), (0.0, np.log(0.3)))
_GP_BOUNDS = ((np.log(0.05), np.log(20.0)), (np.log(0.05), np.log(50.0)))


class ConvergenceError(RuntimeError):
    """Raised when an iterative fit exhausts its iteration budget."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message} ({diagnostics})")
        self.diagnostics = diagnostics


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _validate_xy(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2:
        raise ValueError("X must be 2D")
    if y.shape != (X.shape[0],):
        raise ValueError("y must be 1D matching X rows")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    y = y.astype(np.int64)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("y must contain only 0/1 labels")
    if len(np.unique(y)) < 2:
        raise ValueError("single-class input: both classes are required to fit")
    return X, y


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, weights: np.ndarray | None = None) -> "Standardizer":
        """Column-wise moments, optionally under per-sample weights.

        Weighted moments keep the whole fit invariant to duplicating samples
        of one class when the weights renormalize per class.
        """
        if weights is None:
            mean = X.mean(axis=0)
            var = X.var(axis=0)
        else:
            w = weights / weights.sum()
            mean = w @ X
            var = w @ (X - mean) ** 2
        return cls(mean=mean, std=np.maximum(np.sqrt(var), 1e-12))

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.mean.shape[0]:
            raise ValueError(
                f"feature dimension mismatch: expected (n, {self.mean.shape[0]}),"
                f" got {X.shape}")
        return (X - self.mean) / self.std


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------

@dataclass
class LogisticModel:
    standardizer: Standardizer
    coef: np.ndarray
    intercept: float
    l2: float
    balanced: bool
    n_iter: int = 0
    kind: str = field(default="logistic")

    def decision(self, X: np.ndarray) -> np.ndarray:
        return self.standardizer.transform(X) @ self.coef + self.intercept

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.decision(X))


def _logistic_objective(theta: np.ndarray, Xs: np.ndarray, y: np.ndarray,
                        sw: np.ndarray, l2: float) -> float:
    w, b = theta[:-1], theta[-1]
    z = Xs @ w + b
    # stable weighted BCE: log(1 + e^-z) + (1-y) z
    bce = np.logaddexp(0.0, -z) + (1.0 - y) * z
    return float(sw @ bce + 0.5 * l2 * (w @ w))


def fit_logistic(X: np.ndarray, y: np.ndarray, l2: float = 1.0,
                 balanced: bool = True, tol: float = 1e-8,
                 max_iter: int = 100) -> LogisticModel:
    """Damped-Newton fit of L2-regularized logistic regression.

    Sample weights are ``1 / (2 n_c)`` per class when ``balanced`` (so both
    classes contribute equal total weight), or ``1 / n`` otherwise.
    Converges when the 2-norm of the gradient falls to ``tol``; the
    objective is strictly convex for ``l2 > 0`` so the optimum is unique.
    """
    X, y = _validate_xy(X, y)
    if l2 < 0:
        raise ValueError("l2 must be >= 0")
    n = X.shape[0]
    if balanced:
        counts = np.bincount(y, minlength=2)
        sw = 1.0 / (2.0 * counts[y])
    else:
        sw = np.full(n, 1.0 / n)
    # standardize under the same sample distribution the loss weights imply,
    # so duplicating one class's samples changes nothing anywhere
    std = Standardizer.fit(X, weights=sw)
    Xs = std.transform(X)
    d = Xs.shape[1]
    yf = y.astype(np.float64)

    theta = np.zeros(d + 1)
    obj = _logistic_objective(theta, Xs, yf, sw, l2)
    for it in range(1, max_iter + 1):
        z = Xs @ theta[:-1] + theta[-1]
        p = _sigmoid(z)
        resid = sw * (p - yf)
        grad = np.concatenate([Xs.T @ resid + l2 * theta[:-1], [resid.sum()]])
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            return LogisticModel(std, theta[:-1].copy(), float(theta[-1]),
                                 l2, balanced, n_iter=it - 1)
        r = sw * p * (1.0 - p)
        Xb = np.hstack([Xs, np.ones((n, 1))])
        H = Xb.T @ (Xb * r[:, None])
        H[np.arange(d), np.arange(d)] += l2
        H[np.arange(d + 1), np.arange(d + 1)] += 1e-12  # numeric floor
        step = np.linalg.solve(H, grad)
        alpha = 1.0
        for _ in range(60):
            trial = theta - alpha * step
            trial_obj = _logistic_objective(trial, Xs, yf, sw, l2)
            if trial_obj <= obj:
                break
            alpha *= 0.5
        theta, obj = trial, trial_obj
    z = Xs @ theta[:-1] + theta[-1]
    resid = sw * (_sigmoid(z) - yf)
    grad = np.concatenate([Xs.T @ resid + l2 * theta[:-1], [resid.sum()]])
    raise ConvergenceError("logistic fit did not converge", {
        "max_iter": max_iter, "grad_norm": float(np.linalg.norm(grad)),
        "objective": obj, "l2": l2,
    })


# ---------------------------------------------------------------------------
# Gaussian-process classifier (Laplace approximation, RBF kernel)
# ---------------------------------------------------------------------------

def rbf_kernel(A: np.ndarray, B: np.ndarray, sigma_f: float,
               length: float) -> np.ndarray:
    d2 = cdist(A, B, metric="sqeuclidean")
    return sigma_f ** 2 * np.exp(-0.5 * d2 / length ** 2)


def _log_lik(y_pm: np.ndarray, f: np.ndarray) -> float:
    return float(-np.logaddexp(0.0, -y_pm * f).sum())


def _laplace_mode(K: np.ndarray, y_pm: np.ndarray, tol: float,
                  max_iter: int) -> dict:
    """Newton mode of the latent posterior, damped to be monotone in the
    penalized log-likelihood ``psi(f) = -f' K^-1 f / 2 + log p(y | f)``.

    Returns the mode, the converged Cholesky factor of B, and the marginal
    likelihood ``psi(f_hat) - sum(log diag(L))``.
    """
    n = K.shape[0]
    t = (y_pm + 1.0) / 2.0
    f = np.zeros(n)
    a = np.zeros(n)
    psi = _log_lik(y_pm, f)  # quadratic term is 0 at f = 0
    for it in range(1, max_iter + 1):
        pi = _sigmoid(f)
        w = pi * (1.0 - pi)
        sw = np.sqrt(w)
        B = np.eye(n) + sw[:, None] * K * sw[None, :]
        L = cholesky(B, lower=True)
        b = w * f + (t - pi)
        tmp = solve_triangular(L, sw * (K @ b), lower=True)
        a_new = b - sw * solve_triangular(L.T, tmp, lower=False)
        f_new = K @ a_new
        psi_new = -0.5 * float(a_new @ f_new) + _log_lik(y_pm, f_new)
        # damp: both f and a are interpolated so a stays equal to K^-1 f
        halvings = 0
        while psi_new < psi and halvings < 30:
            a_new = 0.5 * (a_new + a)
            f_new = 0.5 * (f_new + f)
            psi_new = -0.5 * float(a_new @ f_new) + _log_lik(y_pm, f_new)
            halvings += 1
        delta = psi_new - psi
        f, a, psi = f_new, a_new, psi_new
        if abs(delta) <= tol:
            pi = _sigmoid(f)
            w = pi * (1.0 - pi)
            sw = np.sqrt(w)
            B = np.eye(n) + sw[:, None] * K * sw[None, :]
            L = cholesky(B, lower=True)
            return {
                "f_hat": f, "grad": t - pi, "sqrt_w": sw, "chol_b": L,
                "lml": psi - float(np.log(np.diag(L)).sum()),
                "n_iter": it,
            }
    raise ConvergenceError("latent mode search did not converge", {
        "max_iter": max_iter, "last_delta": float(delta),
        "psi": psi, "n": n,
    })


@dataclass
class GPModel:
    standardizer: Standardizer
    X_train: np.ndarray         # standardized
    y_pm: np.ndarray            # labels in {-1, +1}
    log_sigma_f: float
    log_length: float
    jitter: float
    lml: float
    optimized: bool
    kind: str = field(default="gp")
    _cache: dict = field(default=None, repr=False, compare=False)

    def _solution(self) -> dict:
        if self._cache is None:
            K = rbf_kernel(self.X_train, self.X_train,
                           np.exp(self.log_sigma_f), np.exp(self.log_length))
            K[np.diag_indices_from(K)] += self.jitter
            self._cache = _laplace_mode(K, self.y_pm, tol=1e-9, max_iter=100)
        return self._cache

    def latent(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance of the latent function at X."""
        sol = self._solution()
        sf, ls = np.exp(self.log_sigma_f), np.exp(self.log_length)
        Xs = self.standardizer.transform(X)
        k_star = rbf_kernel(self.X_train, Xs, sf, ls)
        mean = k_star.T @ sol["grad"]
        v = solve_triangular(sol["chol_b"], sol["sqrt_w"][:, None] * k_star,
                             lower=True)
        var = np.maximum(sf ** 2 - (v ** 2).sum(axis=0), 1e-12)
        return mean, var

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        mean, var = self.latent(X)
        z = mean[:, None] + np.sqrt(2.0 * var)[:, None] * _GH_NODES[None, :]
        return (_sigmoid(z) @ _GH_WEIGHTS) / np.sqrt(np.pi)


def _neg_lml(log_params: np.ndarray, Xs: np.ndarray, y_pm: np.ndarray,
             jitter: float) -> float:
    K = rbf_kernel(Xs, Xs, np.exp(log_params[0]), np.exp(log_params[1]))
    K[np.diag_indices_from(K)] += jitter
    try:
        return -_laplace_mode(K, y_pm, tol=1e-9, max_iter=100)["lml"]
    except (ConvergenceError, np.linalg.LinAlgError):
        return 1e12


def fit_gp(X: np.ndarray, y: np.ndarray, optimize: bool = True,
           sigma_f: float = 1.0, length: float = 1.0,
           jitter: float = 1e-8) -> GPModel:
    """Fit the Laplace GP classifier.

    With ``optimize=True`` the kernel amplitude and length scale maximize the
    approximate marginal likelihood via L-BFGS-B (numerical gradients) from
    three fixed restarts; the best final value wins. Everything is
    deterministic for fixed inputs.
    """
    X, y = _validate_xy(X, y)
    std = Standardizer.fit(X)
    Xs = std.transform(X)
    y_pm = 2.0 * y - 1.0

    if optimize:
        best = None
        for start in _GP_RESTARTS:
            res = minimize(_neg_lml, np.array(start), args=(Xs, y_pm, jitter),
                           method="L-BFGS-B", bounds=_GP_BOUNDS)
            if best is None or res.fun < best.fun:
                best = res
        log_sf, log_ls = float(best.x[0]), float(best.x[1])
    else:
        log_sf, log_ls = float(np.log(sigma_f)), float(np.log(length))

    model = GPModel(standardizer=std, X_train=Xs, y_pm=y_pm,
                    log_sigma_f=log_sf, log_length=log_ls, jitter=jitter,
                    lml=0.0, optimized=optimize)
    model.lml = model._solution()["lml"]
    return model


# ---------------------------------------------------------------------------
# Shared entry points and serialization
# ---------------------------------------------------------------------------

def fit(kind: str, X: np.ndarray, y: np.ndarray, **kwargs):
    if kind == "logistic":
        return fit_logistic(X, y, **kwargs)
    if kind == "gp":
        return fit_gp(X, y, **kwargs)
    raise ValueError(f"unknown classifier kind {kind!r}")


def predict(model, X: np.ndarray, threshold: float = 0.5
            ) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and hard labels (probability >= threshold)."""
    probs = model.predict_proba(X)
    return probs, (probs >= threshold).astype(np.int64)


def model_to_json(model) -> str:
    if isinstance(model, LogisticModel):
        payload = {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": "logistic",
            "mean": model.standardizer.mean.tolist(),
            "std": model.standardizer.std.tolist(),
            "coef": model.coef.tolist(),
            "intercept": model.intercept,
            "l2": model.l2,
            "balanced": model.balanced,
            "n_iter": model.n_iter,
        }
    elif isinstance(model, GPModel):
        payload = {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": "gp",
            "mean": model.standardizer.mean.tolist(),
            "std": model.standardizer.std.tolist(),
            "x_train": model.X_train.tolist(),
            "y_pm": model.y_pm.tolist(),
            "log_sigma_f": model.log_sigma_f,
            "log_length": model.log_length,
            "jitter": model.jitter,
            "lml": model.lml,
            "optimized": model.optimized,
        }
    else:
        raise ValueError(f"cannot serialize model of type {type(model).__name__}")
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def model_from_json(text: str):
    payload = json.loads(text)
    version = payload.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version: {version!r}")
    kind = payload.get("kind")
    std = Standardizer(mean=np.array(payload["mean"]),
                       std=np.array(payload["std"]))
    if kind == "logistic":
        return LogisticModel(std, np.array(payload["coef"]),
                             float(payload["intercept"]), float(payload["l2"]),
                             bool(payload["balanced"]),
                             n_iter=int(payload["n_iter"]))
    if kind == "gp":
        return GPModel(standardizer=std,
                       X_train=np.array(payload["x_train"]),
                       y_pm=np.array(payload["y_pm"]),
                       log_sigma_f=float(payload["log_sigma_f"]),
                       log_length=float(payload["log_length"]),
                       jitter=float(payload["jitter"]),
                       lml=float(payload["lml"]),
                       optimized=bool(payload["optimized"]))
    raise ValueError(f"unknown classifier kind {kind!r}")


def save_model(path: str | Path, model) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model_to_json(model))


def load_model(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing model file: {path}")
    return model_from_json(path.read_text())
