"""Sparse Gaussian-process predictor with inducing points.

The predictor is parametrised the way variational inducing-point GPs are:
inducing inputs ``Z``, a Gaussian posterior ``N(u0, S)`` over the function
values at ``Z`` and a stationary kernel.  With the identity link the
predictive mean and variance at ``x`` are

    mu(x)     = k(x)^T K^{-1} u0
    sigma2(x) = k(x, x) - k(x)^T K^{-1} k(x) + k(x)^T K^{-1} S K^{-1} k(x)

where ``K`` is the Gram matrix of ``Z``.  Besides prediction the module
provides the dense posterior covariance over a batch of points, a per-axis
bound on the gradient of the prediction, the query-point sampler and an
exact-GP grid fit used to obtain a model without variational training.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, eigh, solve_triangular

from .errors import FormatError, InvalidData, InvalidParameter, NumericalError, ResourceError
from .graph import SpatialDataset

__all__ = [
    "KernelSpec",
    "GpModel",
    "Predictions",
    "kernel_eval",
    "kernel_matrix",
    "kernel_grad",
    "cholesky_with_jitter",
    "predict",
    "predict_many",
    "compute_sigma_matrix",
    "sensitivity_bound",
    "generate_query_points",
    "log_marginal_likelihood",
    "fit_exact_gp_grid",
    "save_model",
    "load_model",
    "write_predictions",
    "read_predictions",
]

FAMILIES = ("rbf", "exponential")
JITTER_START = 1e-10
JITTER_MAX = 1e-4
SIGMA_MATRIX_MAX_BYTES = 2 << 30


@dataclass(frozen=True)
class KernelSpec:
    """Stationary kernel ``signal_variance * base(diag(theta) (x - z))``.

    ``rbf``: ``exp(-0.5 * ||diag(theta)(x - z)||_2^2)``;
    ``exponential``: ``exp(-||diag(theta)(x - z)||_1)``.
    ``white_noise`` is added to the diagonal of a point list's Gram matrix
    with itself, never to cross-covariances.
    """

    family: str
    theta: tuple
    signal_variance: float = 1.0
    white_noise: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidParameter(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        theta = tuple(float(t) for t in np.atleast_1d(self.theta))
        if not theta or any(not (t > 0 and math.isfinite(t)) for t in theta):
            raise InvalidParameter("length scales must be positive and finite")
        if not self.signal_variance > 0:
            raise InvalidParameter("signal_variance must be positive")
        if not self.white_noise >= 0:
            raise InvalidParameter("white_noise must be nonnegative")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "white_noise", float(self.white_noise))

    @property
    def d(self) -> int:
        return len(self.theta)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "theta": list(self.theta),
            "signal_variance": self.signal_variance,
            "white_noise": self.white_noise,
        }


def _as_points(spec: KernelSpec, x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim <= 1:
        a = a.reshape(1, -1)
    if a.shape[1] != spec.d:
        raise InvalidParameter(f"point dimension {a.shape[1]} does not match kernel dimension {spec.d}")
    return a


def kernel_matrix(spec: KernelSpec, a, b=None) -> np.ndarray:
    """Cross-covariance ``k(a_i, b_j)``; with ``b is None`` the Gram matrix of ``a``
    with itself, white noise included on the diagonal."""
    A = _as_points(spec, a)
    same = b is None
    B = A if same else _as_points(spec, b)
    theta = np.asarray(spec.theta)
    diff = (A[:, None, :] - B[None, :, :]) * theta
    if spec.family == "rbf":
        K = np.exp(-0.5 * np.einsum("ijk,ijk->ij", diff, diff))
    else:
        K = np.exp(-np.abs(diff).sum(axis=2))
    K *= spec.signal_variance
    if same and spec.white_noise:
        K[np.diag_indices_from(K)] += spec.white_noise
    return K


def kernel_eval(spec: KernelSpec, x, z) -> float:
    """Cross-covariance of two single points (no white noise)."""
    xa, za = _as_points(spec, x), _as_points(spec, z)
    if xa.shape[0] != 1 or za.shape[0] != 1:
        raise InvalidParameter("kernel_eval takes two single points")
    return float(kernel_matrix(spec, xa, za)[0, 0])


def kernel_grad(spec: KernelSpec, x, Z) -> np.ndarray:
    """Gradient of ``k(x, z_j)`` with respect to ``x``: array of shape ``(rho, d)``.

    For the exponential kernel the one-sided magnitude ``theta_i k`` is used
    where ``x_i == z_ji``, so norms of the result bound both one-sided slopes.
    """
    xa = _as_points(spec, x)[0]
    Zm = _as_points(spec, Z)
    theta = np.asarray(spec.theta)
    k = kernel_matrix(spec, xa[None, :], Zm)[0]
    diff = xa[None, :] - Zm
    if spec.family == "rbf":
        return -(theta**2) * diff * k[:, None]
    sign = np.sign(diff)
    sign[sign == 0] = 1.0
    return -theta * sign * k[:, None]


def cholesky_with_jitter(M: np.ndarray, start=None, max_rel=JITTER_MAX):
    """Lower Cholesky factor of ``M + jitter * I``.

    Jitter starts at ``start`` (default ``1e-10 * mean(diag(M))``) and grows
    tenfold up to ``max_rel * mean(diag(M))``.  Returns ``(L, jitter)``.
    """
    M = np.asarray(M, dtype=float)
    scale = float(np.mean(np.diag(M))) if M.size else 1.0
    if not scale > 0:
        scale = 1.0
    jitter = JITTER_START * scale if start is None else float(start)
    limit = max_rel * scale
    eye = np.eye(M.shape[0])
    while True:
        try:
            return np.linalg.cholesky(M + jitter * eye), jitter
        except np.linalg.LinAlgError:
            if jitter >= limit * (1 - 1e-12):
                raise NumericalError(
                    f"Cholesky failed with jitter up to {jitter:.3g} (matrix size {M.shape[0]})"
                ) from None
            jitter = min(jitter * 10, limit)


class GpModel:
    """Inducing-point posterior ``N(u0, S)`` over ``f(Z)`` plus the kernel.

    The jittered Cholesky factor of ``K(Z, Z)`` and the extreme eigenvalues
    used by :func:`sensitivity_bound` are computed once here.
    ``noise_variance`` records the Gaussian likelihood variance when the model
    came from a fit; prediction does not use it.
    """

    link = "identity"

    def __init__(self, kernel: KernelSpec, inducing_inputs, u0, S_mat, jitter=None, noise_variance=0.0):
        Z = np.array(inducing_inputs, dtype=float)
        if Z.ndim == 1:
            Z = Z.reshape(-1, kernel.d)
        if Z.ndim != 2 or Z.shape[0] < 1 or Z.shape[1] != kernel.d:
            raise InvalidParameter(f"inducing inputs must be (rho, {kernel.d}), got {Z.shape}")
        rho = Z.shape[0]
        u0 = np.array(u0, dtype=float).reshape(-1)
        S = np.array(S_mat, dtype=float).reshape(rho, rho) if np.size(S_mat) == rho * rho else None
        if u0.shape[0] != rho or S is None:
            raise InvalidParameter(f"u0 must have length {rho} and S_mat shape ({rho}, {rho})")
        if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(u0)) and np.all(np.isfinite(S))):
            raise InvalidData("model parameters must be finite")
        asym = np.max(np.abs(S - S.T)) if rho > 1 else 0.0
        if asym > 1e-10 * max(1.0, np.max(np.abs(S))):
            raise InvalidParameter(f"S_mat is not symmetric (max asymmetry {asym:.3g})")
        S = 0.5 * (S + S.T)
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise InvalidParameter("S_mat is not positive definite") from None

        K = kernel_matrix(kernel, Z)
        L, used = cholesky_with_jitter(K, start=jitter)
        for arr in (Z, u0, S):
            arr.setflags(write=False)
        self.kernel = kernel
        self.Z = Z
        self.u0 = u0
        self.S_mat = S
        self.jitter = used
        self.noise_variance = float(noise_variance)
        self._L = L
        self._alpha = cho_solve((L, True), u0)
        Kj = K + used * np.eye(rho)
        self.lambda_min_K = float(eigh(Kj, eigvals_only=True, subset_by_index=[0, 0])[0])
        self.lambda_max_S = float(eigh(S, eigvals_only=True, subset_by_index=[rho - 1, rho - 1])[0])

    @property
    def rho(self) -> int:
        return self.Z.shape[0]

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    def prior_variance(self) -> float:
        """``k(x, x)`` of a point with itself, white noise included."""
        return self.kernel.signal_variance + self.kernel.white_noise

    def solve_K(self, B) -> np.ndarray:
        return cho_solve((self._L, True), B)

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel.to_dict(),
            "jitter": self.jitter,
            "noise_variance": self.noise_variance,
            "link": self.link,
            "Z": self.Z.tolist(),
            "u0": self.u0.tolist(),
            "S_mat": self.S_mat.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GpModel":
        try:
            kernel = KernelSpec(**doc["kernel"])
            return cls(
                kernel,
                doc["Z"],
                doc["u0"],
                doc["S_mat"],
                jitter=doc.get("jitter"),
                noise_variance=doc.get("noise_variance", 0.0),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed GP model document: {exc}") from None

    def __eq__(self, other):
        if not isinstance(other, GpModel):
            return NotImplemented
        return (
            self.kernel == other.kernel
            and self.jitter == other.jitter
            and self.noise_variance == other.noise_variance
            and np.array_equal(self.Z, other.Z)
            and np.array_equal(self.u0, other.u0)
            and np.array_equal(self.S_mat, other.S_mat)
        )


@dataclass(frozen=True, eq=False)
class Predictions:
    """Per-point predictions; ``eta`` is the prediction vector used downstream."""

    eta: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray

    @property
    def eta_min(self) -> float:
        return float(self.eta.min())

    @property
    def eta_max(self) -> float:
        return float(self.eta.max())

    def __len__(self):
        return len(self.eta)

    def __eq__(self, other):
        if not isinstance(other, Predictions):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("eta", "mu", "sigma2"))


def predict_many(model: GpModel, X) -> Predictions:
    X = _as_points(model.kernel, X)
    Kxz = kernel_matrix(model.kernel, X, model.Z)
    mu = Kxz @ model._alpha
    A = model.solve_K(Kxz.T)  # rho x n, columns K^{-1} k(x)
    reduction = np.einsum("ij,ij->j", Kxz.T, A)
    inflation = np.einsum("ij,ij->j", A, model.S_mat @ A)
    sigma2 = model.prior_variance() - reduction + inflation
    if np.any(~(sigma2 > 0)):
        bad = int(np.flatnonzero(~(sigma2 > 0))[0])
        raise NumericalError(f"nonpositive predictive variance {sigma2[bad]:.3g} at point {bad}")
    return Predictions(eta=mu.copy(), mu=mu, sigma2=sigma2)


def predict(model: GpModel, x) -> tuple[float, float, float]:
    """``(mu, sigma2, eta)`` at a single point; ``eta == mu`` for the identity link."""
    p = predict_many(model, _as_points(model.kernel, x)[:1])
    return float(p.mu[0]), float(p.sigma2[0]), float(p.eta[0])


def compute_sigma_matrix(model: GpModel, data, max_bytes: int = SIGMA_MATRIX_MAX_BYTES) -> np.ndarray:
    """Dense posterior covariance ``K_ff - K_fu K^-1 K_uf + K_fu K^-1 S K^-1 K_uf``.

    Needs O(n^2) memory; raises :class:`ResourceError` beyond ``max_bytes``.
    """
    X = data.points if isinstance(data, SpatialDataset) else _as_points(model.kernel, data)
    n = X.shape[0]
    if 8 * n * n > max_bytes:
        raise ResourceError(f"a dense {n}x{n} covariance exceeds the {max_bytes} byte budget")
    Kff = kernel_matrix(model.kernel, X)
    Kuf = kernel_matrix(model.kernel, model.Z, X)
    A = model.solve_K(Kuf)
    Sigma = Kff - Kuf.T @ A + A.T @ model.S_mat @ A
    return 0.5 * (Sigma + Sigma.T)


def sensitivity_bound(model: GpModel, x, nu1_abs=None, nu2_minus_nu0_abs=None) -> np.ndarray:
    """Per-axis upper bound on ``|d eta / d x_i|`` at ``x``.

    ``nu1_abs`` and ``nu2_minus_nu0_abs`` are the link-dependent moments; they
    default to the identity-link values ``sqrt(sigma2)`` and ``0``.
    """
    xa = _as_points(model.kernel, x)[:1]
    kx = kernel_matrix(model.kernel, xa, model.Z)[0]
    A = model.solve_K(kx)
    sigma2 = model.prior_variance() - kx @ A + A @ model.S_mat @ A
    if not sigma2 > 0:
        raise NumericalError(f"nonpositive predictive variance {sigma2:.3g}")
    if nu1_abs is None:
        nu1_abs = math.sqrt(sigma2)
    if nu2_minus_nu0_abs is None:
        nu2_minus_nu0_abs = 0.0
    lam1, lam2 = model.lambda_min_K, model.lambda_max_S
    kappa1 = np.linalg.norm(kernel_grad(model.kernel, xa[0], model.Z), axis=0)
    kappa2 = np.zeros(model.d)  # stationary kernels: k(x, x) is constant
    mean_term = np.linalg.norm(model.u0) * abs(nu1_abs) / (lam1 * math.sqrt(sigma2)) * kappa1
    var_term = (
        abs(nu2_minus_nu0_abs)
        / (2 * sigma2)
        * (kappa2 + 2 * np.linalg.norm(kx) / lam1 * (1 + lam2 / lam1) * kappa1)
    )
    return mean_term + var_term


def generate_query_points(data: SpatialDataset, weights, n_new: int, radius: float, seed: int) -> SpatialDataset:
    """Weighted resample of ``data.points`` with uniform perturbations inside a ball.

    In two dimensions the perturbation is uniform over the disc of the given
    radius; in ``d`` dimensions over the ``d``-ball.
    """
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != data.n:
        raise InvalidParameter(f"{w.shape[0]} weights for {data.n} points")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidParameter("weights must be finite and nonnegative")
    total = w.sum()
    if not total > 0:
        raise InvalidParameter("weights sum to zero")
    if radius < 0:
        raise InvalidParameter("radius must be nonnegative")
    rng = np.random.default_rng(seed)
    idx = rng.choice(data.n, size=int(n_new), p=w / total)
    pts = data.points[idx].copy()
    if radius > 0:
        d = data.d
        direction = rng.standard_normal((int(n_new), d))
        norms = np.linalg.norm(direction, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        r = radius * rng.random((int(n_new), 1)) ** (1.0 / d)
        pts += direction / norms * r
    return SpatialDataset(pts)


def log_marginal_likelihood(spec: KernelSpec, X, y) -> float:
    """Exact-GP evidence with ``spec.white_noise`` as Gaussian noise variance."""
    K = kernel_matrix(spec, X)
    L, _ = cholesky_with_jitter(K)
    a = solve_triangular(L, np.asarray(y, dtype=float), lower=True)
    n = len(a)
    return float(-0.5 * a @ a - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi))


def fit_exact_gp_grid(data: SpatialDataset, grid: Sequence[KernelSpec]) -> GpModel:
    """Pick the grid kernel with the largest exact log marginal likelihood.

    The returned model uses every training point as an inducing input and the
    exact posterior of the noise-free latent function there:
    ``u0 = K (K + s I)^-1 y`` and ``S = s K (K + s I)^-1`` with ``s`` the
    selected candidate's ``white_noise``.  That candidate's noise moves to
    ``noise_variance`` and the model kernel carries ``white_noise = 0``, so
    predictions are the latent posterior mean and variance.
    """
    if data.responses is None:
        raise InvalidData("fitting needs responses")
    if not grid:
        raise InvalidParameter("empty kernel grid")
    X, y = data.points, data.responses
    scores = [log_marginal_likelihood(spec, X, y) for spec in grid]
    best = grid[int(np.argmax(scores))]
    latent = replace(best, white_noise=0.0)
    K = kernel_matrix(latent, X)
    lam, Q = np.linalg.eigh(0.5 * (K + K.T))
    lam = np.maximum(lam, JITTER_START * float(np.mean(np.diag(K))))
    s = max(best.white_noise, JITTER_START * latent.signal_variance)
    u0 = Q @ ((lam / (lam + s)) * (Q.T @ y))
    S = (Q * (s * lam / (lam + s))) @ Q.T
    S = 0.5 * (S + S.T)
    return GpModel(latent, X, u0, S, noise_variance=best.white_noise)


def save_model(model: GpModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path) -> GpModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return GpModel.from_dict(doc)


def write_predictions(pred: Predictions, path) -> None:
    """CSV with header ``id,eta,mu,sigma2``; floats written with ``repr``."""
    rows = ["id,eta,mu,sigma2"]
    for i, (e, m, s) in enumerate(zip(pred.eta.tolist(), pred.mu.tolist(), pred.sigma2.tolist())):
        rows.append(f"{i},{e!r},{m!r},{s!r}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_predictions(path) -> Predictions:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "id,eta,mu,sigma2":
        raise FormatError(f"{path}: expected header 'id,eta,mu,sigma2'")
    vals = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4 or int(parts[0]) != len(vals):
            raise FormatError(f"{path}:{lineno}: bad prediction row")
        vals.append([float(p) for p in parts[1:]])
    arr = np.array(vals, dtype=float).reshape(-1, 3)
    return Predictions(eta=arr[:, 0].copy(), mu=arr[:, 1].copy(), sigma2=arr[:, 2].copy())
