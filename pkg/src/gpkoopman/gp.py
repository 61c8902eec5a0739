"""Exact and sparse (variational free energy) GP regression.

Multi-output targets are handled as independent channels that share one
kernel, one noise level and one inducing set; objectives are summed over
channels.  Targets may be passed as ``(N,)`` or ``(N, C)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .kernels import (
    KernelParams,
    as_points,
    gram,
    gram_hyper_derivatives,
    gram_state_derivatives,
)

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)
RANK_DEFICIENT_PIVOT = 1e-15


class CholeskyError(np.linalg.LinAlgError):
    """A covariance matrix was not numerically positive definite."""


def _chol(A, what: str) -> np.ndarray:
    try:
        L = linalg.cholesky(A, lower=True, check_finite=True)
        d = np.diag(L) ** 2
        # pivots at rounding level mean the matrix is singular in practice
        if d.min() <= RANK_DEFICIENT_PIVOT * d.max():
            raise np.linalg.LinAlgError("pivot at rounding level")
        return L
    except (np.linalg.LinAlgError, ValueError) as exc:
        diag = np.diag(A)
        try:
            cond = np.linalg.cond(A)
        except np.linalg.LinAlgError:
            cond = np.inf
        raise CholeskyError(
            f"Cholesky factorization of {what} failed (size {A.shape[0]}, "
            f"min diag {diag.min():.3e}, condition number {cond:.3e})"
        ) from exc


def _targets(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != n:
        raise ValueError(f"targets must have {n} rows, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets contain non-finite entries")
    return y


def inducing_cholesky(Z, params: KernelParams):
    """Cholesky factor of ``K_ZZ + jitter * I``.

    If ``params.inducing_jitter`` is zero and the factorization fails, it is
    retried once with jitter ``1e-8 * signal_variance`` and a warning is
    logged.

    Returns
    -------
    L : ndarray, shape (M, M)
    jitter : float
        The jitter actually used.
    """
    Kzz = gram(Z, Z, params)
    jitter = params.inducing_jitter
    M = len(Z)
    try:
        return _chol(Kzz + jitter * np.eye(M), "K_ZZ"), jitter
    except CholeskyError:
        if jitter > 0:
            raise
    jitter = 1e-8 * params.signal_variance
    log.warning("K_ZZ not positive definite without jitter; retrying with jitter %.3e", jitter)
    return _chol(Kzz + jitter * np.eye(M), "K_ZZ with fallback jitter"), jitter


# ---------------------------------------------------------------------------
# Exact GP


@dataclass(frozen=True)
class ExactGP:
    """Exact GP posterior.

    ``weights`` holds ``(K_XX + s_Y^2 I)^-1 Y`` with one column per channel.
    """

    inputs: np.ndarray
    weights: np.ndarray
    chol_noisy_gram: np.ndarray
    params: KernelParams

    def predict(self, Xs):
        """Posterior mean ``(n, C)`` and latent variance ``(n,)`` at Xs."""
        Xs = as_points(Xs, self.params.dim, "Xs")
        Ksx = gram(Xs, self.inputs, self.params)
        mean = Ksx @ self.weights
        v = linalg.solve_triangular(self.chol_noisy_gram, Ksx.T, lower=True)
        var = self.params.signal_variance - np.sum(v * v, axis=0)
        return mean, var

    def posterior_kernel(self, x, x2) -> float:
        kx = gram(x, self.inputs, self.params)[0]
        kx2 = gram(x2, self.inputs, self.params)[0]
        a = linalg.solve_triangular(self.chol_noisy_gram, kx, lower=True)
        b = linalg.solve_triangular(self.chol_noisy_gram, kx2, lower=True)
        return float(gram(x, x2, self.params)[0, 0] - a @ b)


def fit_exact(X, y, params: KernelParams) -> ExactGP:
    X = as_points(X, params.dim, "X")
    Y = _targets(y, len(X))
    K = gram(X, X, params) + params.noise_variance * np.eye(len(X))
    L = _chol(K, "K_XX + noise")
    weights = linalg.cho_solve((L, True), Y)
    return ExactGP(inputs=X, weights=weights, chol_noisy_gram=L, params=params)


def log_marginal_likelihood(X, y, params: KernelParams) -> float:
    """Exact log evidence, summed over target channels."""
    X = as_points(X, params.dim, "X")
    Y = _targets(y, len(X))
    N, C = Y.shape
    K = gram(X, X, params) + params.noise_variance * np.eye(N)
    L = _chol(K, "K_XX + noise")
    c = linalg.solve_triangular(L, Y, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (C * (N * LOG2PI + logdet) + np.sum(c * c)))


# ---------------------------------------------------------------------------
# Sparse GP (VFE)


@dataclass(frozen=True)
class SparseGP:
    """VFE sparse GP posterior.

    Attributes
    ----------
    inducing : ndarray, shape (M, D)
    weights : ndarray, shape (M, C)
        ``(K_ZX K_XZ + s^2 K_ZZ)^-1 K_ZX Y``.
    info_gain : ndarray, shape (M, M)
        ``K_ZZ^-1 - s^2 (K_ZX K_XZ + s^2 K_ZZ)^-1`` (symmetrized).
    chol_zz : ndarray
        Cholesky factor of ``K_ZZ + jitter * I``.
    chol_b : ndarray
        Cholesky factor of ``Psi Psi^T + s^2 I`` in the preconditioned basis.
    noise_variance : float
        The ``s^2`` used above.
    """

    inducing: np.ndarray
    weights: np.ndarray
    info_gain: np.ndarray
    chol_zz: np.ndarray
    chol_b: np.ndarray
    noise_variance: float
    params: KernelParams

    def features(self, Xs) -> np.ndarray:
        """Preconditioned features ``L_ZZ^-1 k_Z(x)``, shape (n, M)."""
        Kzs = gram(self.inducing, Xs, self.params)
        return linalg.solve_triangular(self.chol_zz, Kzs, lower=True).T

    def predict(self, Xs):
        """Posterior mean ``(n, C)`` and latent variance ``(n,)`` at Xs."""
        Xs = as_points(Xs, self.params.dim, "Xs")
        Kzs = gram(self.inducing, Xs, self.params)
        mean = Kzs.T @ self.weights
        v = linalg.solve_triangular(self.chol_zz, Kzs, lower=True)
        w = linalg.solve_triangular(self.chol_b, v, lower=True)
        var = (
            self.params.signal_variance
            - np.sum(v * v, axis=0)
            + self.noise_variance * np.sum(w * w, axis=0)
        )
        return mean, var

    def posterior_kernel(self, x, x2) -> float:
        return posterior_kernel(self, x, x2)


def _vfe_factors(X, Z, params: KernelParams, noise_variance: float):
    L, _ = inducing_cholesky(Z, params)
    Kzx = gram(Z, X, params)
    Psi = linalg.solve_triangular(L, Kzx, lower=True)
    G = Psi @ Psi.T
    Bm = G + noise_variance * np.eye(len(Z))
    LB = _chol(Bm, "Psi Psi^T + noise")
    return L, Kzx, Psi, G, LB


def fit_vfe(X, y, Z, params: KernelParams, noise_variance: float | None = None) -> SparseGP:
    """Fit the VFE posterior.

    ``noise_variance`` overrides ``params.noise_variance`` (used for the
    lifted model, where the regularization differs from the sensor noise).
    """
    X = as_points(X, params.dim, "X")
    Z = as_points(Z, params.dim, "Z")
    Y = _targets(y, len(X))
    s2 = params.noise_variance if noise_variance is None else float(noise_variance)
    L, Kzx, Psi, G, LB = _vfe_factors(X, Z, params, s2)
    M = len(Z)
    # A = L^-T B^-1 Psi Y
    weights = linalg.solve_triangular(L, linalg.cho_solve((LB, True), Psi @ Y), lower=True, trans="T")
    Binv = linalg.cho_solve((LB, True), np.eye(M))
    inner = np.eye(M) - s2 * Binv
    Linv = linalg.solve_triangular(L, np.eye(M), lower=True)
    info = Linv.T @ inner @ Linv
    info = 0.5 * (info + info.T)
    return SparseGP(
        inducing=Z, weights=weights, info_gain=info, chol_zz=L, chol_b=LB,
        noise_variance=s2, params=params,
    )


def posterior_kernel(model: SparseGP, x, x2) -> float:
    """Sparse posterior covariance ``k(x, x2) - k_Z(x)^T B k_Z(x2)``."""
    p = model.params
    kx = gram(model.inducing, x, p)[:, 0]
    kx2 = gram(model.inducing, x2, p)[:, 0]
    return float(gram(x, x2, p)[0, 0] - kx @ model.info_gain @ kx2)


def elbo(X, y, Z, params: KernelParams) -> float:
    """Variational free energy, summed over target channels."""
    return elbo_and_gradient(X, y, Z, params, need_grad=False)[0]


def elbo_and_gradient(X, y, Z, params: KernelParams, need_grad: bool = True,
                      wrt_inducing: bool = True):
    """VFE objective and its gradient.

    Returns
    -------
    value : float
    grad_hypers : ndarray, shape (D + 2,) or None
        Derivatives over ``params.log_hypers()`` (log lengthscales, log signal
        variance, log noise variance).
    grad_inducing : ndarray, shape (M, D) or None
    """
    X = as_points(X, params.dim, "X")
    if np.asarray(Z).size == 0:
        raise ValueError("at least one inducing point is required")
    Z = as_points(Z, params.dim, "Z")
    Y = _targets(y, len(X))
    N, C = Y.shape
    M, D = Z.shape
    s2 = params.noise_variance
    sf2 = params.signal_variance

    L, Kzx, Psi, G, LB = _vfe_factors(X, Z, params, s2)
    PsiY = Psi @ Y
    c = linalg.solve_triangular(LB, PsiY, lower=True)
    logdet = (N - M) * np.log(s2) + 2.0 * np.sum(np.log(np.diag(LB)))
    quad = (np.sum(Y * Y) - np.sum(c * c)) / s2
    trace_gap = N * sf2 - np.sum(Psi * Psi)
    value = -0.5 * (C * (N * LOG2PI + logdet) + quad) - C * trace_gap / (2.0 * s2)
    if not need_grad:
        return float(value), None, None

    # alpha = Rtilde^-1 Y ; Q = K_ZZ^-1 K_ZX
    BinvPsiY = linalg.cho_solve((LB, True), PsiY)
    alpha = (Y - Psi.T @ BinvPsiY) / s2
    Q = linalg.solve_triangular(L, Psi, lower=True, trans="T")
    BinvPsi = linalg.cho_solve((LB, True), Psi)
    QRinv = linalg.solve_triangular(L, BinvPsi, lower=True, trans="T")
    Qalpha = Q @ alpha
    # P1 = Q S, P2 = Q S Q^T with S = 0.5 sum a a^T - C/2 Rtilde^-1 + C/(2 s2) I
    P1 = 0.5 * Qalpha @ alpha.T - 0.5 * C * QRinv + (0.5 * C / s2) * Q
    P2 = 0.5 * Qalpha @ Qalpha.T - 0.5 * C * (QRinv @ Q.T) + (0.5 * C / s2) * (Q @ Q.T)
    P2 = 0.5 * (P2 + P2.T)

    _, dKzx = gram_hyper_derivatives(Z, X, params)
    _, dKzz = gram_hyper_derivatives(Z, Z, params)
    grad = np.empty(D + 2)
    for j in range(D + 1):
        grad[j] = 2.0 * np.sum(P1 * dKzx[j]) - np.sum(P2 * dKzz[j])
    grad[D] -= C * N * sf2 / (2.0 * s2)
    tr_Rinv = (N - np.sum(BinvPsi * Psi)) / s2
    tr_S1 = 0.5 * np.sum(alpha * alpha) - 0.5 * C * tr_Rinv
    grad[D + 1] = s2 * tr_S1 + C * trace_gap / (2.0 * s2)

    grad_z = None
    if wrt_inducing:
        Szx = gram_state_derivatives(Z, X, params)
        Szz = gram_state_derivatives(Z, Z, params)
        grad_z = np.empty((M, D))
        for d in range(D):
            grad_z[:, d] = 2.0 * np.sum(P1 * Szx[d], axis=1) - 2.0 * np.sum(P2 * Szz[d], axis=1)
    return float(value), grad, grad_z


def elbo_gradient(X, y, Z, params: KernelParams):
    """Gradient of :func:`elbo` over (log-hyperparameters, inducing coordinates)."""
    _, g, gz = elbo_and_gradient(X, y, Z, params)
    return g, gz


def elbo_noise_profile(X, y, Z, params: KernelParams, noise_grid) -> np.ndarray:
    """VFE of the targets for each noise variance in ``noise_grid``.

    Kernel, inducing set and targets are held fixed, so a single eigen
    decomposition of ``Psi Psi^T`` serves the whole grid.
    """
    X = as_points(X, params.dim, "X")
    Z = as_points(Z, params.dim, "Z")
    Y = _targets(y, len(X))
    N, C = Y.shape
    M = len(Z)
    L, _ = inducing_cholesky(Z, params)
    Psi = linalg.solve_triangular(L, gram(Z, X, params), lower=True)
    g, V = linalg.eigh(Psi @ Psi.T)
    g = np.maximum(g, 0.0)
    proj = V.T @ (Psi @ Y)
    proj2 = np.sum(proj * proj, axis=1)
    yy = np.sum(Y * Y)
    trace_gap = N * params.signal_variance - np.sum(Psi * Psi)
    out = []
    for s2 in np.asarray(noise_grid, dtype=float):
        logdet = (N - M) * np.log(s2) + np.sum(np.log(g + s2))
        quad = (yy - np.sum(proj2 / (g + s2))) / s2
        out.append(-0.5 * (C * (N * LOG2PI + logdet) + quad) - C * trace_gap / (2.0 * s2))
    return np.array(out)
