"""Koopman matrix estimation and spectral decomposition.

The estimator works in the Cholesky-preconditioned basis
``Psi(x) = L_ZZ^-1 k_Z(x)`` with ``L_ZZ L_ZZ^T = K_ZZ + jitter I``.  In this
basis the lifted dynamics read ``Psi(y) ~ U^T Psi(x)`` and the state is
read out with ``x = A0^T Psi(x)``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg

from .gp import elbo_noise_profile, inducing_cholesky
from .kernels import KernelParams, as_points, gram

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DROP_EIGENVALUE_BELOW = 1e-12
EIGVEC_CONDITION_LIMIT = 1e10


class RankCollapseError(RuntimeError):
    """Every singular value of the preconditioned data was truncated."""


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension affine map ``(x - mean) / scale``."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        return cls(mean=X.mean(axis=0), scale=scale)

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(mean=np.zeros(dim), scale=np.ones(dim))

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def inverse_transform(self, X):
        return np.asarray(X, dtype=float) * self.scale + self.mean

    def inverse_covariance(self, K):
        """Map a covariance (or stack of covariances) back to raw units."""
        return K * np.multiply.outer(self.scale, self.scale)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(mean=np.asarray(d["mean"], dtype=float), scale=np.asarray(d["scale"], dtype=float))


@dataclass(frozen=True)
class SnapshotSet:
    """Paired states ``X`` and successors ``Y``, both of shape (N, D).

    When a standardizer is attached, X and Y are already in standardized
    units.
    """

    X: np.ndarray
    Y: np.ndarray
    standardizer: Standardizer | None = None

    def __post_init__(self):
        X = as_points(self.X, name="X")
        Y = as_points(self.Y, name="Y")
        if X.shape != Y.shape:
            raise ValueError(f"X and Y must have the same shape, got {X.shape} and {Y.shape}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def permuted(self, perm) -> "SnapshotSet":
        return SnapshotSet(self.X[perm], self.Y[perm], self.standardizer)


@dataclass(frozen=True)
class KoopmanModel:
    """Fitted Koopman model in the preconditioned basis.

    Attributes
    ----------
    U : ndarray (M, M)
        Koopman matrix.
    eigenvalues : ndarray (M,) complex
        Sorted by modulus (descending), conjugate pairs adjacent.
    right_eigvecs : ndarray (M, M) complex
        Columns ``w_i`` with ``U w_i = lambda_i w_i``; eigenfunctions are
        ``phi_i(x) = Psi(x)^T w_i``.
    left_eigvecs : ndarray (M, M) complex
        ``right_eigvecs^-1``.
    modes : ndarray (r, D) complex
        Projected full-state modes for the retained eigenvalues.
    retained : ndarray (r,) int
        Indices of eigenvalues kept in ``modes`` (``|lambda| > 1e-12``).
    K_bc : ndarray (M, M)
        Bayesian-consistency matrix.
    inducing, chol_zz : ndarray
        Inducing inputs and ``chol(K_ZZ + jitter I)``.
    params : KernelParams
        ``params.noise_variance`` enters the modes, ``params.lifted_noise_variance``
        enters ``U`` and the lifted uncertainty.
    gram_xx : ndarray (M, M)
        ``Psi_ZX Psi_ZX^T``; determines the posterior variance.
    state_weights : ndarray (M, D)
        One-step GP weights ``(G_XX + s_Y^2 I)^-1 Psi_ZX Y``.
    canonical_correlations : ndarray
        Singular values of the half-whitened Koopman matrix.
    """

    U: np.ndarray
    eigenvalues: np.ndarray
    right_eigvecs: np.ndarray
    left_eigvecs: np.ndarray
    modes: np.ndarray
    retained: np.ndarray
    K_bc: np.ndarray
    inducing: np.ndarray
    chol_zz: np.ndarray
    params: KernelParams
    gram_xx: np.ndarray
    state_weights: np.ndarray
    canonical_correlations: np.ndarray
    standardizer: Standardizer
    method: str = "tcca"
    jitter: float = 0.0
    truncation_tol: float = 1e-10
    diagnostics: tuple = field(default_factory=tuple)
    lifted_noise_used: float | None = None

    @property
    def n_features(self) -> int:
        return self.U.shape[0]

    @property
    def dim(self) -> int:
        return self.state_weights.shape[1]

    @property
    def sigma_lifted(self) -> float:
        """Lifted noise variance used in ``U``."""
        if self.lifted_noise_used is not None:
            return self.lifted_noise_used
        return self.params.lifted_noise_variance

    def features(self, Xs) -> np.ndarray:
        """``Psi(x)`` for standardized states, shape (n, M)."""
        Xs = as_points(Xs, self.params.dim, "Xs")
        Kzs = gram(self.inducing, Xs, self.params)
        return linalg.solve_triangular(self.chol_zz, Kzs, lower=True).T

    def eigenfunctions(self, Xs) -> np.ndarray:
        """Eigenfunction values ``phi_i(x)`` at standardized states, shape (n, M)."""
        return self.features(Xs) @ self.right_eigvecs

    @cached_property
    def readout(self) -> np.ndarray:
        """``A0 = W_r V_f`` (M, D): state from lifted coordinates."""
        W = self.right_eigvecs[:, self.retained]
        return _real(W @ self.modes, "readout A0")

    @cached_property
    def one_step_weights(self) -> np.ndarray:
        """``A1 = W_r Lambda_r V_f`` (M, D)."""
        W = self.right_eigvecs[:, self.retained]
        lam = self.eigenvalues[self.retained]
        return _real((W * lam) @ self.modes, "one-step weights A1")

    def information_gain(self, noise_variance: float) -> np.ndarray:
        """``G (G + s^2 I)^-1`` in the preconditioned basis."""
        g, V = self._gram_eig
        return (V * (g / (g + noise_variance))) @ V.T

    @cached_property
    def _gram_eig(self):
        g, V = linalg.eigh(self.gram_xx)
        return np.maximum(g, 0.0), V

    @cached_property
    def lifted_information_gain(self) -> np.ndarray:
        return self.information_gain(self.sigma_lifted)

    def posterior_variance(self, Xs, lifted: bool = True) -> np.ndarray:
        """``kappa_pst(x, x)`` at standardized states.

        ``lifted=True`` uses the lifted noise variance (the lifted
        uncertainty model); ``False`` uses the sensor noise variance, which
        reproduces the sparse GP of the flow map.
        """
        Psi = self.features(Xs)
        B = self.lifted_information_gain if lifted else self.information_gain(self.params.noise_variance)
        return self.params.signal_variance - np.einsum("ni,ij,nj->n", Psi, B, Psi)

    def to_dict(self) -> dict:
        return {
            "schema": "gpkoopman.KoopmanModel",
            "version": SCHEMA_VERSION,
            "method": self.method,
            "params": self.params.to_dict(),
            "jitter": self.jitter,
            "truncation_tol": self.truncation_tol,
            "lifted_noise_used": self.sigma_lifted,
            "standardizer": self.standardizer.to_dict(),
            "U": _encode(self.U),
            "eigenvalues": _encode(self.eigenvalues),
            "right_eigvecs": _encode(self.right_eigvecs),
            "left_eigvecs": _encode(self.left_eigvecs),
            "modes": _encode(self.modes),
            "retained": [int(i) for i in self.retained],
            "K_bc": _encode(self.K_bc),
            "inducing": _encode(self.inducing),
            "chol_zz": _encode(self.chol_zz),
            "gram_xx": _encode(self.gram_xx),
            "state_weights": _encode(self.state_weights),
            "canonical_correlations": _encode(self.canonical_correlations),
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KoopmanModel":
        if d.get("schema") != "gpkoopman.KoopmanModel":
            raise ValueError("not a KoopmanModel document")
        if d.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported model schema version {d.get('version')}")
        arrays = {
            k: _decode(d[k])
            for k in (
                "U", "eigenvalues", "right_eigvecs", "left_eigvecs", "modes", "K_bc",
                "inducing", "chol_zz", "gram_xx", "state_weights", "canonical_correlations",
            )
        }
        return cls(
            params=KernelParams.from_dict(d["params"]),
            standardizer=Standardizer.from_dict(d["standardizer"]),
            retained=np.asarray(d["retained"], dtype=int),
            method=d["method"],
            jitter=d["jitter"],
            truncation_tol=d["truncation_tol"],
            lifted_noise_used=d["lifted_noise_used"],
            diagnostics=tuple(d["diagnostics"]),
            **arrays,
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "KoopmanModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _encode(a) -> dict:
    """Row-major array encoding; complex entries become ``[re, im]`` pairs."""
    a = np.asarray(a)
    if np.iscomplexobj(a):
        data = np.stack([a.real, a.imag], axis=-1).reshape(-1, 2).tolist()
        return {"shape": list(a.shape), "complex": True, "data": data}
    return {"shape": list(a.shape), "complex": False, "data": a.reshape(-1).astype(float).tolist()}


def _decode(d) -> np.ndarray:
    data = np.asarray(d["data"], dtype=float)
    if d["complex"]:
        out = np.empty(data.shape[0] if data.size else 0, dtype=complex)
        if data.size:
            # assigning parts keeps signed zeros that re + 1j * im would lose
            out.real, out.imag = data[:, 0], data[:, 1]
        data = out
    return data.reshape(d["shape"])


def _real(a, what: str, tol: float = 1e-8) -> np.ndarray:
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    resid = float(np.max(np.abs(a.imag))) if a.size else 0.0
    if resid > tol * scale:
        raise ValueError(f"{what} has imaginary residue {resid:.3e}")
    return np.ascontiguousarray(a.real)


# ---------------------------------------------------------------------------


def _preconditioned(data: SnapshotSet, Z, params: KernelParams):
    Z = as_points(Z, params.dim, "Z")
    L, jitter = inducing_cholesky(Z, params)
    Psi_x = linalg.solve_triangular(L, gram(Z, data.X, params), lower=True)
    Psi_y = linalg.solve_triangular(L, gram(Z, data.Y, params), lower=True)
    return Z, L, jitter, Psi_x, Psi_y


def koopman_direct(data: SnapshotSet, Z, params: KernelParams) -> np.ndarray:
    """Koopman matrix ``(K_ZX K_XZ + s^2 K_ZZ)^-1 K_ZX K_YZ`` in the k_Z basis.

    ``s^2`` is the lifted noise variance and ``K_ZZ`` includes the jitter.
    """
    Z = as_points(Z, params.dim, "Z")
    Kzx = gram(Z, data.X, params)
    Kzy = gram(Z, data.Y, params)
    Kzz = gram(Z, Z, params) + params.inducing_jitter * np.eye(len(Z))
    C = Kzx @ Kzx.T + params.lifted_noise_variance * Kzz
    return linalg.cho_solve(linalg.cho_factor(C, lower=True), Kzx @ Kzy.T)


def _truncated_svd(A, tol: float, what: str):
    Mx, S, _ = linalg.svd(A, full_matrices=False)
    if S.size == 0 or S[0] == 0:
        raise RankCollapseError(
            f"{what} is identically zero; use more inducing points or smaller lengthscales"
        )
    keep = S > tol * S[0] if tol > 0 else S > 0
    if not np.any(keep):
        raise RankCollapseError(
            f"all singular values of {what} were truncated; use more inducing "
            "points or smaller lengthscales"
        )
    return Mx[:, keep], S[keep]


def fit_tcca(data: SnapshotSet, Z, params: KernelParams, truncation_tol: float = 1e-10,
             lifted_noise_variance: float | None = None) -> KoopmanModel:
    """Fit the GP-DMD model with time-lagged canonical correlation analysis.

    The lifted noise variance regularizes both whitening steps and thus the
    Koopman matrix; the sensor noise variance regularizes the projected
    modes.  ``lifted_noise_variance`` overrides ``params`` and may be zero,
    which leaves the Koopman matrix regularized by truncation only.
    """
    s2 = params.lifted_noise_variance if lifted_noise_variance is None else float(lifted_noise_variance)
    if not s2 >= 0:
        raise ValueError("lifted_noise_variance must be nonnegative")
    return _fit(data, Z, params, truncation_tol, s2, params.noise_variance, method="tcca")


def fit_exact_edmd(data: SnapshotSet, Z, params: KernelParams, truncation_tol: float = 1e-10) -> KoopmanModel:
    """Kernel EDMD baseline: pseudo-inverses regularized by truncation only."""
    return _fit(data, Z, params, truncation_tol, 0.0, 0.0, method="edmd")


def _fit(data, Z, params, truncation_tol, s2_lift, s2_state, method):
    if data.dim != params.dim:
        raise ValueError(f"data dimension {data.dim} does not match kernel dimension {params.dim}")
    Z, L, jitter, Psi_x, Psi_y = _preconditioned(data, Z, params)
    G_xx = Psi_x @ Psi_x.T
    G_xy = Psi_x @ Psi_y.T

    Mx, Sx = _truncated_svd(Psi_x, truncation_tol, "Psi_ZX")
    My, Sy = _truncated_svd(Psi_y, truncation_tol, "Psi_ZY")
    Sx_t = np.sqrt(Sx**2 + s2_lift)
    Sy_t = np.sqrt(Sy**2 + s2_lift)
    Gxx_isqrt = (Mx / Sx_t) @ Mx.T
    Gyy_isqrt = (My / Sy_t) @ My.T

    U_half = Gxx_isqrt @ G_xy @ Gyy_isqrt
    Wx_h, P, Wy_hT = linalg.svd(U_half)
    Wx = Gxx_isqrt @ Wx_h
    Wy = Gyy_isqrt @ Wy_hT.T
    Gyy_t = (My * Sy_t**2) @ My.T
    U = (Wx * P) @ Wy.T @ Gyy_t
    rank = min(Sx.size, Sy.size)
    P = P[:rank]

    diagnostics = []
    lam, W, V_kappa, diag = eigendecompose(U)
    diagnostics += diag

    # state readout regularized with the sensor noise
    Sx_s = np.sqrt(Sx**2 + s2_state)
    Gxx_inv_state = (Mx / Sx_s**2) @ Mx.T
    state_weights = Gxx_inv_state @ Psi_x @ data.Y
    V_f, retained, diag = projected_modes(lam, V_kappa, state_weights)
    diagnostics += diag
    K_bc = consistency_matrix(V_kappa[retained], V_f)

    standardizer = data.standardizer or Standardizer.identity(data.dim)
    return KoopmanModel(
        U=U, eigenvalues=lam, right_eigvecs=W, left_eigvecs=V_kappa, modes=V_f,
        retained=retained, K_bc=K_bc, inducing=Z, chol_zz=L,
        params=params.replace(inducing_jitter=jitter) if jitter != params.inducing_jitter else params,
        gram_xx=G_xx, state_weights=state_weights, canonical_correlations=P,
        standardizer=standardizer, method=method, jitter=jitter,
        truncation_tol=truncation_tol, diagnostics=tuple(diagnostics),
        lifted_noise_used=float(s2_lift),
    )


def eigendecompose(U):
    """Eigen-triplets of U sorted by modulus with conjugate pairs adjacent.

    Returns
    -------
    eigenvalues, W, V_kappa, diagnostics
        ``U = W diag(eigenvalues) V_kappa`` with ``V_kappa = W^-1``.
    """
    U = np.asarray(U, dtype=float)
    if U.ndim != 2 or U.shape[0] != U.shape[1]:
        raise ValueError("U must be square")
    lam, Wl, W = linalg.eig(U, left=True, right=True)
    n = lam.size
    # one representative per real eigenvalue / conjugate pair
    imag_tol = 1e-12 * max(1.0, float(np.max(np.abs(lam))) if n else 1.0)
    reps = [i for i in range(n) if lam[i].imag > imag_tol or abs(lam[i].imag) <= imag_tol]
    reps.sort(key=lambda i: (-abs(lam[i]), -lam[i].real, -lam[i].imag))
    n_real = sum(1 for i in reps if abs(lam[i].imag) <= imag_tol)
    if n_real + 2 * (len(reps) - n_real) != n:
        raise ValueError("eigenvalues of a real matrix did not pair into conjugates")
    vals, right, left = [], [], []
    for i in reps:
        if abs(lam[i].imag) <= imag_tol:
            vals.append(complex(lam[i].real, 0.0))
            right.append(W[:, i].real.astype(complex))
            left.append(Wl[:, i].real.astype(complex))
        else:
            vals += [lam[i], np.conj(lam[i])]
            right += [W[:, i], np.conj(W[:, i])]
            left += [Wl[:, i], np.conj(Wl[:, i])]
    lam = np.array(vals, dtype=complex)
    W = np.column_stack(right)
    diagnostics = []
    cond = np.linalg.cond(W)
    if np.isfinite(cond) and cond <= EIGVEC_CONDITION_LIMIT:
        V_kappa = linalg.solve(W, np.eye(n, dtype=complex))
    else:
        # W is numerically singular; normalized left eigenvectors stay
        # biorthogonal to W wherever the eigenvalues are separated
        msg = f"eigenvector matrix is ill-conditioned (cond {cond:.3e}); eigenvalues may be near-degenerate"
        log.warning(msg)
        diagnostics.append(msg)
        Vl = np.column_stack(left).conj().T
        scale = np.einsum("ij,ji->i", Vl, W)
        scale[np.abs(scale) == 0] = 1.0
        V_kappa = Vl / scale[:, None]
    return lam, W, V_kappa, diagnostics


def projected_modes(eigenvalues, V_kappa, state_weights):
    """Full-state modes ``V_f = Lambda^-1 V_kappa A`` for retained eigenvalues.

    ``state_weights`` is the one-step GP weight matrix ``A`` (M, D).  Modes
    whose eigenvalue modulus is at most 1e-12 are dropped.

    Returns
    -------
    V_f : ndarray (r, D) complex
    retained : ndarray (r,) int
    diagnostics : list of str
    """
    lam = np.asarray(eigenvalues)
    retained = np.flatnonzero(np.abs(lam) > DROP_EIGENVALUE_BELOW)
    diagnostics = []
    if retained.size == 0:
        raise RankCollapseError("all Koopman eigenvalues are numerically zero")
    if retained.size < lam.size:
        msg = f"dropped {lam.size - retained.size} mode(s) with |lambda| <= {DROP_EIGENVALUE_BELOW:g}"
        log.info(msg)
        diagnostics.append(msg)
    V_f = (V_kappa[retained] @ state_weights) / lam[retained, None]
    return V_f, retained, diagnostics


def consistency_matrix(V_kappa, V_f) -> np.ndarray:
    """``K_bc = V_kappa^* (V_f V_f^*)^+ V_kappa`` as a real symmetric matrix."""
    V_kappa = np.asarray(V_kappa)
    V_f = np.asarray(V_f)
    VV = V_f @ V_f.conj().T
    if not np.any(np.abs(VV) > 0):
        raise ValueError("V_f V_f^* is numerically zero")
    VV = 0.5 * (VV + VV.conj().T)
    K = V_kappa.conj().T @ np.linalg.pinv(VV, rcond=1e-10, hermitian=True) @ V_kappa
    K = 0.5 * (K + K.conj().T)
    return _real(K, "K_bc")


def select_lifted_noise(data: SnapshotSet, Z, params: KernelParams, factors=None) -> float:
    """Lifted noise variance maximizing the VFE of the lifted targets.

    The rows of ``Psi_ZY`` are regressed on X with the shared kernel and
    inducing set over a log grid of noise standard deviations
    ``factors * sqrt(noise_variance)``.
    """
    if factors is None:
        factors = np.logspace(-4, 1, 51)
    Z, L, _, _, Psi_y = _preconditioned(data, Z, params)
    grid = (np.asarray(factors) ** 2) * params.noise_variance
    scores = elbo_noise_profile(data.X, Psi_y.T, Z, params, grid)
    return float(grid[int(np.argmax(scores))])
