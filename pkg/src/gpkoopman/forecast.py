"""Multi-step forecasts with propagated uncertainty.

Public functions take and return states in raw (de-standardized) units.
Covariances of the lifted coordinates ``Psi(x)`` are unitless; state
covariances are returned in raw units.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .gp import SparseGP
from .kernels import gram_state_derivatives, kernel_state_hessians
from .koopman import KoopmanModel

log = logging.getLogger(__name__)

BLOW_UP_TRACE = 1e12
CLIP_REL_TOL = 1e-8


class CovarianceBlowUpError(FloatingPointError):
    """Propagated covariance trace exceeded the blow-up limit."""

    def __init__(self, step: int, trace: float):
        super().__init__(f"lifted covariance blew up at step {step} (trace {trace:.3e})")
        self.step = step


@dataclass
class ForecastResult:
    """Forecast for steps ``0..horizon``; row 0 is the conditioning state."""

    means: np.ndarray
    lifted_covs: np.ndarray
    state_covs: np.ndarray
    reprojection_steps: list
    horizon: int
    dt: float | None = None
    clip_events: int = 0

    @property
    def variances(self) -> np.ndarray:
        return np.einsum("kdd->kd", self.state_covs)

    def to_csv(self, path, z: float | None = None) -> None:
        """Write step, means, variances, optional interval bounds and markers."""
        D = self.means.shape[1]
        var = self.variances
        header = ["step"] + [f"mean_{d + 1}" for d in range(D)] + [f"var_{d + 1}" for d in range(D)]
        if z is not None:
            header += [f"lower_{d + 1}" for d in range(D)] + [f"upper_{d + 1}" for d in range(D)]
        header.append("reprojected")
        marks = set(self.reprojection_steps)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k in range(self.horizon + 1):
                row = [str(k)] + [fmt(v) for v in self.means[k]] + [fmt(v) for v in var[k]]
                if z is not None:
                    sd = np.sqrt(var[k])
                    row += [fmt(v) for v in self.means[k] - z * sd] + [fmt(v) for v in self.means[k] + z * sd]
                row.append("1" if k in marks else "0")
                w.writerow(row)

    def to_json(self, path) -> None:
        doc = {
            "horizon": self.horizon,
            "dt": self.dt,
            "reprojection_steps": [int(s) for s in self.reprojection_steps],
            "clip_events": self.clip_events,
            "means": self.means.tolist(),
            "state_covs": self.state_covs.tolist(),
            "lifted_covs": self.lifted_covs.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)
            fh.write("\n")


def fmt(v: float) -> str:
    """Float formatting with 17 significant digits."""
    return format(float(v), ".17g")


@dataclass
class StochasticRollout:
    """Ensemble of lifted trajectories ``Psi(X_k)`` driven by shocks ``omega_k``.

    ``samples`` has shape (n, k + 1, M) with row 0 the deterministic lift of
    ``x0``; ``shocks`` has shape (n, k, M).
    """

    samples: np.ndarray
    shocks: np.ndarray
    seed: int
    mean_path: np.ndarray = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# helpers in standardized units


def _std(model: KoopmanModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != model.dim:
        raise ValueError(f"state has dimension {x.size}, model expects {model.dim}")
    return model.standardizer.transform(x)


def _spectral_path(model: KoopmanModel, xs0, k: int) -> np.ndarray:
    """Standardized means for steps 0..k by powers of the eigenvalues."""
    W = model.right_eigvecs[:, model.retained]
    lam = model.eigenvalues[model.retained]
    phi0 = model.features(xs0)[0] @ W
    steps = np.arange(1, k + 1)[:, None]
    coeff = lam[None, :] ** steps * phi0[None, :]
    path = np.empty((k + 1, model.dim))
    path[0] = xs0
    if k:
        path[1:] = (coeff @ model.modes).real
    return path


def _psd(S):
    """Symmetrize and clip negative eigenvalues; returns (matrix, clipped?)."""
    S = 0.5 * (S + S.T)
    w, V = linalg.eigh(S)
    if w.size == 0 or w[0] >= 0:
        return S, False
    tr = max(float(np.sum(np.abs(w))), np.finfo(float).tiny)
    clipped = bool(w[0] < -CLIP_REL_TOL * tr)
    return (V * np.maximum(w, 0.0)) @ V.T, clipped


def _lifted_variance(model: KoopmanModel, xs) -> float:
    return max(float(model.posterior_variance(xs[None], lifted=True)[0]), 0.0)


def lifted_variance_hessian(model: KoopmanModel, xs, method: str = "analytic") -> np.ndarray:
    """Hessian of ``kappa_pst(x, x)`` (lifted noise) at a standardized state.

    ``kappa_pst(x, x) = s_f^2 - Psi^T B Psi`` so its Hessian is
    ``-2 (J^T B J + sum_m (B Psi)_m d2 Psi_m)`` with ``J = dPsi/dx``.
    ``method="fd"`` uses central differences with step
    ``1e-4 * min(lengthscale)``.
    """
    xs = np.asarray(xs, dtype=float).reshape(-1)
    if method == "fd":
        h = 1e-4 * float(np.min(model.params.lengthscales))
        D = xs.size
        H = np.empty((D, D))
        f = lambda z: float(model.posterior_variance(z[None], lifted=True)[0])  # noqa: E731
        for i in range(D):
            for j in range(D):
                ei = np.eye(D)[i] * h
                ej = np.eye(D)[j] * h
                H[i, j] = (f(xs + ei + ej) - f(xs + ei - ej) - f(xs - ei + ej) + f(xs - ei - ej)) / (4 * h * h)
        return 0.5 * (H + H.T)
    if method != "analytic":
        raise ValueError(f"unknown Hessian method {method!r}")
    p, L, B = model.params, model.chol_zz, model.lifted_information_gain
    Z = model.inducing
    psi = model.features(xs[None])[0]
    dK = gram_state_derivatives(xs[None], Z, p)[:, 0, :]  # (D, M)
    J = linalg.solve_triangular(L, dK.T, lower=True)  # (M, D)
    c = linalg.solve_triangular(L, B @ psi, lower=True, trans="T")
    Hk = kernel_state_hessians(xs, Z, p)  # (M, D, D)
    H = -2.0 * (J.T @ B @ J + np.einsum("m,mij->ij", c, Hk))
    return 0.5 * (H + H.T)


def _curvature_std(model, xs, K_std, method="analytic"):
    if not np.any(K_std):
        return np.zeros_like(model.K_bc)
    H = lifted_variance_hessian(model, xs, method)
    return 0.5 * float(np.sum(H * K_std)) * model.K_bc


def _state_cov_std(model, Xi):
    A0 = model.readout
    s2 = model.params.noise_variance
    K = A0.T @ (Xi + s2 * model.K_bc) @ A0 - s2 * np.eye(model.dim)
    return _psd(K)


# ---------------------------------------------------------------------------


def predict_mean(model: KoopmanModel, x0, k: int) -> np.ndarray:
    """Means ``x_1..x_k`` of the spectral forecast, shape (k, D)."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    path = _spectral_path(model, _std(model, x0), k)
    return model.standardizer.inverse_transform(path[1:])


def one_step_lifted_cov(model: KoopmanModel, x) -> np.ndarray:
    """``Xi^1(x) = kappa_pst(x, x) K_bc`` with the lifted noise variance."""
    return _lifted_variance(model, _std(model, x)) * model.K_bc


def curvature_correction(model: KoopmanModel, x, K, method: str = "analytic") -> np.ndarray:
    """``0.5 Tr(Hess kappa_pst(x, x) K) K_bc`` for a raw-unit state covariance K."""
    s = model.standardizer.scale
    K_std = np.asarray(K, dtype=float) / np.multiply.outer(s, s)
    return _curvature_std(model, _std(model, x), K_std, method)


def covariance_recursion(U, shocks) -> np.ndarray:
    """``Xi^k = S_k + U^T Xi^{k-1} U`` from ``Xi^0 = 0``; returns steps 0..k."""
    U = np.asarray(U, dtype=float)
    out = np.zeros((len(shocks) + 1,) + U.shape)
    for j, S in enumerate(shocks, start=1):
        out[j] = S + U.T @ out[j - 1] @ U
    return out


def _propagate(model, xs_path, k, curvature, step_offset=0):
    """Lifted and standardized state covariances from a realized base."""
    M = model.n_features
    U = model.U
    Xi = np.zeros((k + 1, M, M))
    K = np.zeros((k + 1, model.dim, model.dim))
    clips = 0
    for j in range(1, k + 1):
        S = _lifted_variance(model, xs_path[j - 1]) * model.K_bc
        if curvature:
            S = S + _curvature_std(model, xs_path[j - 1], K[j - 1])
        Xi[j], c1 = _psd(S + U.T @ Xi[j - 1] @ U)
        tr = float(np.trace(Xi[j]))
        if not np.isfinite(tr) or tr > BLOW_UP_TRACE:
            raise CovarianceBlowUpError(step_offset + j, tr)
        K[j], c2 = _state_cov_std(model, Xi[j])
        clips += c1 + c2
    return Xi, K, clips


def propagate_covariance(model: KoopmanModel, x0, k: int, curvature: bool = True):
    """Lifted covariances ``Xi^0..Xi^k`` and raw-unit state covariances ``K^0..K^k``."""
    xs0 = _std(model, x0)
    path = _spectral_path(model, xs0, k)
    Xi, K, clips = _propagate(model, path, k, curvature)
    if clips:
        log.info("PSD projection clipped %d covariance(s)", clips)
    return Xi, model.standardizer.inverse_covariance(K)


def eigenfunction_forecast(model: KoopmanModel, x0, k: int, curvature: bool = True):
    """Eigenfunctions along the mean forecast and their covariances.

    Returns ``phi(x_j)`` at the spectral means (shape (k + 1, M)) and the
    Hermitian covariances ``W^* Xi^j W`` (shape (k + 1, M, M)) for steps 0..k.
    """
    path = _spectral_path(model, _std(model, x0), k)
    means = model.eigenfunctions(path)
    Xi, _ = propagate_covariance(model, x0, k, curvature)
    W = model.right_eigvecs
    covs = np.einsum("ai,kab,bj->kij", W.conj(), Xi, W)
    covs = 0.5 * (covs + np.conj(np.swapaxes(covs, 1, 2)))
    return means, covs


def forecast_with_reprojection(model: KoopmanModel, x0, horizon: int, tol: float | None = None,
                               curvature: bool = True, dt: float | None = None) -> ForecastResult:
    """Spectral forecast that relifts the mean when uncertainty grows too large.

    Whenever ``||diag(K^k)||_2`` (standardized units) exceeds ``tol`` the
    current mean is treated as a noise-free measurement: it is relifted and
    all covariances restart from zero.  ``tol`` defaults to ``0.5 sqrt(D)``.
    """
    if tol is None:
        tol = 0.5 * np.sqrt(model.dim)
    if not tol > 0:
        raise ValueError("tol must be positive")
    D, M = model.dim, model.n_features
    means = np.empty((horizon + 1, D))
    Xi_all = np.zeros((horizon + 1, M, M))
    K_all = np.zeros((horizon + 1, D, D))
    means[0] = _std(model, x0)
    steps, clips = [], 0
    base, base_step = means[0], 0
    while base_step < horizon:
        # propagate from the current base until the trigger fires
        n = horizon - base_step
        path = _spectral_path(model, base, n)
        Xi = np.zeros((M, M))
        K = np.zeros((D, D))
        for j in range(1, n + 1):
            S = _lifted_variance(model, path[j - 1]) * model.K_bc
            if curvature:
                S = S + _curvature_std(model, path[j - 1], K)
            Xi, c1 = _psd(S + model.U.T @ Xi @ model.U)
            tr = float(np.trace(Xi))
            if not np.isfinite(tr) or tr > BLOW_UP_TRACE:
                raise CovarianceBlowUpError(base_step + j, tr)
            K, c2 = _state_cov_std(model, Xi)
            clips += c1 + c2
            g = base_step + j
            means[g], Xi_all[g], K_all[g] = path[j], Xi, K
            if np.linalg.norm(np.diag(K)) > tol:
                steps.append(g)
                base, base_step = path[j], g
                break
        else:
            base_step = horizon
    return ForecastResult(
        means=model.standardizer.inverse_transform(means),
        lifted_covs=Xi_all,
        state_covs=model.standardizer.inverse_covariance(K_all),
        reprojection_steps=steps,
        horizon=horizon,
        dt=dt,
        clip_events=clips,
    )


def gp_rollout_baseline(gp_models, x0, horizon: int, standardizer=None) -> np.ndarray:
    """Iterate the sparse-GP posterior mean of the flow map, shape (horizon, D).

    ``gp_models`` is either one multi-output SparseGP or a list of
    single-channel ones sharing the input space.  With a standardizer the
    models are assumed to be trained in standardized units.
    """
    models = [gp_models] if isinstance(gp_models, SparseGP) else list(gp_models)
    x = np.asarray(x0, dtype=float).reshape(-1)
    if standardizer is not None:
        x = standardizer.transform(x)
    out = np.empty((horizon, x.size))
    for k in range(horizon):
        x = np.concatenate([m.predict(x[None])[0][0] for m in models])
        out[k] = x
    return standardizer.inverse_transform(out) if standardizer is not None else out


def simulate_lifted_sde(model: KoopmanModel, x0, k: int, n_samples: int, seed: int = 0,
                        keep_shocks: bool = True) -> StochasticRollout:
    """Monte-Carlo rollouts of ``Psi_j = U^T Psi_{j-1} + L(x_{j-1}) omega_j``.

    ``L L^T = Xi^1`` is evaluated along the spectral mean path.  ``K_bc`` has
    rank at most D, so its symmetric square root replaces a Cholesky factor.
    """
    xs0 = _std(model, x0)
    path = _spectral_path(model, xs0, k)
    w, V = linalg.eigh(model.K_bc)
    F_bc = V * np.sqrt(np.maximum(w, 0.0))
    M = model.n_features
    rng = np.random.Generator(np.random.Philox(seed))
    shocks = rng.standard_normal((n_samples, k, M))
    samples = np.empty((n_samples, k + 1, M))
    samples[:, 0] = model.features(xs0[None])[0]
    for j in range(1, k + 1):
        F = np.sqrt(_lifted_variance(model, path[j - 1])) * F_bc
        samples[:, j] = samples[:, j - 1] @ model.U + shocks[:, j - 1] @ F.T
    return StochasticRollout(
        samples=samples,
        shocks=shocks if keep_shocks else np.empty((0, k, M)),
        seed=seed,
        mean_path=model.standardizer.inverse_transform(path),
    )
