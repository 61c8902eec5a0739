"""Dictionary and hyperparameter selection.

The pipeline alternates greedy inducing-point selection (an approximate
linear dependence screen followed by active-learning-Cohn refinement) with
quasi-Newton optimization of either the summed VFE or the VAMP-2 score.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .gp import elbo, elbo_and_gradient, inducing_cholesky
from .kernels import KernelParams, as_points, gram
from .koopman import KoopmanModel, SnapshotSet, fit_tcca
from .metrics import multi_horizon_eval, spectral_forecaster

log = logging.getLogger(__name__)

LOG_BOUNDS = (np.log(1e-8), np.log(1e8))


@dataclass
class SelectionConfig:
    """Settings of the layered selection pipeline.

    ``ald_threshold`` is relative to the current signal variance, so the
    absolute ALD threshold tracks the hyperparameters.  ``alc_grid``
    defaults to the training inputs.
    """

    ald_threshold: float = 1e-3
    alc_grid: np.ndarray | None = None
    batch_size: int = 10
    max_dictionary: int = 100
    max_iter: int = 200
    gtol: float = 1e-5
    objective: str = "vfe"
    max_outer: int = 50
    optimize_inducing: bool = False
    truncation_tol: float = 1e-10

    def __post_init__(self):
        if self.objective not in ("vfe", "vamp2"):
            raise ValueError(f"objective must be 'vfe' or 'vamp2', got {self.objective!r}")
        if not 1 <= self.batch_size <= self.max_dictionary:
            raise ValueError("need 1 <= batch_size <= max_dictionary")
        if not self.ald_threshold > 0:
            raise ValueError("ald_threshold must be positive")

    def threshold(self, params: KernelParams) -> float:
        return self.ald_threshold * params.signal_variance


@dataclass
class OptimizationResult:
    params: KernelParams
    inducing: np.ndarray
    objective: float
    initial_objective: float
    trace: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    rejected_steps: int = 0
    message: str = ""


@dataclass
class PipelineResult:
    params: KernelParams
    inducing: np.ndarray
    model: KoopmanModel
    objective_trace: list
    elbo_trace: list
    dictionary_sizes: list


# ---------------------------------------------------------------------------


def ald_screen(X, params: KernelParams, threshold: float | None = None, start=None) -> np.ndarray:
    """Greedy approximate-linear-dependence pass over the rows of X.

    A point is admitted when its squared RKHS residual against the current
    dictionary (``start`` plus earlier admissions) exceeds ``threshold``;
    an empty dictionary always admits the first point.  Returns the admitted row indices of X.
    """
    X = as_points(X, params.dim, "X")
    if threshold is None:
        threshold = 1e-3 * params.signal_variance
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    sf2 = params.signal_variance
    if start is not None and np.asarray(start).size:
        Z = as_points(start, params.dim, "start")
        L, _ = inducing_cholesky(Z, params)
        rows = list(Z)
    else:
        L = np.zeros((0, 0))
        rows = []
    cap = len(X) + len(rows)
    Lbuf = np.zeros((cap, cap))
    m = L.shape[0]
    Lbuf[:m, :m] = L
    admitted = []
    for i, x in enumerate(X):
        if m:
            k = gram(np.asarray(rows), x[None], params)[:, 0]
            a = linalg.solve_triangular(Lbuf[:m, :m], k, lower=True)
            delta = sf2 - a @ a
        else:
            a = np.zeros(0)
            delta = sf2
        if delta > threshold or m == 0:
            Lbuf[m, :m] = a
            Lbuf[m, m] = np.sqrt(delta)
            m += 1
            rows.append(x)
            admitted.append(i)
    return np.asarray(admitted, dtype=int)


def alc_scores(X, Z, candidates, params: KernelParams, grid=None, noise_variance=None) -> np.ndarray:
    """Summed posterior-variance reduction over ``grid`` from adding each candidate.

    The VFE posterior variance in the preconditioned basis is
    ``s_f^2 - psi^T psi + s^2 psi^T (G + s^2 I)^-1 psi``; a candidate adds
    one orthogonalized feature, so its effect follows from a bordered
    inverse without refitting.
    """
    X = as_points(X, params.dim, "X")
    Z = as_points(Z, params.dim, "Z")
    C = as_points(candidates, params.dim, "candidates")
    grid = X if grid is None else as_points(grid, params.dim, "grid")
    s2 = params.noise_variance if noise_variance is None else noise_variance
    L, _ = inducing_cholesky(Z, params)
    Psi_x = linalg.solve_triangular(L, gram(Z, X, params), lower=True)
    Psi_g = linalg.solve_triangular(L, gram(Z, grid, params), lower=True)
    A_c = linalg.solve_triangular(L, gram(Z, C, params), lower=True)
    delta = params.signal_variance - np.sum(A_c * A_c, axis=0)
    root = np.sqrt(np.maximum(delta, np.finfo(float).tiny))
    E_x = (gram(C, X, params) - A_c.T @ Psi_x) / root[:, None]  # new feature on X
    E_g = (gram(C, grid, params) - A_c.T @ Psi_g) / root[:, None]
    LB = linalg.cholesky(Psi_x @ Psi_x.T + s2 * np.eye(len(Z)), lower=True)
    b = Psi_x @ E_x.T  # (M, C)
    Binv_b = linalg.cho_solve((LB, True), b)
    schur = np.sum(E_x * E_x, axis=1) + s2 - np.sum(b * Binv_b, axis=0)
    resid = E_g - Binv_b.T @ Psi_g
    red = E_g**2 - s2 * resid**2 / schur[:, None]
    return np.sum(red, axis=1)


def alc_refine(X, Z, candidate_idx, params: KernelParams, config: SelectionConfig, targets=None):
    """Greedily add up to ``batch_size`` candidates with the largest ALC score.

    ``candidate_idx`` indexes rows of X.  Candidates that become linearly
    dependent (ALD residual below threshold) on the growing dictionary are
    discarded.  ``targets`` is accepted for interface symmetry; the score
    depends on inputs only.  Returns ``(Z_new, chosen_idx)``.
    """
    X = as_points(X, params.dim, "X")
    cand = [int(i) for i in candidate_idx]
    if not cand:
        raise ValueError("no candidates remaining")
    thr = config.threshold(params)
    Z = np.asarray(Z, dtype=float).reshape(-1, params.dim)
    chosen = []
    room = config.max_dictionary - len(Z)
    for _ in range(min(config.batch_size, room)):
        if not cand:
            break
        if len(Z) == 0:
            pick = cand[0]
        else:
            L, _ = inducing_cholesky(Z, params)
            A = linalg.solve_triangular(L, gram(Z, X[cand], params), lower=True)
            resid = params.signal_variance - np.sum(A * A, axis=0)
            cand = [c for c, r in zip(cand, resid) if r > thr]
            if not cand:
                break
            scores = alc_scores(X, Z, X[cand], params, config.alc_grid)
            pick = cand[int(np.argmax(scores))]
        chosen.append(pick)
        cand.remove(pick)
        Z = np.vstack([Z, X[pick]])
    return Z, np.asarray(chosen, dtype=int)


# ---------------------------------------------------------------------------


def vamp2_score(model: KoopmanModel) -> float:
    """Sum of squared canonical correlations."""
    return float(np.sum(np.asarray(model.canonical_correlations) ** 2))


def _vamp2_of(data, Z, params, tol):
    try:
        return vamp2_score(fit_tcca(data, Z, params, tol))
    except (np.linalg.LinAlgError, ValueError, FloatingPointError):
        return -np.inf


def optimize_hyperparameters(data: SnapshotSet, Z, init: KernelParams,
                             config: SelectionConfig | None = None) -> OptimizationResult:
    """Maximize the summed VFE (or VAMP-2) with L-BFGS-B in log space.

    The VFE run optimizes all log-hyperparameters (and optionally the
    inducing coordinates) with analytic gradients.  VAMP-2 grows without
    bound as the noise shrinks, so that run optimizes log lengthscales only
    with finite-difference gradients.  The returned objective is never below
    the initial one.
    """
    config = config or SelectionConfig()
    Z0 = as_points(Z, init.dim, "Z")
    X, Y = data.X, data.Y
    D, M = init.dim, len(Z0)
    vfe = config.objective == "vfe"
    joint = vfe and config.optimize_inducing

    if vfe:
        theta0 = init.log_hypers()
        if joint:
            theta0 = np.concatenate([theta0, Z0.ravel()])
    else:
        theta0 = np.log(init.lengthscales)

    def unpack(theta):
        if vfe:
            p = init.with_log_hypers(theta[: D + 2])
            Zt = theta[D + 2:].reshape(M, D) if joint else Z0
            return p, Zt
        return init.replace(lengthscales=np.exp(theta)), Z0

    cache = {}
    rejected = [0]

    def fun(theta):
        key = theta.tobytes()
        if key in cache:
            return cache[key]
        try:
            p, Zt = unpack(theta)
            if vfe:
                v, g, gz = elbo_and_gradient(X, Y, Zt, p, need_grad=True, wrt_inducing=joint)
                grad = -g if not joint else -np.concatenate([g, gz.ravel()])
                out = (-v, grad)
            else:
                out = (-_vamp2_of(data, Zt, p, config.truncation_tol), None)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError):
            out = (np.inf, None)
        if not np.isfinite(out[0]):
            rejected[0] += 1
            out = (1e300, np.zeros_like(theta))
        cache[key] = out
        return out

    f0 = -fun(theta0)[0]
    trace = [f0]

    def callback(xk):
        trace.append(-fun(xk)[0])

    n_hyper = D + 2 if vfe else D
    bounds = [LOG_BOUNDS] * n_hyper + ([(None, None)] * (M * D) if joint else [])
    opts = {"maxiter": config.max_iter, "gtol": config.gtol}
    if vfe:
        res = optimize.minimize(lambda t: fun(t)[0], theta0, jac=lambda t: fun(t)[1],
                                method="L-BFGS-B", bounds=bounds, callback=callback, options=opts)
    else:
        opts["eps"] = 1e-6
        res = optimize.minimize(lambda t: fun(t)[0], theta0, method="L-BFGS-B",
                                bounds=bounds, callback=callback, options=opts)
    f1 = -fun(res.x)[0]
    if f1 >= f0:
        p, Zt = unpack(res.x)
        best = f1
    else:
        p, Zt, best = init, Z0, f0
    if rejected[0]:
        log.info("rejected %d non-finite objective evaluations", rejected[0])
    return OptimizationResult(
        params=p, inducing=np.array(Zt), objective=best, initial_objective=f0,
        trace=trace, n_iter=int(res.nit), converged=bool(res.success),
        rejected_steps=rejected[0], message=str(res.message),
    )


def default_init(dim: int) -> KernelParams:
    """Starting point for standardized data.

    A generous noise variance keeps the first VFE fit, which sees only one
    small batch of inducing points, from explaining the data as pure noise.
    """
    return KernelParams(np.full(dim, 2.0), signal_variance=1.0, noise_variance=0.1)


def pipeline(data: SnapshotSet, config: SelectionConfig | None = None,
             init: KernelParams | None = None) -> PipelineResult:
    """Alternate ALD screening, ALC batches and hyperparameter optimization.

    Stops when ALD admits no new candidate, the dictionary reaches
    ``max_dictionary`` or ``max_outer`` rounds have run.
    """
    config = config or SelectionConfig()
    X = data.X
    params = init or default_init(data.dim)
    Z = np.zeros((0, data.dim))
    objective_trace, elbo_trace, sizes = [], [], []
    for _ in range(config.max_outer):
        if len(Z) >= config.max_dictionary:
            break
        cand = ald_screen(X, params, config.threshold(params), start=Z if len(Z) else None)
        if cand.size == 0:
            break
        Z, chosen = alc_refine(X, Z, cand, params, config)
        if chosen.size == 0:
            break
        opt = optimize_hyperparameters(data, Z, params, config)
        params, Z = opt.params, opt.inducing
        objective_trace.append(opt.objective)
        elbo_trace.append(opt.objective if config.objective == "vfe" else elbo(X, data.Y, Z, params))
        sizes.append(len(Z))
        log.info("dictionary size %d, objective %.6g", len(Z), opt.objective)
    if len(Z) == 0:
        raise ValueError("no inducing point could be selected")
    model = fit_tcca(data, Z, params, config.truncation_tol)
    return PipelineResult(params, Z, model, objective_trace, elbo_trace, sizes)


def select_lifted_noise_by_validation(data: SnapshotSet, Z, params: KernelParams, initial_states,
                                      true_rollouts, horizon: int, factors=None,
                                      truncation_tol: float = 1e-10) -> float:
    """Lifted noise variance minimizing validation SMAPE at ``horizon``.

    Uses the same grid as :func:`~gpkoopman.koopman.select_lifted_noise`;
    ties keep the smallest variance.
    """
    if factors is None:
        factors = np.logspace(-4, 1, 51)
    grid = (np.asarray(factors) ** 2) * params.noise_variance
    best, best_score = float(grid[0]), np.inf
    for s2 in grid:
        try:
            model = fit_tcca(data, Z, params, truncation_tol, lifted_noise_variance=float(s2))
            rep = multi_horizon_eval(spectral_forecaster(model), initial_states, true_rollouts, [horizon])
            score = rep.smape_per_horizon[horizon]
        except (np.linalg.LinAlgError, ValueError, FloatingPointError):
            continue
        if score < best_score:
            best, best_score = float(s2), score
    return best
