"""Reference simulators and snapshot builders for the benchmark systems.

Trajectories are arrays of shape (n_samples, D) whose first row is the
initial state.  Stochastic simulations draw one Philox stream per trajectory
from ``SeedSequence([seed, trajectory_index])``, so results do not depend on
how trajectories are scheduled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import qmc

from .koopman import SnapshotSet, Standardizer

POTENTIALS = ("double_well", "quadruple_well", "quadruple_well_literal")


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, what: str = "state"):
        super().__init__(f"non-finite {what} at sample {step}")
        self.step = step


@dataclass(frozen=True)
class OdeSystem:
    """Van der Pol oscillator ``x1' = x2, x2' = alpha (1 - x1^2) x2 - x1``."""

    alpha: float = 2.0
    dt_sample: float = 0.05
    substeps: int = 10

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.dt_sample > 0 or self.substeps < 1:
            raise ValueError("dt_sample must be positive and substeps >= 1")

    dim = 2

    def drift(self, x):
        return vdp_drift(x, self.alpha)

    def simulate(self, x0, n_samples: int, seed: int | None = None):
        return simulate_vdp(x0, self.alpha, self.dt_sample, self.substeps, n_samples)


@dataclass(frozen=True)
class SdeSystem:
    """Overdamped Langevin dynamics ``dx = -grad V dt + sigma_T dW``.

    ``quadruple_well`` is ``(x1^2 - 1)^2 + (x2^2 - 1)^2``;
    ``quadruple_well_literal`` is ``(x1^2 - 1)^2 + (x2 - 1)^2``.
    """

    potential: str = "double_well"
    sigma_T: float = 0.7
    dt_sample: float = 10.0
    substeps: int = 1000

    def __post_init__(self):
        if self.potential not in POTENTIALS:
            raise ValueError(f"unknown potential {self.potential!r}; choose from {POTENTIALS}")
        if self.sigma_T < 0:
            raise ValueError("sigma_T must be nonnegative")
        if not self.dt_sample > 0 or self.substeps < 1:
            raise ValueError("dt_sample must be positive and substeps >= 1")
        if self.dt_sample / self.substeps > 1e-2 + 1e-15:
            raise ValueError("Euler-Maruyama step dt_sample/substeps must not exceed 1e-2")

    dim = 2

    @property
    def potential_id(self) -> int:
        return POTENTIALS.index(self.potential)

    def energy(self, x):
        return potential_energy(x, self.potential)

    def simulate(self, x0, n_samples: int, seed: int = 0):
        return simulate_langevin(self, x0, n_samples, seed)


def vdp_drift(x, alpha: float = 2.0):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x2, alpha * (1.0 - x1 * x1) * x2 - x1], axis=-1)


def potential_energy(x, potential: str = "double_well"):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    a = (x1 * x1 - 1.0) ** 2
    if potential == "double_well":
        return a + x2 * x2
    if potential == "quadruple_well":
        return a + (x2 * x2 - 1.0) ** 2
    if potential == "quadruple_well_literal":
        return a + (x2 - 1.0) ** 2
    raise ValueError(f"unknown potential {potential!r}")


def potential_gradient(x, potential: str = "double_well"):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    g1 = 4.0 * x1 * (x1 * x1 - 1.0)
    if potential == "double_well":
        g2 = 2.0 * x2
    elif potential == "quadruple_well":
        g2 = 4.0 * x2 * (x2 * x2 - 1.0)
    elif potential == "quadruple_well_literal":
        g2 = 2.0 * (x2 - 1.0)
    else:
        raise ValueError(f"unknown potential {potential!r}")
    return np.stack([g1, g2], axis=-1)


def simulate_vdp(x0, alpha: float = 2.0, dt_sample: float = 0.05, substeps: int = 10,
                 n_samples: int = 100) -> np.ndarray:
    """Classic RK4 integration sampled every ``dt_sample``.

    ``x0`` of shape (2,) gives a trajectory (n_samples, 2); a batch (B, 2)
    gives (B, n_samples, 2).
    """
    OdeSystem(alpha, dt_sample, substeps)
    x = np.array(x0, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    h = dt_sample / substeps
    out = np.empty((x.shape[0], n_samples, 2))
    out[:, 0] = x
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is raised below
        for s in range(1, n_samples):
            for _ in range(substeps):
                k1 = vdp_drift(x, alpha)
                k2 = vdp_drift(x + 0.5 * h * k1, alpha)
                k3 = vdp_drift(x + 0.5 * h * k2, alpha)
                k4 = vdp_drift(x + h * k3, alpha)
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise DivergenceError(s)
            out[:, s] = x
    return out[0] if single else out


@numba.njit(cache=True)
def _em_block(x, noise, h, sigma, pid, out):
    """Euler-Maruyama over a block of samples; ``noise`` is (n, substeps, 2)."""
    sq = sigma * np.sqrt(h)
    x1, x2 = x[0], x[1]
    for s in range(noise.shape[0]):
        for j in range(noise.shape[1]):
            g1 = 4.0 * x1 * (x1 * x1 - 1.0)
            if pid == 0:
                g2 = 2.0 * x2
            elif pid == 1:
                g2 = 4.0 * x2 * (x2 * x2 - 1.0)
            else:
                g2 = 2.0 * (x2 - 1.0)
            x1 = x1 - h * g1 + sq * noise[s, j, 0]
            x2 = x2 - h * g2 + sq * noise[s, j, 1]
        out[s, 0] = x1
        out[s, 1] = x2
    x[0] = x1
    x[1] = x2


def trajectory_rng(seed: int, trajectory: int = 0) -> np.random.Generator:
    """Counter-based generator for one trajectory."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(trajectory)])))


def simulate_langevin(system: SdeSystem, x0, n_samples: int, seed: int = 0,
                      trajectory: int = 0, block: int = 256) -> np.ndarray:
    """Euler-Maruyama trajectory of shape (n_samples, 2) sampled every ``dt_sample``."""
    x = np.array(x0, dtype=float).reshape(2)
    rng = trajectory_rng(seed, trajectory)
    h = system.dt_sample / system.substeps
    out = np.empty((n_samples, 2))
    out[0] = x
    done = 1
    while done < n_samples:
        n = min(block, n_samples - done)
        noise = rng.standard_normal((n, system.substeps, 2))
        _em_block(x, noise, h, float(system.sigma_T), system.potential_id, out[done:done + n])
        if not np.all(np.isfinite(out[done:done + n])):
            bad = done + int(np.argmax(~np.all(np.isfinite(out[done:done + n]), axis=1)))
            raise DivergenceError(bad)
        done += n
    return out


def simulate_trajectories(system, X0, n_samples: int, seed: int = 0) -> np.ndarray:
    """Trajectories from each row of X0, shape (B, n_samples, 2)."""
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    if isinstance(system, OdeSystem):
        return simulate_vdp(X0, system.alpha, system.dt_sample, system.substeps, n_samples)
    return np.stack([simulate_langevin(system, x, n_samples, seed, trajectory=i) for i, x in enumerate(X0)])


def latin_hypercube(n: int, bounds, seed: int = 0, candidates: int = 100) -> np.ndarray:
    """Maximin Latin hypercube: best minimum pairwise distance of several draws."""
    bounds = np.asarray(bounds, dtype=float)
    if n < 1:
        raise ValueError("n must be >= 1")
    if bounds.ndim != 2 or bounds.shape[1] != 2 or np.any(bounds[:, 1] <= bounds[:, 0]):
        raise ValueError("bounds must be a (D, 2) array of increasing intervals")
    sampler = qmc.LatinHypercube(d=bounds.shape[0], seed=np.random.Generator(np.random.Philox(seed)))
    best, best_score = None, -np.inf
    for _ in range(max(1, candidates)):
        U = sampler.random(n)
        score = float(np.min(pdist(U))) if n > 1 else 0.0
        if score > best_score:
            best, best_score = U, score
    return qmc.scale(best, bounds[:, 0], bounds[:, 1])


def snapshot_pairs(trajectories):
    """Consecutive (x, y) pairs inside each trajectory, never across them."""
    Xs, Ys = [], []
    for T in trajectories:
        T = np.asarray(T, dtype=float)
        if T.shape[0] < 2:
            raise ValueError("trajectories need at least two samples")
        Xs.append(T[:-1])
        Ys.append(T[1:])
    return np.concatenate(Xs), np.concatenate(Ys)


def build_snapshots(trajectories, sigma_Y: float = 0.0, seed: int = 0, standardize: bool = True) -> SnapshotSet:
    """Snapshot pairs with Gaussian noise on the successors only.

    With ``standardize`` the standardizer is fit on the noise-free X and the
    noise (standard deviation ``sigma_Y``) is added in standardized units.
    """
    X, Y = snapshot_pairs(trajectories)
    std = Standardizer.fit(X) if standardize else Standardizer.identity(X.shape[1])
    Xs, Ys = std.transform(X), std.transform(Y)
    if sigma_Y > 0:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x5E75])))
        Ys = Ys + sigma_Y * rng.standard_normal(Ys.shape)
    return SnapshotSet(Xs, Ys, std)
