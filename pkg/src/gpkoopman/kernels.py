"""Matérn-5/2 ARD kernel: values, Gramians and derivatives.

Point sets are arrays of shape ``(n, D)`` (one state per row).  The ARD
matrix ``T`` is diagonal with entries ``T_d = lengthscale_d**2``, so that

    r**2 = sum_d (x_d - x'_d)**2 / T_d

and ``k(x, x') = s2 * (1 + sqrt(5) r + 5/3 r**2) * exp(-sqrt(5) r)`` with
``s2`` the signal variance.  Use :meth:`KernelParams.from_ard_diagonal` to
build parameters from ``T`` directly.
"""
from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace

import numpy as np
from scipy.spatial.distance import cdist

SQRT5 = np.sqrt(5.0)


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of the Matérn-5/2 ARD kernel and the noise model.

    Attributes
    ----------
    lengthscales : ndarray, shape (D,)
        Characteristic lengthscales; the ARD diagonal is ``lengthscales**2``.
    signal_variance : float
        Prior variance ``k(x, x)``.
    noise_variance : float
        Variance of the measurement noise on the targets.
    lifted_noise_variance : float, optional
        Noise variance of the lifted observation model.  Defaults to
        ``noise_variance`` (the coupled model).
    inducing_jitter : float
        Diagonal jitter added to ``K_ZZ``; may be zero.
    """

    lengthscales: np.ndarray
    signal_variance: float = 1.0
    noise_variance: float = 1e-2
    lifted_noise_variance: float | None = None
    inducing_jitter: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        if self.lifted_noise_variance is None:
            object.__setattr__(self, "lifted_noise_variance", float(self.noise_variance))
        if ls.ndim != 1 or ls.size == 0:
            raise ValueError("lengthscales must be a non-empty vector")
        if not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise ValueError(f"lengthscales must be finite and positive, got {ls}")
        for name in ("signal_variance", "noise_variance", "lifted_noise_variance"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be finite and positive, got {v}")
            object.__setattr__(self, name, v)
        jit = float(self.inducing_jitter)
        if not np.isfinite(jit) or jit < 0:
            raise ValueError(f"inducing_jitter must be nonnegative, got {jit}")
        object.__setattr__(self, "inducing_jitter", jit)

    @classmethod
    def from_ard_diagonal(cls, T, **kwargs) -> "KernelParams":
        """Build parameters from the ARD diagonal ``T`` (squared lengthscales)."""
        return cls(lengthscales=np.sqrt(np.asarray(T, dtype=float)), **kwargs)

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    @property
    def ard_diagonal(self) -> np.ndarray:
        return self.lengthscales**2

    @property
    def coupled(self) -> bool:
        return self.lifted_noise_variance == self.noise_variance

    def replace(self, **changes) -> "KernelParams":
        """Return a copy with some fields changed.

        Changing ``noise_variance`` on a coupled instance keeps it coupled.
        """
        if "noise_variance" in changes and "lifted_noise_variance" not in changes and self.coupled:
            changes["lifted_noise_variance"] = None
        return dc_replace(self, **changes)

    def log_hypers(self) -> np.ndarray:
        """``[log lengthscales..., log signal_variance, log noise_variance]``."""
        return np.concatenate(
            [np.log(self.lengthscales), [np.log(self.signal_variance), np.log(self.noise_variance)]]
        )

    def with_log_hypers(self, theta) -> "KernelParams":
        theta = np.asarray(theta, dtype=float)
        D = self.dim
        return self.replace(
            lengthscales=np.exp(theta[:D]),
            signal_variance=float(np.exp(theta[D])),
            noise_variance=float(np.exp(theta[D + 1])),
        )

    def to_dict(self) -> dict:
        return {
            "lengthscales": [float(v) for v in self.lengthscales],
            "signal_variance": self.signal_variance,
            "noise_variance": self.noise_variance,
            "lifted_noise_variance": self.lifted_noise_variance,
            "inducing_jitter": self.inducing_jitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelParams":
        return cls(**d)


def as_points(A, dim: int | None = None, name: str = "points") -> np.ndarray:
    """Validate a point set and return it as a float array of shape (n, D)."""
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2 or A.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty (n, D) array, got shape {A.shape}")
    if dim is not None and A.shape[1] != dim:
        raise ValueError(f"{name} has dimension {A.shape[1]}, kernel expects {dim}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains non-finite entries")
    return A


def _as_state(x, dim: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != dim:
        raise ValueError(f"{name} has dimension {x.size}, kernel expects {dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def _profile(r, s2):
    """Kernel value and ``q(r) = (dk/dr) / r`` on an array of distances."""
    e = np.exp(-SQRT5 * r)
    k = s2 * (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * e
    q = -(5.0 / 3.0) * s2 * (1.0 + SQRT5 * r) * e
    return k, q


def _distance(r2):
    return np.sqrt(np.maximum(r2, 0.0))


def matern52(x, x2, params: KernelParams) -> float:
    """Kernel value ``k(x, x2)`` for two single states."""
    D = params.dim
    x = _as_state(x, D, "x")
    x2 = _as_state(x2, D, "x2")
    r = _distance(np.sum((x - x2) ** 2 / params.ard_diagonal))
    return float(_profile(r, params.signal_variance)[0])


def sq_distances(A, B, params: KernelParams) -> np.ndarray:
    """Scaled squared distances ``r**2`` between the rows of A and B."""
    ls = params.lengthscales
    return cdist(A / ls, B / ls, "sqeuclidean")


def gram(A, B, params: KernelParams) -> np.ndarray:
    """Kernel matrix with entries ``k(A[i], B[j])``, shape (len(A), len(B))."""
    D = params.dim
    A = as_points(A, D, "A")
    B = as_points(B, D, "B")
    r = _distance(sq_distances(A, B, params))
    return _profile(r, params.signal_variance)[0]


def gram_diag(A, params: KernelParams) -> np.ndarray:
    """Diagonal of ``gram(A, A)``, i.e. the signal variance repeated."""
    return np.full(len(A), params.signal_variance)


def gram_hyper_derivatives(A, B, params: KernelParams):
    """Kernel matrix and its derivatives with respect to log-hyperparameters.

    Returns
    -------
    K : ndarray, shape (n, m)
    dK : ndarray, shape (D + 1, n, m)
        ``dK[d]`` is the derivative with respect to ``log lengthscale_d`` for
        ``d < D`` and ``dK[D]`` with respect to ``log signal_variance``.
    """
    ls = params.lengthscales
    As, Bs = A / ls, B / ls
    r = _distance(cdist(As, Bs, "sqeuclidean"))
    K, q = _profile(r, params.signal_variance)
    D = params.dim
    dK = np.empty((D + 1,) + K.shape)
    for d in range(D):
        diff = As[:, d, None] - Bs[None, :, d]
        dK[d] = -q * diff * diff
    dK[D] = K
    return K, dK


def gram_state_derivatives(A, B, params: KernelParams) -> np.ndarray:
    """Derivatives of ``k(A[i], B[j])`` with respect to ``A[i]``.

    Returns an array of shape (D, n, m).
    """
    ls = params.lengthscales
    r = _distance(cdist(A / ls, B / ls, "sqeuclidean"))
    _, q = _profile(r, params.signal_variance)
    T = params.ard_diagonal
    out = np.empty((params.dim,) + r.shape)
    for d in range(params.dim):
        out[d] = q * (A[:, d, None] - B[None, :, d]) / T[d]
    return out


def kernel_hyper_gradient(x, x2, params: KernelParams) -> np.ndarray:
    """Gradient of ``k(x, x2)`` over ``(log lengthscales..., log signal_variance)``."""
    D = params.dim
    x = _as_state(x, D, "x")
    x2 = _as_state(x2, D, "x2")
    _, dK = gram_hyper_derivatives(x[None], x2[None], params)
    return dK[:, 0, 0]


def kernel_state_gradient(x, x2, params: KernelParams) -> np.ndarray:
    """Gradient of ``k(x, x2)`` with respect to its first argument."""
    D = params.dim
    x = _as_state(x, D, "x")
    x2 = _as_state(x2, D, "x2")
    return gram_state_derivatives(x[None], x2[None], params)[:, 0, 0]


def kernel_state_hessians(x, B, params: KernelParams) -> np.ndarray:
    """Hessians of ``k(x, B[j])`` with respect to x, shape (m, D, D).

    Uses ``H = q(r) T^-1 + (25/3) s2 exp(-sqrt5 r) u u^T`` with
    ``u = T^-1 (x - b)``, which is smooth at ``r = 0``.
    """
    D = params.dim
    x = _as_state(x, D, "x")
    T = params.ard_diagonal
    delta = x[None, :] - B
    r = _distance(np.sum(delta**2 / T, axis=1))
    _, q = _profile(r, params.signal_variance)
    u = delta / T
    c = (25.0 / 3.0) * params.signal_variance * np.exp(-SQRT5 * r)
    return q[:, None, None] * np.diag(1.0 / T)[None] + c[:, None, None] * u[:, :, None] * u[:, None, :]
