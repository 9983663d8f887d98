"""Domain types and closed-form quantities of the truncated ratchet diffusion.

All array-valued functions accept either a :class:`Profile` or a raw array
whose last axis indexes mutation classes ``0..d``; leading axes are treated
as a batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import InvalidK, NegativeEntry, NotNormalized, StepTooLarge

NORM_TOL = 1e-9
IDENTITY_TOL = 1e-12


@dataclass(frozen=True)
class Params:
    """Selection ``alpha`` per mutation, mutation rate ``lam``, truncation ``d``."""

    alpha: float
    lam: float
    d: int

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be an integer >= 1, got {self.d}")
        object.__setattr__(self, "d", int(self.d))

    @property
    def n_star(self) -> float:
        return self.lam / self.alpha

    @property
    def dim(self) -> int:
        return self.d + 1

    def with_d(self, d: int) -> "Params":
        return Params(self.alpha, self.lam, d)


@dataclass(frozen=True)
class ModelParams:
    """Like :class:`Params` but allows ``alpha = 0`` or ``lam = 0``.

    The degenerate corners (neutral drift, no mutation) are used by checks
    such as corner stability and martingale symmetry.
    """

    alpha: float
    lam: float
    d: int

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lambda must be >= 0")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be an integer >= 1, got {self.d}")
        object.__setattr__(self, "d", int(self.d))

    @property
    def n_star(self) -> float:
        return self.lam / self.alpha if self.alpha > 0 else math.inf

    @property
    def dim(self) -> int:
        return self.d + 1

    def with_d(self, d: int) -> "ModelParams":
        return ModelParams(self.alpha, self.lam, d)


def model_params(alpha: float, lam: float, d: int) -> Params | ModelParams:
    """Return strict :class:`Params` when possible, else :class:`ModelParams`."""
    if alpha > 0 and lam > 0:
        return Params(alpha, lam, d)
    return ModelParams(alpha, lam, d)


@dataclass(frozen=True, eq=False)
class Profile:
    """Frequencies ``x_0..x_d`` of individuals carrying ``i`` mutations."""

    freqs: np.ndarray

    def __post_init__(self):
        arr = np.array(self.freqs, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("a profile is a nonempty 1-d vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("profile entries must be finite")
        if np.any(arr < 0):
            raise NegativeEntry(f"negative entry {arr.min()!r}")
        s = arr.sum()
        if abs(s - 1.0) > NORM_TOL:
            raise NotNormalized(f"entries sum to {s!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "freqs", arr)

    @property
    def d(self) -> int:
        return self.freqs.size - 1

    def __len__(self):
        return self.freqs.size

    def __getitem__(self, i):
        return self.freqs[i]

    def __array__(self, dtype=None, copy=None):
        return self.freqs if dtype is None else self.freqs.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, Profile):
            return NotImplemented
        return self.freqs.shape == other.freqs.shape and bool(np.all(self.freqs == other.freqs))

    def __repr__(self):
        return f"Profile({np.array2string(self.freqs, precision=6)})"


@dataclass
class Trajectory:
    """Time-sampled path; ``click_time`` is ``None`` when censored."""

    times: np.ndarray
    states: np.ndarray
    click_time: float | None = None
    t_max: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def censored(self) -> bool:
        return self.click_time is None

    def profile(self, i: int) -> Profile:
        return Profile(self.states[i])


def validate_profile(freqs) -> Profile:
    """Check simplex membership without renormalizing."""
    arr = np.asarray(freqs, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty profile")
    return Profile(arr)


def delta(j: int, d: int) -> Profile:
    x = np.zeros(d + 1)
    x[j] = 1.0
    return Profile(x)


def as_array(x) -> np.ndarray:
    if isinstance(x, Profile):
        return x.freqs
    return np.asarray(x, dtype=np.float64)


def _check_dim(x: np.ndarray, p) -> None:
    if x.shape[-1] != p.d + 1:
        raise ValueError(f"profile has {x.shape[-1]} classes, params expect d+1 = {p.d + 1}")


def _classes(dim: int) -> np.ndarray:
    return np.arange(dim, dtype=np.float64)


def moment(x, k: int) -> np.ndarray | float:
    """``M_k(x) = sum_i i**k x_i`` for ``k >= 1``."""
    if int(k) != k or k < 1:
        raise ValueError(f"moment order must be an integer >= 1, got {k}")
    return raw_moment(x, int(k))


def raw_moment(x, k: int):
    """Like :func:`moment` but also accepts ``k = 0``."""
    arr = as_array(x)
    w = _classes(arr.shape[-1]) ** k
    out = arr @ w
    return float(out) if np.ndim(out) == 0 else out


def aggregated_m1(x, k: int):
    """``M_1^(k)(x) = sum_i min(i, k) x_i``."""
    arr = as_array(x)
    w = np.minimum(_classes(arr.shape[-1]), k)
    out = arr @ w
    return float(out) if np.ndim(out) == 0 else out


def _mutation_flux(arr: np.ndarray, lam: float) -> np.ndarray:
    flux = np.zeros_like(arr)
    flux[..., 1:] += arr[..., :-1]
    flux[..., :-1] -= arr[..., :-1]
    return lam * flux


def drift_full(x, p) -> np.ndarray:
    """Drift of the truncated system; mutation out of class ``d`` is switched off."""
    arr = as_array(x)
    _check_dim(arr, p)
    i = _classes(arr.shape[-1])
    m1 = arr @ i
    return p.alpha * (np.expand_dims(m1, -1) - i) * arr + _mutation_flux(arr, p.lam)


def drift_aggregated(x, p, k: int) -> np.ndarray:
    """Drift where selection only distinguishes classes ``0..k-1`` and ``>= k``."""
    arr = as_array(x)
    _check_dim(arr, p)
    if int(k) != k or not 1 <= k <= p.d:
        raise InvalidK(f"k must lie in [1, {p.d}], got {k}")
    ik = np.minimum(_classes(arr.shape[-1]), k)
    m1k = arr @ ik
    return p.alpha * (np.expand_dims(m1k, -1) - ik) * arr + _mutation_flux(arr, p.lam)


def wf_covariance(x) -> np.ndarray:
    """Instantaneous covariance ``x_i delta_ij - x_i x_j`` of the noise."""
    arr = as_array(x)
    eye = np.eye(arr.shape[-1])
    return arr[..., :, None] * eye - arr[..., :, None] * arr[..., None, :]


def moment_drift(x, p, k: int):
    """Drift ``V_k`` of ``M_k`` under the full truncated dynamics."""
    arr = as_array(x)
    d = arr.shape[-1] - 1
    i = _classes(d + 1)
    m1 = arr @ i
    mk = arr @ i**k
    mk1 = arr @ i ** (k + 1)
    source = arr[..., :d] @ (i[:d] + 1.0) ** k
    return p.alpha * (m1 * mk - mk1) + p.lam * source - p.lam * (mk - d**k * arr[..., d])


def moment_qv(x, k: int):
    """Quadratic-variation density ``M_{2k} - M_k**2`` of ``M_k``."""
    arr = as_array(x)
    i = _classes(arr.shape[-1])
    mk = arr @ i**k
    return arr @ i ** (2 * k) - mk**2


def poisson_profile(p) -> Profile:
    """Poisson(lam/alpha) weights on ``0..d-1``; class ``d`` takes the remaining tail."""
    n = p.lam / p.alpha
    i = np.arange(p.d, dtype=np.float64)
    if n == 0:
        head = np.zeros(p.d)
        head[0] = 1.0
    else:
        head = np.exp(i * math.log(n) - n - gammaln(i + 1))
    tail = max(1.0 - head.sum(), 0.0)
    return Profile(np.append(head, tail))


def project_pi_k(x, k: int) -> Profile:
    """Keep classes ``0..k-1`` and merge everything ``>= k`` into class ``k``."""
    arr = as_array(x)
    d = arr.shape[-1] - 1
    if int(k) != k or not 1 <= k <= d:
        raise InvalidK(f"k must lie in [1, {d}], got {k}")
    head = arr[:k]
    tail = max(1.0 - head.sum(), 0.0)
    return Profile(np.append(head, tail))


def project_pi_k_batch(x: np.ndarray, k: int) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    out = np.empty(arr.shape[:-1] + (k + 1,))
    out[..., :k] = arr[..., :k]
    out[..., k] = np.maximum(1.0 - arr[..., :k].sum(axis=-1), 0.0)
    return out


def _rk4(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def deterministic_flow(x0, p, t_end: float, dt: float, record_stride: int = 1) -> Trajectory:
    """Noise-free flow integrated with classical RK4 and projected back on the simplex."""
    if dt <= 0 or t_end < dt:
        raise ValueError("need dt > 0 and t_end >= dt")
    x = as_array(x0).copy()
    _check_dim(x, p)
    n_steps = int(round(t_end / dt))

    def f(y):
        return drift_full(y, p)

    times = [0.0]
    states = [x.copy()]
    max_dev = 0.0
    for s in range(1, n_steps + 1):
        y = _rk4(f, x, dt)
        if y.min() < -1e-6:
            raise StepTooLarge(f"entry {y.min():.3g} at t = {s * dt:g}; reduce dt")
        max_dev = max(max_dev, abs(y.sum() - 1.0))
        np.clip(y, 0.0, None, out=y)
        x = y / y.sum()
        if s % record_stride == 0 or s == n_steps:
            times.append(s * dt)
            states.append(x.copy())
    return Trajectory(
        np.array(times), np.array(states), None, t_max=n_steps * dt,
        info={"max_renormalization": max_dev},
    )
