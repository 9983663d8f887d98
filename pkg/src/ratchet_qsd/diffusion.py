"""Euler-Maruyama simulation of the truncated and aggregated ratchet diffusions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import (
    Profile,
    Trajectory,
    as_array,
    drift_aggregated,
    drift_full,
    moment_drift,
    moment_qv,
    raw_moment,
)
from .errors import InvalidK, InvalidStart
from .parallel import get_threads, map_chunks
from .rng import Stream

CHUNK = 256


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-3
    t_max: float = 1.0
    record_stride: int = 1
    click_mode: str = "pre_clip_sign"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.t_max < self.dt:
            raise ValueError("t_max must be >= dt")
        if int(self.record_stride) != self.record_stride or self.record_stride < 1:
            raise ValueError("record_stride must be an integer >= 1")
        if self.click_mode != "pre_clip_sign":
            raise ValueError(f"unsupported click_mode {self.click_mode!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    def steps_for(self, horizon: float) -> int:
        return int(round(horizon / self.dt))

    def with_(self, **kw) -> "IntegratorConfig":
        vals = dict(dt=self.dt, t_max=self.t_max, record_stride=self.record_stride,
                    click_mode=self.click_mode)
        vals.update(kw)
        return IntegratorConfig(**vals)


def _draw_normals(rng, shape) -> np.ndarray:
    if isinstance(rng, Stream):
        r = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
        z = rng.normals([0], np.arange(r), shape[-1])[0]
        return z.reshape(shape)
    return rng.standard_normal(shape)


def euler_increment(x, p, dt: float, noise, k: int | None = None) -> np.ndarray:
    """Raw (pre-clip) increment for normals ``noise``."""
    arr = as_array(x)
    drift = drift_full(arr, p) if k is None else drift_aggregated(arr, p, k)
    sx = np.sqrt(arr)
    w = np.sum(sx * noise, axis=-1, keepdims=True)
    return drift * dt + math.sqrt(dt) * (sx * noise - arr * w)


def euler_step(x, p, dt: float, rng=None, *, noise=None, k: int | None = None):
    """One Euler-Maruyama step, clipped to ``[0, 1]`` and renormalized.

    Returns ``(new_state, pre_clip_x0)``.  Pass ``noise`` to supply the
    normals directly (e.g. zeros for the noise-free step).
    """
    arr = as_array(x)
    if noise is None:
        noise = _draw_normals(rng, arr.shape)
    raw = arr + euler_increment(arr, p, dt, noise, k)
    pre0 = raw[..., 0].copy()
    np.clip(raw, 0.0, 1.0, out=raw)
    raw /= raw.sum(axis=-1, keepdims=True)
    if isinstance(x, Profile):
        return Profile(raw), float(pre0)
    return raw, pre0


@dataclass
class EnsembleRun:
    """State of a batch of independent paths after :func:`run_ensemble`."""

    states: np.ndarray
    alive: np.ndarray
    click_step: np.ndarray
    dt: float
    n_steps: int
    clip_steps: np.ndarray
    unstable_steps: np.ndarray
    ids: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def click_times(self) -> np.ndarray:
        """Click times, ``inf`` for paths that never clicked."""
        t = self.click_step.astype(np.float64) * self.dt
        t[self.click_step < 0] = np.inf
        return t

    @property
    def clip_fraction(self) -> float:
        return float(self.clip_steps.sum()) / max(1, self._particle_steps())

    @property
    def unstable_fraction(self) -> float:
        return float(self.unstable_steps.sum()) / max(1, self._particle_steps())

    def _particle_steps(self) -> int:
        lived = np.where(self.click_step >= 0, self.click_step, self.n_steps)
        return int(np.minimum(lived, self.n_steps).sum())


def _selection_k(p, k: int | None) -> int:
    if k is None:
        return p.d
    if int(k) != k or not 1 <= k <= p.d:
        raise InvalidK(f"k must lie in [1, {p.d}], got {k}")
    return int(k)


def broadcast_states(x0, n: int | None, dim: int) -> np.ndarray:
    arr = as_array(x0)
    if arr.ndim == 1:
        if n is None:
            n = 1
        arr = np.tile(arr, (n, 1))
    else:
        arr = np.array(arr, dtype=np.float64)
    if arr.shape[-1] != dim:
        raise ValueError(f"states have {arr.shape[-1]} classes, expected {dim}")
    return np.ascontiguousarray(arr)


def run_ensemble(x0, p, dt: float, n_steps: int, stream: Stream, *, n: int | None = None,
                 k: int | None = None, absorb: bool = True, level: int = 0,
                 ids=None, step0: int = 0, record_every: int | None = None,
                 on_record=None, threads: int | None = None) -> EnsembleRun:
    """Simulate independent paths; ``on_record(step, run)`` fires every ``record_every`` steps.

    Path ``r`` draws its noise from particle id ``ids[r]`` (default ``r``)
    of ``stream``, so any subset or reordering reproduces the same paths.
    """
    kk = _selection_k(p, k)
    x = broadcast_states(x0, n, p.d + 1)
    R = x.shape[0]
    ids = np.arange(R, dtype=np.uint64) if ids is None else np.asarray(ids, dtype=np.uint64)
    run = EnsembleRun(
        states=x, alive=np.ones(R, dtype=np.bool_), click_step=np.full(R, -1, dtype=np.int64),
        dt=dt, n_steps=n_steps, clip_steps=np.zeros(R, dtype=np.int64),
        unstable_steps=np.zeros(R, dtype=np.int64), ids=ids,
    )
    k0, k1 = stream.key
    chunks = [slice(a, min(a + CHUNK, R)) for a in range(0, R, CHUNK)]
    nthreads = threads or get_threads()

    def advance(start: int, count: int):
        def work(sl):
            kernels.advance_independent(
                run.states[sl], ids[sl], k0, k1, start, count, dt, p.alpha, p.lam, kk, level,
                absorb, run.alive[sl], run.click_step[sl], run.clip_steps[sl],
                run.unstable_steps[sl],
            )
        map_chunks(work, chunks, nthreads)

    if on_record is not None:
        on_record(step0, run)
    stride = record_every or n_steps
    done = 0
    while done < n_steps:
        m = min(stride, n_steps - done)
        advance(step0 + done, m)
        done += m
        if on_record is not None and (done % stride == 0 or done == n_steps):
            on_record(step0 + done, run)
    return run


def _path(x0, p, cfg: IntegratorConfig, stream: Stream, k, particle: int) -> Trajectory:
    x = as_array(x0)
    if x.ndim != 1:
        raise ValueError("simulate_path expects a single profile")
    if not x[0] > 0:
        raise InvalidStart("the starting profile must have x0 > 0")
    times, states = [], []

    def record(step, run):
        if run.click_step[0] < 0:
            times.append(step * cfg.dt)
            states.append(run.states[0].copy())

    run = run_ensemble(x, p, cfg.dt, cfg.n_steps, stream, k=k, ids=[particle],
                       record_every=cfg.record_stride, on_record=record, threads=1)
    click = None
    if run.click_step[0] >= 0:
        click = run.click_step[0] * cfg.dt
        times.append(click)
        states.append(run.states[0].copy())
    return Trajectory(
        np.array(times), np.array(states), click, t_max=cfg.n_steps * cfg.dt,
        info={"clip_steps": int(run.clip_steps[0]), "unstable_steps": int(run.unstable_steps[0])},
    )


def simulate_path(x0, p, cfg: IntegratorConfig, stream: Stream, particle: int = 0) -> Trajectory:
    """Path of the truncated system until the first pre-clip ``x0 <= 0`` or ``t_max``."""
    return _path(x0, p, cfg, stream, None, particle)


def simulate_aggregated_path(x0, p, k: int, cfg: IntegratorConfig, stream: Stream,
                             particle: int = 0) -> Trajectory:
    """As :func:`simulate_path` with selection seen only through ``min(i, k)``."""
    return _path(x0, p, cfg, stream, _selection_k(p, k), particle)


@dataclass
class MomentDriftReport:
    k: int
    analytic_drift: float
    empirical_drift: float
    drift_stderr: float
    analytic_qv: float
    empirical_qv: float
    qv_stderr: float

    def drift_z(self) -> float:
        return _zscore(self.empirical_drift, self.analytic_drift, self.drift_stderr)

    def qv_z(self) -> float:
        return _zscore(self.empirical_qv, self.analytic_qv, self.qv_stderr)


def _zscore(est, target, se):
    # differences at roundoff level count as exact agreement
    if abs(est - target) <= 1e-12 * max(1.0, abs(target)):
        return 0.0
    if se == 0:
        return math.inf
    return (est - target) / se


def moment_drift_check(x, p, k: int, replicates: int, dt: float, rng) -> MomentDriftReport:
    """Compare one-step moment increments of ``M_k`` with ``V_k`` and ``M_2k - M_k**2``."""
    arr = as_array(x)
    xs = np.tile(arr, (replicates, 1))
    new, _ = euler_step(xs, p, dt, rng)
    inc = raw_moment(new, k) - raw_moment(arr, k)
    mean = inc.mean()
    sd = inc.std(ddof=1)
    c = inc - mean
    var = np.mean(c**2)
    var_se = math.sqrt(max(np.mean(c**4) - var**2, 0.0) / replicates)
    return MomentDriftReport(
        k=k,
        analytic_drift=float(moment_drift(arr, p, k)),
        empirical_drift=float(mean / dt),
        drift_stderr=float(sd / math.sqrt(replicates) / dt),
        analytic_qv=float(moment_qv(arr, k)),
        empirical_qv=float(var / dt),
        qv_stderr=float(var_se / dt),
    )
