"""Quasi-stationary estimation: QSD, clicking rate, survival capacity, Q-process.

Two particle schemes approximate the law conditioned on no click: a plain
conditioned ensemble (clicked particles are dropped) and a Fleming-Viot
system (clicked particles restart from a uniformly chosen survivor).  The
restart rate of the latter and the survival slope of the former both
estimate the clicking rate and are cross-checked against each other.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .core import as_array, poisson_profile, raw_moment
from .diffusion import IntegratorConfig, broadcast_states, run_ensemble, _selection_k
from .errors import Extinct, StatisticalFloor, WindowTooThin
from .rng import Stream
from .stats import DEFAULT_BINS, TVReport, batch_means, binned_tv, summary_x0_m1, wls_slope

STAT_FLOOR = 50
N_BOOT = 200


@dataclass
class SurvivalCurve:
    times: np.ndarray
    survivors: np.ndarray
    total: int

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.survivors = np.asarray(self.survivors, dtype=np.float64)
        if np.any(np.diff(self.survivors) > 0):
            raise ValueError("survivors must be nonincreasing")
        if np.any(self.survivors > self.total):
            raise ValueError("survivors cannot exceed the total")

    @property
    def fraction(self) -> np.ndarray:
        return self.survivors / self.total

    @classmethod
    def from_click_times(cls, click_times, times) -> "SurvivalCurve":
        ct = np.sort(np.asarray(click_times, dtype=np.float64))
        times = np.asarray(times, dtype=np.float64)
        dead = np.searchsorted(ct, times, side="right")
        return cls(times, ct.size - dead, ct.size)


@dataclass
class ParticleEnsemble:
    particles: np.ndarray
    weights: np.ndarray
    time: float = 0.0
    resample_events: int = 0
    ids: np.ndarray | None = None
    survival: SurvivalCurve | None = None
    restarts: np.ndarray | None = None

    def __post_init__(self):
        self.particles = np.ascontiguousarray(self.particles, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.ids is None:
            self.ids = np.arange(self.size, dtype=np.uint64)
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        if self.weights.shape != (self.size,) or self.ids.shape != (self.size,):
            raise ValueError("weights and ids must have one entry per particle")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")

    @classmethod
    def uniform(cls, states, n: int | None = None, time: float = 0.0) -> "ParticleEnsemble":
        arr = as_array(states)
        arr = np.tile(arr, (n or 1, 1)) if arr.ndim == 1 else np.array(arr, dtype=np.float64)
        return cls(arr, np.full(arr.shape[0], 1.0 / arr.shape[0]), time)

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    def mean_profile(self) -> np.ndarray:
        return self.weights @ self.particles


def _step0(e: ParticleEnsemble, cfg: IntegratorConfig) -> int:
    return int(round(e.time / cfg.dt))


def conditioned_ensemble_evolve(e: ParticleEnsemble, p, cfg: IntegratorConfig, horizon: float,
                                stream: Stream, k: int | None = None) -> ParticleEnsemble:
    """Move every particle independently for ``horizon``; drop clicked ones.

    The survivor count at every ``cfg.record_stride`` steps is stored in
    ``survival`` of the returned ensemble.
    """
    n_steps = cfg.steps_for(horizon)
    if n_steps == 0:
        return replace(e, particles=e.particles.copy(), survival=SurvivalCurve([e.time], [e.size], e.size))
    times, surv = [], []

    def record(step, run):
        times.append(step * cfg.dt)
        surv.append(int(run.alive.sum()))

    run = run_ensemble(e.particles, p, cfg.dt, n_steps, stream, k=k, ids=e.ids,
                       step0=_step0(e, cfg), record_every=cfg.record_stride, on_record=record)
    if not run.alive.any():
        raise Extinct("every particle clicked; enlarge the ensemble or use fleming_viot_evolve")
    w = e.weights[run.alive]
    return ParticleEnsemble(
        run.states[run.alive], w / w.sum(), e.time + n_steps * cfg.dt, e.resample_events,
        e.ids[run.alive], SurvivalCurve(times, surv, e.size),
    )


def fleming_viot_evolve(e: ParticleEnsemble, p, cfg: IntegratorConfig, horizon: float,
                        stream: Stream, k: int | None = None, snapshot_every: int | None = None,
                        on_snapshot=None) -> ParticleEnsemble:
    """Fleming-Viot dynamics: a clicked particle restarts from a uniform survivor.

    ``restarts`` of the result holds the per-step restart counts;
    ``on_snapshot(time, particles)`` fires every ``snapshot_every`` steps.
    """
    if e.size < 2:
        raise ValueError("Fleming-Viot needs at least 2 particles")
    kk = _selection_k(p, k)
    n_steps = cfg.steps_for(horizon)
    x = e.particles.copy()
    by_id = np.argsort(e.ids, kind="stable").astype(np.int64)
    restarts = np.zeros(n_steps, dtype=np.int64)
    clip = np.zeros(e.size, dtype=np.int64)
    unstable = np.zeros(e.size, dtype=np.int64)
    k0, k1 = stream.key
    step0 = _step0(e, cfg)
    stride = snapshot_every or max(n_steps, 1)
    done = 0
    while done < n_steps:
        m = min(stride, n_steps - done)
        dead_at = kernels.advance_fleming_viot(
            x, e.ids, by_id, k0, k1, step0 + done, m, cfg.dt, p.alpha, p.lam, kk, 0,
            restarts[done:done + m], clip, unstable,
        )
        if dead_at >= 0:
            raise Extinct(f"all particles clicked within step {dead_at}; dt is too large")
        done += m
        if on_snapshot is not None:
            on_snapshot(e.time + done * cfg.dt, x)
    out = ParticleEnsemble(x, np.full(e.size, 1.0 / e.size), e.time + n_steps * cfg.dt,
                           e.resample_events + int(restarts.sum()), e.ids.copy(),
                           restarts=restarts)
    return out


@dataclass
class QsdEstimate:
    ensemble: ParticleEnsemble
    rho0: float
    rho0_stderr: float
    moments: dict
    sample: np.ndarray
    snapshot_times: np.ndarray
    restarts: np.ndarray
    dt: float
    burn_in: float
    info: dict = field(default_factory=dict)

    @property
    def t_click(self) -> float:
        return 1.0 / self.rho0

    def snapshots(self) -> np.ndarray:
        return self.sample.reshape(self.snapshot_times.size, -1, self.sample.shape[-1])


def estimate_qsd(p, cfg: IntegratorConfig, n_particles: int, horizon: float, stream: Stream,
                 *, x0=None, burn_in: float = 0.5, snapshot_dt: float = 0.5,
                 n_batches: int = 20) -> QsdEstimate:
    """Run Fleming-Viot for ``horizon`` and estimate the QSD from the late window.

    The first ``burn_in`` fraction of the run is discarded.  The clicking rate
    is the restart rate per particle and unit time; standard errors come from
    batch means over ``n_batches`` consecutive blocks of the window.
    """
    start = poisson_profile(p) if x0 is None else x0
    e = ParticleEnsemble.uniform(broadcast_states(start, n_particles, p.d + 1))
    n_steps = cfg.steps_for(horizon)
    n_burn = int(round(burn_in * n_steps))
    snap = max(1, int(round(snapshot_dt / cfg.dt)))
    t_burn = n_burn * cfg.dt
    snaps, snap_t = [], []

    def on_snapshot(t, x):
        if t >= t_burn - 1e-12:
            snaps.append(x.copy())
            snap_t.append(t)

    e1 = fleming_viot_evolve(e, p, cfg, horizon, stream, snapshot_every=snap, on_snapshot=on_snapshot)
    window = e1.restarts[n_burn:]
    if window.size < n_batches:
        raise WindowTooThin("post burn-in window shorter than the batch count")
    per_step = window / (n_particles * cfg.dt)
    rho, rho_se = batch_means(per_step, n_batches)
    sample = np.concatenate(snaps) if snaps else e1.particles.copy()
    moments = {}
    for kk in range(1, 5):
        series = np.array([raw_moment(s, kk).mean() for s in snaps]) if snaps else np.array([])
        if series.size >= 2:
            nb = min(n_batches, series.size)
            moments[kk] = batch_means(series, nb)
        else:
            moments[kk] = (float(raw_moment(sample, kk).mean()), math.nan)
    return QsdEstimate(
        ensemble=e1, rho0=rho, rho0_stderr=rho_se, moments=moments, sample=sample,
        snapshot_times=np.array(snap_t), restarts=e1.restarts, dt=cfg.dt, burn_in=t_burn,
        info={"n_particles": n_particles, "horizon": horizon, "window_restarts": int(window.sum())},
    )


def _check_window(sc: SurvivalCurve, window):
    t_lo, t_hi = window
    sel = (sc.times >= t_lo - 1e-12) & (sc.times <= t_hi + 1e-12) & (sc.survivors > 0)
    lo = np.searchsorted(sc.times, t_lo - 1e-12)
    if lo >= sc.times.size or sc.survivors[lo] < STAT_FLOOR:
        raise StatisticalFloor(f"fewer than {STAT_FLOOR} survivors at t = {t_lo}")
    if sel.sum() < 4:
        raise WindowTooThin("fewer than 4 grid points in the fitting window")
    return sel


def _slope(times, survivors, total, sel) -> float:
    s = survivors[sel]
    y = -np.log(s / total)
    slope, _ = wls_slope(times[sel], y, s)
    return slope


def estimate_rho0(sc: SurvivalCurve, window, n_boot: int = N_BOOT, seed: int = 0) -> tuple[float, float]:
    """Weighted least-squares slope of ``-log S(t)`` over ``window``.

    The standard error is a nonparametric bootstrap over replicates: death
    intervals are resampled with replacement ``n_boot`` times.
    """
    sel = _check_window(sc, window)
    rho = _slope(sc.times, sc.survivors, sc.total, sel)
    total = int(round(sc.total))
    surv = np.round(sc.survivors).astype(np.int64)
    deaths = np.concatenate([[total - surv[0]], -np.diff(surv), [surv[-1]]])
    probs = np.clip(deaths, 0, None) / deaths.sum()
    draws = np.random.default_rng(seed).multinomial(total, probs, size=n_boot)
    boot = []
    for dr in draws:
        sb = (total - np.cumsum(dr[:-1])).astype(np.float64)
        ok = sel & (sb > 0)
        if ok.sum() >= 2:
            boot.append(_slope(sc.times, sb, total, ok))
    return float(rho), float(np.std(boot, ddof=1)) if len(boot) > 1 else math.nan


@dataclass
class EtaCurve:
    times: np.ndarray
    eta: np.ndarray
    stderr: np.ndarray
    survivors: np.ndarray
    replicates: int
    plateau: tuple
    value: float
    value_stderr: float


def estimate_eta(x, p, rho0: float, cfg: IntegratorConfig, replicates: int, stream: Stream,
                 horizon: float | None = None) -> EtaCurve:
    """``t -> exp(rho0 t) P_x(t < click)`` with binomial errors and its plateau.

    The plateau window is the second half of the range where at least 50
    paths survive; its value is the inverse-variance weighted mean there.
    """
    if rho0 < 0:
        raise ValueError("rho0 must be >= 0")
    horizon = cfg.t_max if horizon is None else horizon
    n_steps = cfg.steps_for(horizon)
    times, surv = [], []

    def record(step, run):
        times.append(step * cfg.dt)
        surv.append(int(run.alive.sum()))

    run_ensemble(x, p, cfg.dt, n_steps, stream, n=replicates, record_every=cfg.record_stride,
                 on_record=record)
    t = np.array(times)
    s = np.array(surv, dtype=np.float64)
    frac = s / replicates
    growth = np.exp(rho0 * t)
    eta = growth * frac
    se = growth * np.sqrt(frac * (1 - frac) / replicates)
    valid = np.flatnonzero(s >= STAT_FLOOR)
    if valid.size == 0:
        raise StatisticalFloor("fewer than 50 survivors at every recorded time")
    t_end = t[valid[-1]]
    plat = valid[t[valid] >= t_end / 2]
    if plat.size < 2:
        raise StatisticalFloor("survivors fell below 50 before a plateau formed")
    w_se = se[plat]
    if np.all(w_se > 0):
        w = 1.0 / w_se**2
        value = float((w * eta[plat]).sum() / w.sum())
        # plateau points share their paths, so keep the single-point error scale
        value_se = float(math.sqrt(plat.size / w.sum()))
    else:
        value = float(eta[plat].mean())
        value_se = float(w_se.max())
    return EtaCurve(t, eta, se, s, replicates, (float(t[plat[0]]), float(t[plat[-1]])), value, value_se)


@dataclass
class QProcessSample:
    times: np.ndarray
    paths: np.ndarray
    acceptance_rate: float
    accepted: int
    replicates: int

    @property
    def final_states(self) -> np.ndarray:
        return self.paths[:, -1, :]


def sample_qprocess(x0, p, t: float, guard: float, cfg: IntegratorConfig, replicates: int,
                    stream: Stream) -> QProcessSample:
    """Rejection sampler: keep paths alive at ``t + guard`` and truncate them to ``[0, t]``.

    Paths are recorded every ``cfg.record_stride`` steps up to ``t``.
    """
    if guard < 0:
        raise ValueError("guard must be >= 0")
    n_t = cfg.steps_for(t)
    n_total = cfg.steps_for(t + guard)
    stride = cfg.record_stride
    rec_times, rec = [], []

    def record(step, run):
        if step <= n_t:
            rec_times.append(step * cfg.dt)
            rec.append(run.states.copy())

    if n_t % stride:
        raise ValueError("t must be a multiple of record_stride * dt")
    run = run_ensemble(x0, p, cfg.dt, n_t, stream, n=replicates, record_every=stride, on_record=record)
    if n_total > n_t:
        run2 = run_ensemble(run.states, p, cfg.dt, n_total - n_t, stream, ids=run.ids, step0=n_t)
        alive = run.alive & run2.alive
    else:
        alive = run.alive
    acc = int(alive.sum())
    if acc < STAT_FLOOR:
        raise StatisticalFloor(f"only {acc} accepted paths")
    paths = np.stack(rec, axis=1)[alive]
    return QProcessSample(np.array(rec_times), paths, acc / replicates, acc, replicates)


def beta_sample(nu_sample: np.ndarray, p, cfg: IntegratorConfig, horizon: float, stream: Stream) -> np.ndarray:
    """Points of ``nu_sample`` whose independent continuation survives ``horizon``.

    Survival to a long horizon from ``y`` is proportional to the survival
    capacity at ``y``, so the kept points sample ``eta * nu`` normalized.
    """
    run = run_ensemble(nu_sample, p, cfg.dt, cfg.steps_for(horizon), stream)
    if run.alive.sum() < STAT_FLOOR:
        raise StatisticalFloor("too few survivors to represent the Q-process invariant law")
    return np.asarray(nu_sample)[run.alive]


@dataclass
class PushforwardReport:
    tv: TVReport
    survival_fraction: float
    n_input: int
    n_output: int
    delta_t: float

    @property
    def value(self) -> float:
        return self.tv.tv


def qsd_pushforward_check(q, p, delta_t: float, cfg: IntegratorConfig, stream: Stream,
                          n_samples: int | None = None, bins: int = DEFAULT_BINS) -> PushforwardReport:
    """Evolve the QSD sample by ``delta_t`` conditioned on survival and compare on ``(X0, M1)``.

    ``q`` is a :class:`QsdEstimate` or a raw ``(n, d+1)`` sample.
    """
    sample = q.sample if isinstance(q, QsdEstimate) else as_array(q)
    if n_samples is not None and n_samples < sample.shape[0]:
        idx = np.sort(stream.generator(7).choice(sample.shape[0], n_samples, replace=False))
        sample = sample[idx]
    n_steps = cfg.steps_for(delta_t)
    if n_steps == 0:
        out = sample
        frac = 1.0
    else:
        run = run_ensemble(sample, p, cfg.dt, n_steps, stream)
        if not run.alive.any():
            raise Extinct("no particle survived the pushforward")
        out = run.states[run.alive]
        frac = float(run.alive.mean())
    rep = binned_tv(summary_x0_m1(sample), summary_x0_m1(out), bins)
    return PushforwardReport(rep, frac, sample.shape[0], out.shape[0], delta_t)


def resample_from(sample: np.ndarray, n: int, stream: Stream, block: int = 0) -> np.ndarray:
    """``n`` draws with replacement from a pooled QSD sample."""
    idx = stream.generator(block).integers(0, sample.shape[0], size=n)
    return sample[idx].copy()
