"""Observables of metastability between clicks.

Relaxation and correlation decay of the conditioned dynamics, moment
tightness across truncation levels, the autonomy of the aggregated
coordinates, the discrete-to-diffusion scaling check and click-time
statistics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Profile, aggregated_m1, as_array, project_pi_k_batch, raw_moment
from .diffusion import IntegratorConfig, run_ensemble
from .discrete import DiscreteParams, run_batch
from .errors import NoDecayWindow, StatisticalFloor
from .qsd import STAT_FLOOR, QsdEstimate, estimate_qsd, resample_from
from .rng import Stream
from .stats import DEFAULT_BINS, Histogram2D, ks_2samp, ks_exponential, summary_x0_m1, tv_from_counts

CORR_THRESHOLD = 0.1


def _grid_steps(t_grid, dt) -> tuple[np.ndarray, int]:
    steps = np.rint(np.asarray(t_grid, dtype=np.float64) / dt).astype(np.int64)
    if np.any(np.diff(steps) <= 0) or steps[0] < 0:
        raise ValueError("t_grid must be increasing and nonnegative")
    stride = int(np.gcd.reduce(steps[steps > 0])) if np.any(steps > 0) else 1
    return steps, stride


def record_on_grid(x0, p, cfg: IntegratorConfig, t_grid, stream: Stream, fn, *, n=None,
                   absorb=True, k=None):
    """Run paths and call ``fn(index, states, alive)`` at every grid time."""
    steps, stride = _grid_steps(t_grid, cfg.dt)
    wanted = {int(s): i for i, s in enumerate(steps)}

    def rec(step, run):
        if step in wanted:
            fn(wanted[step], run.states, run.alive)

    return run_ensemble(x0, p, cfg.dt, int(steps[-1]), stream, n=n, k=k, absorb=absorb,
                        record_every=stride, on_record=rec)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if a.size < 2:
        return math.nan
    if np.array_equal(a, b):
        return 1.0
    ca = a - a.mean()
    cb = b - b.mean()
    va = ca @ ca
    vb = cb @ cb
    if va == 0 or vb == 0:
        return math.nan
    return float(np.clip((ca @ cb) / math.sqrt(va * vb), -1.0, 1.0))


@dataclass
class CorrelationSeries:
    times: np.ndarray
    ks: tuple
    corr: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    survival: np.ndarray

    def crossing_time(self, k: int, threshold: float = CORR_THRESHOLD) -> float:
        """First grid time with ``|corr| < threshold`` (``inf`` if none)."""
        row = self.corr[self.ks.index(k)]
        below = np.flatnonzero(np.abs(row) < threshold)
        return float(self.times[below[0]]) if below.size else math.inf


def correlation_decay(qsd, p, ks, t_grid, cfg: IntegratorConfig, replicates: int, stream: Stream,
                      *, min_survival: float = 0.9, n_boot: int = 200) -> CorrelationSeries:
    """Correlation of ``X_k(t)`` with ``X_0(0)`` for paths started from the QSD sample.

    Only paths alive at ``t`` enter the estimate at ``t`` (Pearson coefficient
    over survivors).  The grid may not extend past the time where the
    surviving fraction drops below ``min_survival``.  Bands are 2.5-97.5%
    bootstrap quantiles over paths.
    """
    if replicates < 1000:
        raise StatisticalFloor("correlation_decay needs at least 1000 replicates")
    sample = qsd.sample if isinstance(qsd, QsdEstimate) else as_array(qsd)
    ks = tuple(int(k) for k in ks)
    x = resample_from(sample, replicates, stream)
    x00 = x[:, 0].copy()
    T = len(t_grid)
    taken = np.full((T, replicates, len(ks)), np.nan)
    alive_at = np.zeros((T, replicates), dtype=bool)

    def fn(i, states, alive):
        alive_at[i] = alive
        taken[i] = states[:, ks]

    record_on_grid(x, p, cfg, t_grid, stream, fn)
    survival = alive_at.mean(axis=1)
    if np.any(survival < min_survival):
        bad = np.asarray(t_grid)[survival < min_survival][0]
        raise StatisticalFloor(f"survival {survival.min():.3f} below {min_survival} by t = {bad:g}")
    corr = np.empty((len(ks), T))
    for i in range(T):
        a = alive_at[i]
        for j in range(len(ks)):
            corr[j, i] = _pearson(taken[i, a, j], x00[a])
    rng = stream.generator(11)
    boot = np.empty((n_boot, len(ks), T))
    for b in range(n_boot):
        idx = rng.integers(0, replicates, size=replicates)
        for i in range(T):
            sel = idx[alive_at[i, idx]]
            for j in range(len(ks)):
                boot[b, j, i] = _pearson(taken[i, sel, j], x00[sel])
    lower, upper = np.nanquantile(boot, [0.025, 0.975], axis=0)
    return CorrelationSeries(np.asarray(t_grid, dtype=np.float64), ks, corr, lower, upper, survival)


@dataclass
class RelaxationFit:
    gamma: float
    stderr: float
    times: np.ndarray
    tv: np.ndarray
    tv_raw: np.ndarray
    tv_null: np.ndarray
    window: np.ndarray
    n_boot: int

    @property
    def t_relax(self) -> float:
        """Relaxation-time proxy ``1 / gamma`` (an upper-bound proxy, see module notes)."""
        return 1.0 / self.gamma

    @property
    def t_relax_stderr(self) -> float:
        return self.stderr / self.gamma**2


def _fit_decay(times, tv, lo, hi):
    sel = (tv >= lo) & (tv <= hi)
    if sel.sum() < 3:
        return math.nan, sel
    slope, _ = np.polyfit(times[sel], np.log(tv[sel]), 1)
    return -slope, sel


def relaxation_rate_fit(x_a, x_b, p, t_grid, cfg: IntegratorConfig, replicates: int, stream: Stream,
                        *, bins: int = DEFAULT_BINS, window=(0.02, 0.5), n_boot: int = 100) -> RelaxationFit:
    """Exponential decay rate of the binned TV between two conditioned laws.

    At each grid time the survivors from ``x_a`` and from ``x_b`` are compared
    on the ``(X0, M1)`` grid; the floor-corrected TV is fitted by least
    squares in log scale where it lies inside ``window``.
    """
    for x in (x_a, x_b):
        if not as_array(x)[0] > 0:
            raise ValueError("both starting profiles need x0 > 0")
    T = len(t_grid)
    summ = {}
    alive = {}
    for name, x0, tag in (("a", x_a, "relax-a"), ("b", x_b, "relax-b")):
        s_arr = np.empty((T, replicates, 2))
        al = np.zeros((T, replicates), dtype=bool)

        def fn(i, states, alv, s_arr=s_arr, al=al):
            s_arr[i] = summary_x0_m1(states)
            al[i] = alv

        record_on_grid(x0, p, cfg, t_grid, stream.child(tag), fn, n=replicates)
        summ[name], alive[name] = s_arr, al
    if min(alive["a"].sum(axis=1).min(), alive["b"].sum(axis=1).min()) < STAT_FLOOR:
        raise StatisticalFloor("fewer than 50 survivors at some grid time")
    times = np.asarray(t_grid, dtype=np.float64)

    def series(ia, ib):
        raw, null = np.empty(T), np.empty(T)
        for i in range(T):
            a = summ["a"][i, ia][alive["a"][i, ia]]
            b = summ["b"][i, ib][alive["b"][i, ib]]
            grid = Histogram2D.grid(np.concatenate([a, b]), bins)
            rep = tv_from_counts(grid.counts(a), grid.counts(b))
            raw[i], null[i] = rep.raw, rep.null
        return raw, null

    full = np.arange(replicates)
    raw, null = series(full, full)
    tv = np.maximum(raw - null, 0.0)
    gamma, sel = _fit_decay(times, tv, *window)
    if not (gamma > 0):
        raise NoDecayWindow("TV shows no exponential decay inside the fitting window")
    rng = stream.generator(13)
    boots = []
    for _ in range(n_boot):
        ia = rng.integers(0, replicates, size=replicates)
        ib = rng.integers(0, replicates, size=replicates)
        r_b, n_b = series(ia, ib)
        g, _ = _fit_decay(times, np.maximum(r_b - n_b, 0.0), *window)
        if math.isfinite(g):
            boots.append(g)
    se = float(np.std(boots, ddof=1)) if len(boots) > 1 else math.nan
    return RelaxationFit(float(gamma), se, times, tv, raw, null, sel, len(boots))


@dataclass
class TightnessRow:
    d: int
    quantile: float
    quantile_stderr: float
    rho0: float
    rho0_stderr: float
    m1_quantile: float
    holder_violations: int
    n_samples: int


def _block_quantile(snaps: np.ndarray, values_fn, q: float, n_batches: int):
    vals = [values_fn(s) for s in snaps]
    allv = np.concatenate(vals)
    point = float(np.quantile(allv, q))
    groups = np.array_split(np.arange(len(vals)), min(n_batches, len(vals)))
    per = [np.quantile(np.concatenate([vals[i] for i in g]), q) for g in groups]
    se = float(np.std(per, ddof=1) / math.sqrt(len(per))) if len(per) > 1 else math.nan
    return point, se


def moment_tightness_scan(p_base, d_list, k: int, quantile: float, cfg: IntegratorConfig,
                          stream: Stream, *, n_particles: int = 2000, horizon: float = 40.0,
                          burn_in: float = 0.5, n_batches: int = 10) -> list[TightnessRow]:
    """Quantile of ``M_k`` and the clicking rate under the Fleming-Viot QSD for each ``d``."""
    d_list = [int(d) for d in d_list]
    if any(b <= a for a, b in zip(d_list, d_list[1:])):
        raise ValueError("d_list must be increasing")
    if not 0 < quantile < 1:
        raise ValueError("quantile must lie in (0, 1)")
    rows = []
    for d in d_list:
        p = p_base.with_d(d)
        q = estimate_qsd(p, cfg, n_particles, horizon, stream.child("tightness", d), burn_in=burn_in)
        snaps = q.snapshots()
        val, se = _block_quantile(snaps, lambda s: raw_moment(s, k), quantile, n_batches)
        m1q, _ = _block_quantile(snaps, lambda s: raw_moment(s, 1), quantile, n_batches)
        m1 = raw_moment(q.sample, 1)
        m3 = raw_moment(q.sample, 3)
        viol = int(np.sum(m1 > np.cbrt(m3) * (1 + 1e-12) + 1e-12))
        rows.append(TightnessRow(d, val, se, q.rho0, q.rho0_stderr, m1q, viol, q.sample.shape[0]))
    return rows


@dataclass
class AutonomyReport:
    pvalues: dict
    statistics: dict
    n_tests: int
    replicates: int
    full_dynamics: bool

    @property
    def min_p(self) -> float:
        return min(self.pvalues.values())

    @property
    def corrected_min_p(self) -> float:
        return min(1.0, self.min_p * self.n_tests)

    def rejects(self, level: float = 0.01) -> bool:
        return self.corrected_min_p < level


def assemble_profile(x_head, tail) -> Profile:
    return Profile(np.concatenate([np.asarray(x_head, dtype=np.float64), np.asarray(tail, dtype=np.float64)]))


def pi_k_autonomy_test(x_head, tail_a, tail_b, p, k: int, t: float, cfg: IntegratorConfig,
                       replicates: int, stream: Stream, *, full: bool = False) -> AutonomyReport:
    """Two-sample KS tests on ``pi_k(X_t)`` and ``M1^(k)(X_t)`` from two tails.

    ``x_head`` holds classes ``0..k-1``; ``tail_a``/``tail_b`` hold the masses
    of classes ``k..d``.  The aggregated dynamics is simulated unless
    ``full`` is set.  Paths run through clicks, so the compared law is the
    full law at ``t``.
    """
    x_head = np.asarray(x_head, dtype=np.float64)
    if x_head.size != k:
        raise ValueError("x_head must hold exactly k entries")
    xa = assemble_profile(x_head, tail_a)
    xb = assemble_profile(x_head, tail_b)
    if xa.d != p.d or xb.d != p.d:
        raise ValueError("assembled profiles must have d + 1 entries")
    if replicates < STAT_FLOOR:
        raise StatisticalFloor("too few replicates for a KS test")
    kk = None if full else k
    n_steps = cfg.steps_for(t)
    ends = []
    for x0, tag in ((xa, "auto-a"), (xb, "auto-b")):
        run = run_ensemble(x0, p, cfg.dt, n_steps, stream.child(tag), n=replicates, k=kk, absorb=False)
        ends.append(run.states)
    pa, pb = project_pi_k_batch(ends[0], k), project_pi_k_batch(ends[1], k)
    pvals, stats = {}, {}
    for i in range(k + 1):
        stats[f"pi{i}"], pvals[f"pi{i}"] = ks_2samp(pa[:, i], pb[:, i])
    stats["m1k"], pvals["m1k"] = ks_2samp(aggregated_m1(ends[0], k), aggregated_m1(ends[1], k))
    return AutonomyReport(pvals, stats, len(pvals), replicates, full)


def autonomy_null_calibration(x_head, tail, p, k: int, t: float, cfg: IntegratorConfig,
                              replicates: int, repetitions: int, stream: Stream,
                              level: float = 0.01) -> tuple[float, list[float]]:
    """Rejection rate of :func:`pi_k_autonomy_test` when both tails coincide."""
    ps = []
    for r in range(repetitions):
        rep = pi_k_autonomy_test(x_head, tail, tail, p, k, t, cfg, replicates, stream.child("null", r))
        ps.append(rep.corrected_min_p)
    return float(np.mean(np.array(ps) < level)), ps


@dataclass
class CompareReport:
    n: int
    t: float
    generations: int
    discrete: dict
    diffusion: dict
    rel_gap_m1: float
    rel_gap_m1_stderr: float
    abs_gap_m1: float
    abs_gap_m1_stderr: float
    rel_gap_x0: float
    info: dict = field(default_factory=dict)


def _mean_var(v: np.ndarray) -> dict:
    n = v.size
    m = float(v.mean())
    var = float(v.var(ddof=1))
    c = v - m
    var_se = math.sqrt(max(np.mean(c**4) - np.mean(c**2) ** 2, 0.0) / n)
    return {"mean": m, "mean_se": math.sqrt(var / n), "var": var, "var_se": var_se}


def discrete_vs_diffusion_compare(dp: DiscreteParams, p, t: float, cfg: IntegratorConfig,
                                  replicates: int, stream: Stream, *, x0=None,
                                  block: int = 250) -> CompareReport:
    """Compare ``N t`` discrete generations with diffusion time ``t``.

    Requires ``dp.alpha = p.alpha / N`` and ``dp.lam = p.lam / N``.  The
    diffusion is run through clicks so both sides describe the unconditioned
    law.  Reports moments of ``M1`` and ``X0`` at the matched time.
    """
    N = dp.n
    for a, b, name in ((dp.alpha, p.alpha / N, "alpha"), (dp.lam, p.lam / N, "lambda")):
        if abs(a - b) > 1e-12 * max(1.0, abs(b)):
            raise ValueError(f"discrete {name} must equal the diffusion {name} divided by N")
    start = np.zeros(p.d + 1)
    start[0] = 1.0
    start = start if x0 is None else as_array(x0)
    counts0 = np.rint(start * N).astype(np.int64)
    if counts0.sum() != N or np.abs(counts0 / N - start).max() > 1e-12:
        raise ValueError("x0 * N must be an integer vector")
    gens = int(round(N * t))
    finals = []
    for b0 in range(0, replicates, block):
        B = min(block, replicates - b0)
        c = run_batch(np.tile(counts0, (B, 1)), dp, gens, stream.generator(b0 // block))
        i = np.arange(c.shape[1], dtype=np.float64)
        finals.append(np.stack([c[:, 0] / N, c @ i / N], axis=1))
    disc = np.concatenate(finals)
    run = run_ensemble(start, p, cfg.dt, cfg.steps_for(t), stream.child("diffusion"), n=replicates,
                       absorb=False)
    diff = summary_x0_m1(run.states)
    dm, sm = _mean_var(disc[:, 1]), _mean_var(diff[:, 1])
    dx, sx = _mean_var(disc[:, 0]), _mean_var(diff[:, 0])
    gap = dm["mean"] - sm["mean"]
    gap_se = math.hypot(dm["mean_se"], sm["mean_se"])
    denom = abs(sm["mean"])
    rel = abs(gap) / denom if denom > 0 else math.nan
    rel_se = gap_se / denom if denom > 0 else math.nan
    rel_x0 = abs(dx["mean"] - sx["mean"]) / abs(sx["mean"]) if sx["mean"] else math.nan
    return CompareReport(
        N, t, gens, {"m1": dm, "x0": dx}, {"m1": sm, "x0": sx}, rel, rel_se, abs(gap), gap_se, rel_x0,
    )


@dataclass
class ClickStats:
    n: int
    mean: float
    median: float
    quantiles: dict
    ks_statistic: float
    ks_pvalue: float
    t_click: float
    t_relax: float | None
    metastable: bool | None


def click_statistics(paths, t_relax: float | None = None) -> ClickStats:
    """Summary of observed click times and a KS test against Exp(1/mean).

    ``paths`` is a sequence of trajectories or an array of click times;
    censored entries (``None`` or ``inf``) are dropped.  The metastable flag
    is set when ``t_relax < t_click / 10``.
    """
    vals = []
    for pth in paths:
        c = getattr(pth, "click_time", pth)
        if c is not None and math.isfinite(c):
            vals.append(float(c))
    v = np.asarray(vals)
    if v.size < 100:
        raise StatisticalFloor(f"only {v.size} click observations (need 100)")
    mean = float(v.mean())
    ks_d, ks_p = ks_exponential(v, 1.0 / mean)
    qs = {str(q): float(np.quantile(v, q)) for q in (0.05, 0.25, 0.5, 0.75, 0.95)}
    meta = None if t_relax is None else bool(t_relax < mean / 10)
    return ClickStats(v.size, mean, float(np.median(v)), qs, ks_d, ks_p, mean, t_relax, meta)


@dataclass
class ExperimentReport:
    """Scalar results of one experiment, keyed by the config digest that produced them."""

    name: str
    digest: str
    results: dict = field(default_factory=dict)
    stderr: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)

    def add(self, key: str, value, se=None) -> None:
        self.results[key] = value
        if se is not None:
            self.stderr[key] = se
