"""Command-line driver: ``ratchet-qsd <experiment> --config <path>``.

Each run writes three files into the output directory:

* ``summary.json``: estimates, standard errors, pass/fail flags, the config
  digest, the code version and ``schema_version``;
* ``series.csv``: the experiment's table (header row, reals with 17
  significant digits);
* ``config.json``: the resolved configuration.

Exit codes: 0 on success, 2 when a statistical floor is hit, 1 on any other
error (an ``error.json`` record is written when the output directory is
known).  Outputs depend only on the config, the seed and the code version,
never on the thread count or the wall clock.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .config import EXPERIMENTS, SCHEMA_VERSION, RunConfig, parse_config
from .core import Profile, delta, model_params, poisson_profile, raw_moment
from .diagnostics import (
    ExperimentReport,
    click_statistics,
    correlation_decay,
    discrete_vs_diffusion_compare,
    moment_tightness_scan,
    pi_k_autonomy_test,
    relaxation_rate_fit,
)
from .diffusion import IntegratorConfig, run_ensemble
from .discrete import DiscreteParams, run_batch
from .errors import ParseError, RatchetError, StatisticalFloor, ValidationError
from .parallel import set_threads
from .qsd import (
    SurvivalCurve,
    estimate_eta,
    estimate_qsd,
    estimate_rho0,
    qsd_pushforward_check,
    resample_from,
    sample_qprocess,
)
from .rng import Stream
from .stats import ks_exponential

CSV_DIGITS = 17


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), f".{CSV_DIGITS}g")
    return str(v)


def write_csv(path: str, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def _plain(obj):
    """JSON-safe copy; non-finite reals become ``null``."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def write_json(path: str, obj) -> None:
    text = json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")


# ---------------------------------------------------------------- helpers


def _params(cfg: RunConfig):
    return model_params(cfg.alpha, cfg.lam, cfg.d)


def _integrator(cfg: RunConfig) -> IntegratorConfig:
    return IntegratorConfig(dt=cfg.dt, t_max=cfg.t_max, record_stride=cfg.record_stride)


def _k(cfg: RunConfig):
    return cfg.k if cfg.model == "aggregated" else None


def _fleming_viot(cfg, p, ic, stream):
    if cfg.particles < 2:
        raise ValidationError("particles", "Fleming-Viot needs at least 2 particles")
    return estimate_qsd(p, ic, cfg.particles, cfg.horizon, stream.child("fv"),
                        burn_in=cfg.burn_in, snapshot_dt=cfg.snapshot_dt)


def _start(cfg, p, ic, stream, n: int):
    """``(n, d+1)`` starting states plus the QSD estimate when one was needed."""
    if cfg.x0 == "qsd":
        q = _fleming_viot(cfg, p, ic, stream)
        return resample_from(q.sample, n, stream.child("start")), q
    if cfg.x0 == "delta0":
        x = delta(0, cfg.d)
    elif cfg.x0 == "poisson":
        x = poisson_profile(p)
    else:
        try:
            x = Profile(np.array(cfg.x0))
        except ValueError as exc:
            raise ValidationError("x0", str(exc)) from None
    return np.tile(x.freqs, (n, 1)), None


def _moment_rows(t, states, alive):
    live = states[alive]
    if live.shape[0] == 0:
        return [t, math.nan, math.nan, math.nan, math.nan, 0]
    return [t, float(live[:, 0].mean()), float(raw_moment(live, 1).mean()),
            float(raw_moment(live, 2).mean()), float(raw_moment(live, 3).mean()), int(live.shape[0])]


SERIES_HEADER = ["time", "x0", "m1", "m2", "m3", "survivors"]


# ------------------------------------------------------------ experiments


def exp_simulate(cfg, rep, stream):
    p, ic = _params(cfg), _integrator(cfg)
    if cfg.model == "discrete":
        return _simulate_discrete(cfg, rep, stream)
    x, _ = _start(cfg, p, ic, stream, cfg.replicates)
    rows = []
    run = run_ensemble(x, p, ic.dt, ic.n_steps, stream.child("paths"), k=_k(cfg),
                       record_every=ic.record_stride,
                       on_record=lambda s, r: rows.append(_moment_rows(s * ic.dt, r.states, r.alive)))
    ct = run.click_times
    clicked = np.isfinite(ct)
    rep.add("click_fraction", float(clicked.mean()))
    rep.add("mean_click_time_clicked", float(ct[clicked].mean()) if clicked.any() else math.nan)
    rep.add("clip_fraction", run.clip_fraction)
    rep.add("unstable_fraction", run.unstable_fraction)
    rep.flags["clip_rarity"] = run.clip_fraction < 0.01
    return SERIES_HEADER, rows


def _simulate_discrete(cfg, rep, stream):
    N = cfg.population
    p = _params(cfg)
    dp = DiscreteParams(cfg.alpha / N, cfg.lam / N, N, cap=cfg.d)
    x, _ = _start(cfg, p, _integrator(cfg), stream, 1)
    counts0 = np.rint(x[0] * N).astype(np.int64)
    if counts0.sum() != N:
        raise ValidationError("x0", "x0 * population must be an integer vector")
    gens = int(round(N * cfg.t_max))
    R = cfg.replicates
    click = np.full(R, -1, dtype=np.int64)
    rows = []

    def on_gen(g, c):
        newly = (c[:, 0] == 0) & (click < 0)
        click[newly] = g
        if g % cfg.record_stride == 0 or g == gens:
            f = c / N
            rows.append(_moment_rows(g / N, f, click < 0))

    c0 = np.tile(counts0, (R, 1))
    rows.append(_moment_rows(0.0, c0 / N, np.ones(R, dtype=bool)))
    run_batch(c0, dp, gens, stream.child("discrete").generator(0), on_generation=on_gen)
    clicked = click >= 0
    rep.add("generations", gens)
    rep.add("click_fraction", float(clicked.mean()))
    rep.add("mean_click_time_clicked", float(click[clicked].mean() / N) if clicked.any() else math.nan)
    return SERIES_HEADER, rows


def _survival_check(cfg, p, ic, q, stream, rep):
    rho = q.rho0
    horizon = 25.0 / rho
    window = (0.5, 3.5 / rho)
    x = resample_from(q.sample, cfg.replicates, stream.child("fresh"))
    run = run_ensemble(x, p, ic.dt, ic.steps_for(horizon), stream.child("fresh-paths"))
    ct = run.click_times
    grid = np.arange(0, ic.steps_for(window[1]) + 1, ic.record_stride) * ic.dt
    sc = SurvivalCurve.from_click_times(ct, grid)
    slope, slope_se = estimate_rho0(sc, window, n_boot=cfg.n_boot)
    rep.add("rho0_survival_slope", slope, slope_se)
    gap = abs(slope - rho)
    rep.add("rho0_gap", gap, math.hypot(slope_se, q.rho0_stderr))
    rep.flags["rho0_agree"] = bool(gap < 2 * math.hypot(slope_se, q.rho0_stderr))
    obs = ct[np.isfinite(ct)]
    ks_d, ks_p = ks_exponential(obs, rho)
    rep.add("click_ks_statistic", ks_d)
    rep.add("click_ks_pvalue", ks_p)
    rep.add("censored_paths", int((~np.isfinite(ct)).sum()))
    rep.flags["click_exponential"] = bool(ks_p > 0.01)
    dead = ~run.alive
    if dead.any():
        post = run.states[dead]
        rep.add("post_click_m1_mean", float(raw_moment(post, 1).mean()))
        rep.add("post_click_x1_mean", float(post[:, 1].mean()))
        rep.add("poisson_m1_reference", 1.0 + cfg.lam / cfg.alpha)


def exp_qsd(cfg, rep, stream):
    p, ic = _params(cfg), _integrator(cfg)
    q = _fleming_viot(cfg, p, ic, stream)
    rep.add("rho0", q.rho0, q.rho0_stderr)
    rep.add("t_click", q.t_click, q.rho0_stderr / q.rho0**2)
    for kk, (m, se) in q.moments.items():
        rep.add(f"m{kk}", m, se)
    rep.add("pooled_samples", int(q.sample.shape[0]))
    if cfg.checks:
        push = qsd_pushforward_check(q, p, 1.0, ic, stream.child("pushforward"), bins=cfg.bins)
        rep.add("pushforward_tv", push.value)
        rep.add("pushforward_tv_raw", push.tv.raw)
        rep.add("pushforward_tv_null", push.tv.null)
        rep.flags["pushforward_tv"] = bool(push.value < 0.05)
        _survival_check(cfg, p, ic, q, stream, rep)
    rows = []
    stride = max(1, int(round(cfg.snapshot_dt / ic.dt)))
    for t, snap in zip(q.snapshot_times, q.snapshots()):
        step = int(round(t / ic.dt))
        restarts = int(q.restarts[max(0, step - stride):step].sum())
        rows.append(_moment_rows(float(t), snap, np.ones(snap.shape[0], dtype=bool))[:-1] + [restarts])
    return ["time", "x0", "m1", "m2", "m3", "restarts"], rows


def exp_eta(cfg, rep, stream):
    p, ic = _params(cfg), _integrator(cfg)
    q = _fleming_viot(cfg, p, ic, stream)
    cfg_start = cfg.x0 if cfg.x0 != "qsd" else "poisson"
    x, _ = _start(cfg.with_(x0=cfg_start), p, ic, stream, 1)
    curve = estimate_eta(x[0], p, q.rho0, ic, cfg.replicates, stream.child("eta"))
    rep.add("rho0", q.rho0, q.rho0_stderr)
    rep.add("eta", curve.value, curve.value_stderr)
    rep.add("plateau_start", curve.plateau[0])
    rep.add("plateau_end", curve.plateau[1])
    rows = [[t, int(s), e, se] for t, s, e, se in zip(curve.times, curve.survivors, curve.eta, curve.stderr)]
    return ["time", "survivors", "eta", "stderr"], rows


def exp_qprocess(cfg, rep, stream):
    p, ic = _params(cfg), _integrator(cfg)
    x, _ = _start(cfg, p, ic, stream, cfg.replicates)
    qs = sample_qprocess(x, p, cfg.t, cfg.guard, ic, cfg.replicates, stream.child("qprocess"))
    rep.add("acceptance_rate", qs.acceptance_rate)
    rep.add("accepted", qs.accepted)
    fin = qs.final_states
    rep.add("final_m1_mean", float(raw_moment(fin, 1).mean()),
            float(raw_moment(fin, 1).std(ddof=1) / math.sqrt(fin.shape[0])))
    rep.add("final_x0_mean", float(fin[:, 0].mean()),
            float(fin[:, 0].std(ddof=1) / math.sqrt(fin.shape[0])))
    alive = np.ones(qs.accepted, dtype=bool)
    rows = [_moment_rows(float(t), qs.paths[:, i, :], alive) for i, t in enumerate(qs.times)]
    return SERIES_HEADER, rows


def _grid(cfg):
    n = int(round(cfg.t_end / cfg.t_step))
    return np.arange(n + 1) * cfg.t_step


def exp_correlations(cfg, rep, stream):
    p, ic = _params(cfg), _integrator(cfg)
    q = _fleming_viot(cfg, p, ic, stream)
    series = correlation_decay(q, p, cfg.ks, _grid(cfg), ic, cfg.replicates, stream.child("corr"),
                               min_survival=cfg.min_survival, n_boot=cfg.n_boot)
    rep.add("rho0", q.rho0, q.rho0_stderr)
    rep.add("t_click", q.t_click)
    for kk in series.ks:
        tc = series.crossing_time(kk)
        rep.add(f"crossing_time_k{kk}", tc)
        rep.flags[f"crossing_k{kk}_before_half_t_click"] = bool(tc < q.t_click / 2)
    header = ["time", "survival"]
    for kk in series.ks:
        header += [f"corr_k{kk}", f"lower_k{kk}", f"upper_k{kk}"]
    rows = []
    for i, t in enumerate(series.times):
        row = [t, series.survival[i]]
        for j in range(len(series.ks)):
            row += [series.corr[j, i], series.lower[j, i], series.upper[j, i]]
        rows.append(row)
    return header, rows


def exp_relaxation(cfg, rep, stream):
    p, ic = _params(cfg), _integrator(cfg)
    x, _ = _start(cfg, p, ic, stream, 1)
    fit = relaxation_rate_fit(x[0], poisson_profile(p), p, _grid(cfg), ic, cfg.replicates,
                              stream.child("relax"), bins=cfg.bins, n_boot=cfg.n_boot)
    rep.add("gamma", fit.gamma, fit.stderr)
    rep.add("t_relax", fit.t_relax, fit.t_relax_stderr)
    rep.add("window_points", int(fit.window.sum()))
    rows = [[t, a, b, c, bool(w)] for t, a, b, c, w in zip(fit.times, fit.tv, fit.tv_raw, fit.tv_null, fit.window)]
    return ["time", "tv", "tv_raw", "tv_null", "in_window"], rows


def exp_tightness(cfg, rep, stream):
    p, ic = _params(cfg), _integrator(cfg)
    rows_t = moment_tightness_scan(p, cfg.d_list, cfg.moment_k, cfg.quantile, ic, stream.child("scan"),
                                   n_particles=cfg.particles, horizon=cfg.horizon, burn_in=cfg.burn_in)
    cols = ["d", "quantile", "quantile_stderr", "rho0", "rho0_stderr", "m1_quantile",
            "holder_violations", "n_samples"]
    table = [{c: getattr(r, c) for c in cols} for r in rows_t]
    rep.tables["tightness"] = table
    rep.flags["holder"] = all(r.holder_violations == 0 for r in rows_t)
    if len(rows_t) >= 2:
        a, b = rows_t[0], rows_t[-1]
        rep.flags["quantile_agree"] = bool(abs(a.quantile - b.quantile)
                                           < 2 * math.hypot(a.quantile_stderr, b.quantile_stderr))
        rep.flags["rho0_agree"] = bool(abs(a.rho0 - b.rho0) < 2 * math.hypot(a.rho0_stderr, b.rho0_stderr))
    return cols, [[row[c] for c in cols] for row in table]


def autonomy_inputs(cfg, p):
    k = cfg.k if cfg.k is not None else 3
    head = np.asarray(cfg.x_head) if cfg.x_head is not None else poisson_profile(p).freqs[:k]
    mass = 1.0 - head.sum()
    n_tail = cfg.d - k + 1
    if cfg.tail_a is not None:
        tail_a = np.asarray(cfg.tail_a)
    else:
        tail_a = np.zeros(n_tail)
        tail_a[0] = mass
    if cfg.tail_b is not None:
        tail_b = np.asarray(cfg.tail_b)
    else:
        tail_b = np.zeros(n_tail)
        tail_b[-1] = mass
    return k, head, tail_a, tail_b


def exp_autonomy(cfg, rep, stream):
    p, ic = _params(cfg), _integrator(cfg)
    k, head, tail_a, tail_b = autonomy_inputs(cfg, p)
    try:
        r = pi_k_autonomy_test(head, tail_a, tail_b, p, k, cfg.t, ic, cfg.replicates,
                               stream.child("autonomy"), full=cfg.full)
    except ValueError as exc:
        if isinstance(exc, RatchetError):
            raise
        raise ValidationError("x_head", str(exc)) from None
    rep.add("min_p", r.min_p)
    rep.add("corrected_min_p", r.corrected_min_p)
    rep.add("n_tests", r.n_tests)
    rep.flags["autonomy_not_rejected"] = not r.rejects(0.01)
    rows = [[name, r.statistics[name], r.pvalues[name]] for name in r.pvalues]
    return ["coordinate", "ks_statistic", "pvalue"], rows


def exp_compare(cfg, rep, stream):
    p, ic = _params(cfg), _integrator(cfg)
    N = cfg.population
    dp = DiscreteParams(cfg.alpha / N, cfg.lam / N, N, cap=cfg.d)
    x0 = None if cfg.x0 == "delta0" else _start(cfg, p, ic, stream, 1)[0][0]
    r = discrete_vs_diffusion_compare(dp, p, cfg.t, ic, cfg.replicates, stream.child("compare"), x0=x0)
    rep.add("rel_gap_m1", r.rel_gap_m1, r.rel_gap_m1_stderr)
    rep.add("abs_gap_m1", r.abs_gap_m1, r.abs_gap_m1_stderr)
    rep.add("rel_gap_x0", r.rel_gap_x0)
    rep.add("generations", r.generations)
    rep.flags["rel_gap_m1_below_10pct"] = bool(r.rel_gap_m1 < 0.1)
    rows = []
    for q in ("m1", "x0"):
        a, b = r.discrete[q], r.diffusion[q]
        rows.append([q, a["mean"], a["mean_se"], a["var"], a["var_se"], b["mean"], b["mean_se"], b["var"], b["var_se"]])
    header = ["quantity", "discrete_mean", "discrete_mean_se", "discrete_var", "discrete_var_se",
              "diffusion_mean", "diffusion_mean_se", "diffusion_var", "diffusion_var_se"]
    return header, rows


def exp_clickstats(cfg, rep, stream):
    p, ic = _params(cfg), _integrator(cfg)
    x, _ = _start(cfg, p, ic, stream, cfg.replicates)
    run = run_ensemble(x, p, ic.dt, ic.n_steps, stream.child("clicks"), k=_k(cfg))
    st = click_statistics(run.click_times)
    rep.add("n_clicks", st.n)
    rep.add("mean", st.mean)
    rep.add("median", st.median)
    rep.add("ks_statistic", st.ks_statistic)
    rep.add("ks_pvalue", st.ks_pvalue)
    rep.results["quantiles"] = st.quantiles
    rep.add("censored", int((~np.isfinite(run.click_times)).sum()))
    rep.flags["exponential"] = bool(st.ks_pvalue > 0.01)
    ct = np.sort(run.click_times[np.isfinite(run.click_times)])
    return ["rank", "click_time"], [[i, t] for i, t in enumerate(ct)]


RUNNERS = {
    "simulate": exp_simulate,
    "qsd": exp_qsd,
    "eta": exp_eta,
    "qprocess": exp_qprocess,
    "correlations": exp_correlations,
    "relaxation": exp_relaxation,
    "tightness": exp_tightness,
    "autonomy": exp_autonomy,
    "compare": exp_compare,
    "clickstats": exp_clickstats,
}
assert set(RUNNERS) == set(EXPERIMENTS)


def run(cfg: RunConfig, out_dir: str) -> int:
    """Run the configured experiment and write its artifacts; returns the exit code."""
    os.makedirs(out_dir, exist_ok=True)
    digest = cfg.digest()
    rep = ExperimentReport(cfg.experiment, digest)
    stream = Stream.derive(cfg.seed, cfg.experiment)
    set_threads(cfg.threads)
    try:
        header, rows = RUNNERS[cfg.experiment](cfg, rep, stream)
    except RatchetError as exc:
        _write_error(out_dir, exc, digest)
        return 2 if isinstance(exc, StatisticalFloor) else 1
    finally:
        set_threads(None)
    write_csv(os.path.join(out_dir, "series.csv"), header, rows)
    write_json(os.path.join(out_dir, "config.json"), cfg.resolved())
    write_json(os.path.join(out_dir, "summary.json"), {
        "schema_version": SCHEMA_VERSION,
        "experiment": rep.name,
        "config_digest": digest,
        "code_version": __version__,
        "results": rep.results,
        "stderr": rep.stderr,
        "flags": rep.flags,
        "tables": rep.tables,
    })
    return 0


def _write_error(out_dir, exc, digest=None) -> None:
    record = {
        "schema_version": SCHEMA_VERSION,
        "error": type(exc).__name__,
        "message": str(exc),
        "field": getattr(exc, "field", None),
        "line": getattr(exc, "line", None),
        "config_digest": digest,
        "code_version": __version__,
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_json(os.path.join(out_dir, "error.json"), record)
    print(json.dumps(_plain(record), sort_keys=True), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ratchet-qsd", description="Muller ratchet QSD experiments")
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", required=True, help="JSON config file")
    ap.add_argument("--out", help="output directory (default: config 'out' or ./out/<experiment>)")
    ap.add_argument("--seed", type=int, help="master seed, overrides the config")
    ap.add_argument("--threads", type=int, help="worker threads, overrides config and RATCHET_QSD_THREADS")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = args.out
    try:
        cfg = parse_config(args.config)
        if cfg.experiment is not None and cfg.experiment != args.experiment:
            raise ValidationError("experiment", f"config names {cfg.experiment!r}, command line {args.experiment!r}")
        over = {"experiment": args.experiment}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.threads is not None:
            over["threads"] = args.threads
        cfg = cfg.with_(**over)
    except (ParseError, ValidationError) as exc:
        _write_error(out, exc)
        return 1
    out = out or cfg.out or os.path.join("out", cfg.experiment)
    return run(cfg, out)


if __name__ == "__main__":
    sys.exit(main())
