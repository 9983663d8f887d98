from __future__ import annotations

import numpy as np
import pytest

from ratchet_qsd import kernels
from ratchet_qsd.core import ModelParams, Params, delta, drift_full, moment_drift, poisson_profile
from ratchet_qsd.diffusion import (
    IntegratorConfig,
    euler_step,
    moment_drift_check,
    run_ensemble,
    simulate_aggregated_path,
    simulate_path,
)
from ratchet_qsd.errors import InvalidK, InvalidStart
from ratchet_qsd.rng import Stream

P = Params(1.0, 1.0, 15)


def interior(rng, n, dim):
    return rng.dirichlet(np.full(dim, 5.0), size=n)


def test_kernel_step_matches_numpy_step():
    rng = np.random.default_rng(0)
    x = interior(rng, 100, 16)
    z = rng.standard_normal(x.shape)
    ref, pre0 = euler_step(x, P, 1e-4, noise=z)
    y = np.empty(16)
    for r in range(100):
        p0, _, _ = kernels.euler_update(x[r], z[r], P.alpha, P.lam, P.d, 1e-4, y)
        np.testing.assert_allclose(y, ref[r], rtol=1e-13, atol=1e-15)
        assert p0 == pytest.approx(pre0[r], rel=1e-13)


def test_kernel_aggregated_step_matches_numpy():
    rng = np.random.default_rng(1)
    x = interior(rng, 20, 16)
    z = rng.standard_normal(x.shape)
    ref, _ = euler_step(x, P, 1e-4, noise=z, k=4)
    y = np.empty(16)
    for r in range(20):
        kernels.euler_update(x[r], z[r], P.alpha, P.lam, 4, 1e-4, y)
        np.testing.assert_allclose(y, ref[r], rtol=1e-13, atol=1e-15)


def test_run_ensemble_uses_stream_normals():
    rng = np.random.default_rng(2)
    x = interior(rng, 8, 16)
    s = Stream.derive(1, "step")
    run = run_ensemble(x, P, 1e-3, 1, s, ids=np.arange(10, 18))
    z = s.normals([0], np.arange(10, 18), 16)[0]
    ref, _ = euler_step(x, P, 1e-3, noise=z)
    np.testing.assert_allclose(run.states, ref, rtol=1e-13, atol=1e-15)


def test_run_ensemble_order_and_thread_invariance():
    x = np.tile(poisson_profile(P).freqs, (600, 1))
    s = Stream.derive(11, "perm")
    a = run_ensemble(x, P, 1e-3, 300, s, threads=1)
    perm = np.random.default_rng(3).permutation(600)
    b = run_ensemble(x[perm], P, 1e-3, 300, s, ids=np.arange(600)[perm], threads=3)
    np.testing.assert_array_equal(a.states[perm], b.states)
    np.testing.assert_array_equal(a.click_step[perm], b.click_step)
    np.testing.assert_array_equal(a.alive[perm], b.alive)


def test_split_runs_equal_one_run():
    x = np.tile(poisson_profile(P).freqs, (50, 1))
    s = Stream.derive(4, "split")
    whole = run_ensemble(x, P, 1e-3, 200, s, absorb=False)
    first = run_ensemble(x, P, 1e-3, 120, s, absorb=False)
    second = run_ensemble(first.states, P, 1e-3, 80, s, step0=120, absorb=False)
    np.testing.assert_array_equal(whole.states, second.states)


def test_level_one_step_sums_fine_normals():
    rng = np.random.default_rng(5)
    x = interior(rng, 4, 16)
    s = Stream.derive(2, "level")
    run = run_ensemble(x, P, 2e-3, 1, s, level=1)
    z = s.normals([0, 1], np.arange(4), 16)
    ref, _ = euler_step(x, P, 2e-3, noise=(z[0] + z[1]) / np.sqrt(2))
    np.testing.assert_allclose(run.states, ref, rtol=1e-13, atol=1e-15)


def test_neutral_corner_is_absorbing():
    p = ModelParams(0.0, 0.0, 5)
    for j in range(6):
        run = run_ensemble(delta(j, 5), p, 1e-3, 100, Stream.derive(0, "corner"), n=3, absorb=False)
        np.testing.assert_array_equal(run.states, np.tile(delta(j, 5).freqs, (3, 1)))


def test_simulate_path_click_and_censoring():
    cfg = IntegratorConfig(dt=1e-3, t_max=20.0, record_stride=10)
    s = Stream.derive(8, "path")
    tr = simulate_path(poisson_profile(P), P, cfg, s)
    assert tr.click_time is not None and 0 < tr.click_time <= 20.0
    assert tr.states[-1][0] == 0.0
    assert tr.times[-1] == pytest.approx(tr.click_time)
    assert np.all(np.diff(tr.times) > 0)
    np.testing.assert_allclose(tr.states.sum(axis=1), 1.0, atol=1e-12)
    short = simulate_path(poisson_profile(P), P, cfg.with_(t_max=1e-3), s)
    assert short.censored or short.click_time == pytest.approx(1e-3)
    with pytest.raises(InvalidStart):
        simulate_path(delta(1, 15), P, cfg, s)


def test_aggregated_path_with_k_equal_d_matches_full():
    cfg = IntegratorConfig(dt=1e-3, t_max=2.0, record_stride=50)
    s = Stream.derive(9, "agg")
    a = simulate_path(poisson_profile(P), P, cfg, s, particle=3)
    b = simulate_aggregated_path(poisson_profile(P), P, 15, cfg, s, particle=3)
    np.testing.assert_array_equal(a.states, b.states)
    with pytest.raises(InvalidK):
        simulate_aggregated_path(poisson_profile(P), P, 16, cfg, s)


def test_moment_drift_check_small():
    x = np.array([0.4, 0.3, 0.2, 0.1])
    p = Params(1.0, 1.0, 3)
    for k in (1, 2):
        rep = moment_drift_check(x, p, k, 20000, 1e-4, np.random.default_rng(k))
        assert abs(rep.drift_z()) < 5
        assert abs(rep.qv_z()) < 5


def test_integrator_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig(dt=0.0)
    with pytest.raises(ValueError):
        IntegratorConfig(dt=1e-2, t_max=1e-3)
    with pytest.raises(ValueError):
        IntegratorConfig(click_mode="post_clip")
    assert IntegratorConfig(dt=1e-3, t_max=2.0).n_steps == 2000


def test_zero_noise_step_is_forward_euler():
    x = np.array([0.4, 0.3, 0.2, 0.1])
    p = Params(1.0, 2.0, 3)
    y, _ = euler_step(x, p, 1e-3, noise=np.zeros(4))
    np.testing.assert_allclose(y, x + 1e-3 * drift_full(x, p), rtol=1e-14)


def test_delta0_without_mutation_is_fixed():
    p = ModelParams(1.0, 0.0, 5)
    for j in range(6):
        y, _ = euler_step(delta(j, 5), p, 1e-2, np.random.default_rng(j))
        np.testing.assert_array_equal(y.freqs, delta(j, 5).freqs)


def test_fast_click_from_tiny_fittest_class():
    # near 0 the fittest class behaves like dX = -lam X dt + sqrt(X) dW, which is
    # absorbed by time t with probability exp(-2 lam x / (exp(lam t) - 1))
    p = Params(0.1, 20.0, 5)
    dt, n = 1e-3, 50
    x = np.zeros(6)
    x[0] = dt * p.lam / 10
    x[1] = 1 - x[0]
    feller = np.exp(-2 * p.lam * x[0] / np.expm1(p.lam * n * dt))
    coarse = run_ensemble(x, p, dt, n, Stream.derive(0, "fast"), n=1000)
    fine = run_ensemble(x, p, dt / 10, 10 * n, Stream.derive(0, "fast-fine"), n=1000)
    for run in (coarse, fine):
        frac = np.mean(run.click_step > 0)
        assert frac > 0.9
        assert abs(frac - feller) < 4 * np.sqrt(feller * (1 - feller) / 1000)


def test_neutral_wright_fisher_absorption_symmetry():
    p = ModelParams(0.0, 0.0, 1)
    run = run_ensemble([0.5, 0.5], p, 1e-3, 12000, Stream.derive(1, "wf"), n=10000)
    lost = np.mean(run.click_step > 0)
    assert abs(lost - 0.5) < 3 * np.sqrt(0.25 / 10000)


def test_moment_drift_corner_and_two_class_examples():
    p = Params(0.7, 1.3, 4)
    rep = moment_drift_check(delta(0, 4), p, 2, 100, 1e-3, np.random.default_rng(0))
    assert rep.analytic_drift == pytest.approx(p.lam)
    assert rep.analytic_qv == 0.0
    assert rep.drift_z() == 0.0 and rep.qv_z() == 0.0
    p1 = Params(0.7, 1.3, 1)
    assert moment_drift(np.array([0.5, 0.5]), p1, 1) == pytest.approx(-0.7 / 4 + 1.3 / 2)


def test_moment_drift_interior_k2_d10():
    rng = np.random.default_rng(7)
    x = rng.dirichlet(np.full(11, 4.0))
    rep = moment_drift_check(x, Params(1.0, 1.0, 10), 2, 100_000, 1e-4, rng)
    assert abs(rep.drift_z()) < 5


@pytest.mark.xfail(strict=True, reason="square-root noise drives small tail classes negative on most steps")
def test_clipping_is_rare():
    p = Params(1.0, 1.0, 20)
    x = np.tile(poisson_profile(p).freqs, (200, 1))
    run = run_ensemble(x, p, 1e-3, 1000, Stream.derive(0, "clip"))
    assert run.clip_fraction < 0.01


@pytest.mark.xfail(strict=True, reason="clipping adds mass to classes far below dt, inflating M1")
def test_neutral_mean_m1_is_linear():
    # with alpha = 0 the M1 drift is lam * (1 - x_d) and the noise is a martingale,
    # so E[M1(t)] = lam * t while class d holds negligible mass
    p = ModelParams(0.0, 1.0, 15)
    run = run_ensemble(delta(0, 15), p, 1e-3, 1000, Stream.derive(0, "neutral"), n=2000, absorb=False)
    m1 = run.states @ np.arange(16.0)
    assert abs(m1.mean() - 1.0) < 5 * m1.std(ddof=1) / np.sqrt(m1.size)
