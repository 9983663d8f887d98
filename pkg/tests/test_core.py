from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ratchet_qsd import core
from ratchet_qsd.core import (
    ModelParams,
    Params,
    Profile,
    aggregated_m1,
    delta,
    deterministic_flow,
    drift_aggregated,
    drift_full,
    moment,
    moment_drift,
    moment_qv,
    poisson_profile,
    project_pi_k,
    validate_profile,
    wf_covariance,
)
from ratchet_qsd.errors import InvalidK, NegativeEntry, NotNormalized, StepTooLarge


def random_states(rng, n, dim):
    return rng.dirichlet(np.full(dim, 0.7), size=n)


@st.composite
def simplex_states(draw, max_dim=12):
    dim = draw(st.integers(2, max_dim))
    w = draw(st.lists(st.floats(0.0, 1.0), min_size=dim, max_size=dim).filter(lambda v: sum(v) > 1e-3))
    w = np.array(w)
    return w / w.sum()


def test_params_validation():
    with pytest.raises(ValueError):
        Params(0.0, 1.0, 5)
    with pytest.raises(ValueError):
        Params(1.0, -1.0, 5)
    with pytest.raises(ValueError):
        Params(1.0, 1.0, 0)
    p = Params(0.5, 2.0, 10)
    assert p.n_star == 4.0 and p.dim == 11
    assert isinstance(core.model_params(0.0, 1.0, 3), ModelParams)
    assert isinstance(core.model_params(1.0, 1.0, 3), Params)


def test_profile_validation():
    assert validate_profile([0.25, 0.75]).d == 1
    with pytest.raises(NegativeEntry):
        validate_profile([1.1, -0.1])
    with pytest.raises(NotNormalized):
        validate_profile([0.5, 0.4])
    # within the normalization tolerance
    validate_profile([0.5, 0.5 + 5e-10])
    x = delta(2, 4)
    assert x[2] == 1.0 and x.freqs.sum() == 1.0
    with pytest.raises(ValueError):
        x.freqs[0] = 1.0


def test_moment_examples():
    x = Profile([0.5, 0.25, 0.25])
    assert moment(x, 1) == pytest.approx(0.75)
    assert moment(x, 2) == pytest.approx(1.25)
    assert moment(delta(0, 5), 3) == 0.0
    with pytest.raises(ValueError):
        moment(x, 0)


def test_drift_at_delta0_is_pure_mutation():
    p = Params(1.0, 1.0, 4)
    b = drift_full(delta(0, 4), p)
    np.testing.assert_allclose(b, [-1.0, 1.0, 0.0, 0.0, 0.0], atol=1e-15)


def test_drift_saturated_top_class():
    # mass at class d cannot mutate further; selection is zero since M1 = d
    p = Params(1.0, 3.0, 4)
    np.testing.assert_array_equal(drift_full(delta(4, 4), p), np.zeros(5))


def test_aggregated_drift_k_equals_d_is_full():
    rng = np.random.default_rng(1)
    p = Params(0.7, 1.3, 6)
    x = random_states(rng, 50, 7)
    np.testing.assert_allclose(drift_aggregated(x, p, 6), drift_full(x, p), atol=1e-14)
    with pytest.raises(InvalidK):
        drift_aggregated(x, p, 0)
    with pytest.raises(InvalidK):
        drift_aggregated(x, p, 7)


def test_moment_drift_matches_linear_functional_of_drift():
    # M_k is linear in x, so its drift is sum_i i^k b_i(x) with no Ito correction
    rng = np.random.default_rng(2)
    for d in (1, 3, 8, 20):
        p = Params(0.9, 1.7, d)
        x = random_states(rng, 200, d + 1)
        i = np.arange(d + 1, dtype=float)
        for k in (1, 2, 3, 4):
            direct = drift_full(x, p) @ i**k
            np.testing.assert_allclose(moment_drift(x, p, k), direct, rtol=1e-11, atol=1e-11)


def test_moment_qv_matches_covariance_quadratic_form():
    rng = np.random.default_rng(3)
    x = random_states(rng, 100, 9)
    i = np.arange(9, dtype=float)
    for k in (1, 2, 3):
        c = i**k
        direct = np.einsum("ni,nij,nj->n", np.broadcast_to(c, x.shape), wf_covariance(x),
                           np.broadcast_to(c, x.shape))
        np.testing.assert_allclose(moment_qv(x, k), direct, rtol=1e-11, atol=1e-10)


def test_poisson_profile_is_equilibrium():
    for lam, alpha, d in ((1.0, 1.0, 15), (2.0, 1.0, 40), (3.0, 0.5, 60)):
        p = Params(alpha, lam, d)
        x = poisson_profile(p)
        assert np.max(np.abs(drift_full(x, p))) < 1e-12
        assert moment(x, 1) == pytest.approx(lam / alpha, rel=1e-10)


def test_poisson_profile_first_entries():
    x = poisson_profile(Params(1.0, 1.0, 15))
    assert x[0] == pytest.approx(np.exp(-1.0), rel=1e-14)
    assert x[1] == pytest.approx(np.exp(-1.0), rel=1e-14)
    assert x[2] == pytest.approx(np.exp(-1.0) / 2, rel=1e-14)


def test_project_pi_k():
    x = Profile([0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(project_pi_k(x, 2).freqs, [0.1, 0.2, 0.7])
    np.testing.assert_allclose(project_pi_k(x, 3).freqs, x.freqs)
    with pytest.raises(InvalidK):
        project_pi_k(x, 4)


def test_aggregated_m1():
    x = Profile([0.1, 0.2, 0.3, 0.4])
    assert aggregated_m1(x, 2) == pytest.approx(0.2 + 2 * 0.7)
    assert aggregated_m1(x, 3) == pytest.approx(moment(x, 1))


def test_deterministic_flow_reaches_poisson():
    p = Params(1.0, 2.0, 40)
    rng = np.random.default_rng(4)
    x0 = np.zeros(41)
    x0[:5] = rng.dirichlet(np.ones(5))
    tr = deterministic_flow(x0, p, 60.0, 0.01, record_stride=1000)
    assert np.max(np.abs(tr.states[-1] - poisson_profile(p).freqs)) < 1e-5


def test_deterministic_flow_step_too_large():
    p = Params(5.0, 20.0, 30)
    with pytest.raises(StepTooLarge):
        deterministic_flow(delta(0, 30), p, 5.0, 0.5)


@settings(max_examples=200, deadline=None)
@given(simplex_states(), st.floats(0.01, 5.0), st.floats(0.01, 5.0))
def test_drift_and_noise_zero_sum(x, alpha, lam):
    p = Params(alpha, lam, x.size - 1)
    assert abs(drift_full(x, p).sum()) < 1e-12
    cov = wf_covariance(x)
    assert np.max(np.abs(cov.sum(axis=1))) < 1e-12
    ev = np.linalg.eigvalsh(cov)
    assert ev.min() > -1e-12


@settings(max_examples=200, deadline=None)
@given(simplex_states(), st.integers(1, 4))
def test_holder_chain(x, k):
    mk = moment(x, k)
    assert moment(x, 1) * mk <= moment(x, k + 1) * (1 + 1e-12) + 1e-12


@settings(max_examples=100, deadline=None)
@given(simplex_states(), st.floats(0.01, 5.0), st.floats(0.01, 5.0), st.integers(1, 10))
def test_aggregated_drift_zero_sum(x, alpha, lam, k):
    d = x.size - 1
    p = Params(alpha, lam, d)
    k = min(k, d)
    assert abs(drift_aggregated(x, p, k).sum()) < 1e-12
