import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ipha.core import (
    CONVERGED,
    DIVERGED,
    MAX_ITERS,
    SUBSOLVER_FAILURE,
    IphaParams,
    IphaState,
    actualize,
    compute_alpha,
    hedging_update,
    solve,
    step_vectors,
    stop_quantity,
    tolerance_check,
)
from ipha.errors import DegenerateStepError, ParameterError
from ipha.nash import counterexample_instance, sample_monotone_instance
from ipha.problem import AffineMapping, Orthant, SviInstance
from ipha.space import ScenarioSpace, inner_product, mr_norm, norm, project_M, project_N
from ipha.subsolvers import Certificate, SubsolverConfig, build_certificate

seeds = st.integers(0, 2**32 - 1)


def random_point(seed, r=None):
    _, inst, _ = sample_monotone_instance(seed % 5, 5, 2, 2)
    rng = np.random.default_rng(seed)
    sp = inst.space
    x = project_N(rng.uniform(0, 20, sp.shape), sp)
    w = project_M(rng.normal(scale=30, size=sp.shape), sp)
    r = r or float(rng.uniform(1, 60))
    state = IphaState(sp, x, w, r)
    Z = x + rng.normal(scale=rng.uniform(0.01, 5), size=sp.shape)
    return inst, state, build_certificate(inst, state, Z), rng


# -- single-step pieces ---------------------------------------------------------


def test_tolerance_check_examples():
    sp = ScenarioSpace.single_stage([0.5, 0.5], 1)
    state = IphaState(sp, np.array([[1.0], [1.0]]), np.array([[1.0], [-1.0]]), 2.0)
    w_hat = np.array([[0.0], [2.0]])
    delta = np.array([[0.1], [-0.1]])
    cert = Certificate(w_hat - delta, w_hat, delta)
    # x_hat = (-0.1, 2.1): P_N x_hat = 1, P_M x_hat = (-1.1, 1.1); P_N w_hat = 1, P_M w_hat = (-1, 1)
    v = step_vectors(state, cert)
    np.testing.assert_allclose(v.a, [[-1.0], [1.0]])
    np.testing.assert_allclose(v.b, [[-1.1], [1.1]])
    res = tolerance_check(state, cert, 0.1)
    assert res.delta_norm == pytest.approx(0.1)
    assert res.a_norm == pytest.approx(1.0) and res.b_norm == pytest.approx(1.1)
    assert res.accepted  # 0.01 <= 0.01 * (1 + 1.21)
    assert not tolerance_check(state, cert, 0.06).accepted
    assert stop_quantity(state, cert) == pytest.approx(1.1)
    # alpha = <A, B> / ||A||^2 = 1.1
    assert compute_alpha(state, cert) == pytest.approx(1.1)


@given(seeds)
def test_alpha_is_one_for_exact_certificates(seed):
    inst, state, _, _ = random_point(seed)
    cert = build_certificate(inst, state, state.x)
    exact = Certificate(cert.w_hat, cert.w_hat, np.zeros_like(cert.w_hat))
    assert compute_alpha(state, exact) == pytest.approx(1.0, rel=1e-12)


@given(seeds)
def test_alpha_matches_z_space_formula(seed):
    """alpha = r <v_hat, z - z_hat> / ||v_hat||^2 with v_hat = r A, since z moves by alpha A."""
    inst, state, cert, _ = random_point(seed)
    sp, r = state.space, state.r
    z = state.x - state.w / r
    pn_w = project_N(cert.w_hat, sp)
    pm_x = cert.x_hat - project_N(cert.x_hat, sp)
    z_hat = pn_w - pm_x - state.w / r
    v_hat = r * (state.x - project_N(cert.x_hat, sp) + project_M(cert.w_hat, sp))
    ref = r * inner_product(v_hat, z - z_hat, sp) / inner_product(v_hat, v_hat, sp)
    assert compute_alpha(state, cert) == pytest.approx(ref, rel=1e-9)
    np.testing.assert_allclose(step_vectors(state, cert).b, z - z_hat, atol=1e-9 * (1 + np.abs(z).max()))


@given(seeds, st.floats(0.0, 0.89))
def test_alpha_lower_bound_under_strengthened_test(seed, sigma):
    inst, state, cert, _ = random_point(seed)
    v = step_vectors(state, cert)
    if norm(cert.delta, state.space) <= sigma * norm(v.b, state.space):
        assert compute_alpha(state, cert, sigma) >= 1 / (1 + sigma) - 1e-9


@given(seeds)
def test_actualize_keeps_subspaces(seed):
    inst, state, cert, rng = random_point(seed)
    new = actualize(state, cert, float(rng.uniform(0.5, 1.5)), compute_alpha(state, cert))
    sp = state.space
    assert norm(new.x - project_N(new.x, sp), sp) <= 1e-12 * (1 + norm(new.x, sp))
    assert norm(project_N(new.w, sp), sp) <= 1e-12 * (1 + norm(new.w, sp))
    assert new.k == state.k + 1


@given(seeds)
def test_exact_step_reduces_to_hedging_update(seed):
    inst, state, cert, _ = random_point(seed)
    exact = Certificate(cert.w_hat, cert.w_hat, np.zeros_like(cert.w_hat))
    a = actualize(state, exact, 1.0, 1.0)
    b = hedging_update(state, exact)
    np.testing.assert_allclose(a.x, b.x, atol=1e-10)
    np.testing.assert_allclose(a.w, b.w, atol=1e-9)
    np.testing.assert_allclose(b.x, project_N(cert.w_hat, state.space), atol=1e-12)


def test_degenerate_step_raises():
    sp = ScenarioSpace.single_stage([1.0], 1)
    state = IphaState(sp, np.array([[1.0]]), np.zeros((1, 1)), 1.0)
    cert = Certificate(np.array([[1.0]]), np.array([[1.0]]), np.zeros((1, 1)))
    with pytest.raises(DegenerateStepError):
        compute_alpha(state, cert)


@pytest.mark.parametrize(
    "kw",
    [
        {"r": 0.0},
        {"r": 1.0, "sigma": 0.95},
        {"r": 1.0, "sigma_bar": 1.0},
        {"r": 1.0, "tau": 1.6},
        {"r": 1.0, "theta": 0.0},
        {"r": 1.0, "stop_tol": 0.0},
        {"r": 1.0, "max_outer_iters": 0},
    ],
)
def test_params_validation(kw):
    with pytest.raises(ParameterError):
        IphaParams(**kw)


def test_schedule_checked_when_used():
    params = IphaParams(r=1.0, sigma=lambda k: 0.5 if k < 2 else 0.99)
    assert params.sigma_at(1) == 0.5
    with pytest.raises(ParameterError, match="sigma_2"):
        params.sigma_at(2)


# -- whole runs -----------------------------------------------------------------


def test_counterexample_converges_to_origin():
    inst = counterexample_instance()
    res = solve(inst, IphaParams(r=5.0), SubsolverConfig(), x0=np.ones((2, 2)))
    assert res.status == CONVERGED
    assert res.residual <= 1e-6
    np.testing.assert_allclose(res.x, 0.0, atol=1e-5)


def test_stops_immediately_at_a_solution():
    inst = counterexample_instance()
    res = solve(inst, IphaParams(r=5.0), SubsolverConfig())
    assert res.status == CONVERGED and res.iterations == 1
    assert res.stop_quantity == 0.0 and res.residual == 0.0


def test_nash_fixture_reaches_small_residual(small_nash):
    _, inst, _ = small_nash
    res = solve(inst, IphaParams(r=20.0, stop_tol=1e-7), SubsolverConfig(inner_tol=1e-11))
    assert res.status == CONVERGED
    assert res.residual <= 1e-5


def test_fejer_monotone_in_mr_norm(small_nash):
    _, inst, _ = small_nash
    r = 20.0
    ref = solve(inst, IphaParams(r=r, stop_tol=1e-9), SubsolverConfig(inner_tol=1e-12))
    assert ref.converged
    run = solve(inst, IphaParams(r=r, stop_tol=1e-4, keep_iterates=True),
                SubsolverConfig(inner_tol=1e-11))
    sp = inst.space
    dist = [mr_norm(x - ref.x, w - ref.w, r, sp) for x, w in run.iterates]
    # the reference itself is only accurate to about its stop tolerance
    slack = 1e-6 * (1 + dist[0])
    assert all(b <= a + slack for a, b in zip(dist, dist[1:]))


def test_iterates_stay_in_subspaces(small_nash):
    _, inst, _ = small_nash
    sp = inst.space
    seen = []

    def check(info):
        for x, w in ((info.x, info.w), (info.x_next, info.w_next)):
            if x is None:
                continue
            assert norm(x - project_N(x, sp), sp) <= 1e-10 * (1 + norm(x, sp))
            assert norm(project_N(w, sp), sp) <= 1e-10 * (1 + norm(w, sp))
        seen.append(info.k)

    res = solve(inst, IphaParams(r=20.0, stop_tol=1e-4), SubsolverConfig(), callback=check)
    assert seen == list(range(res.iterations))


def test_history_records_every_iteration(small_nash):
    _, inst, _ = small_nash
    res = solve(inst, IphaParams(r=20.0, stop_tol=1e-4), SubsolverConfig())
    assert [h["k"] for h in res.history] == list(range(res.iterations))
    assert all(h["accepted"] for h in res.history)
    assert math.isnan(res.history[-1]["alpha"])
    assert all(0.5 <= h["alpha"] for h in res.history[:-1])
    assert res.inner_iters_total == sum(h["inner_iters"] for h in res.history)


def test_max_iters_status(small_nash):
    _, inst, _ = small_nash
    res = solve(inst, IphaParams(r=20.0, max_outer_iters=3), SubsolverConfig())
    assert res.status == MAX_ITERS and res.iterations == 3


def test_subsolver_failure_status_carries_diagnostics(small_nash):
    _, inst, _ = small_nash
    cfg = SubsolverConfig(method="FPA", max_inner_iters=2, inner_tol=1e-12)
    res = solve(inst, IphaParams(r=float(inst.lipschitz_moduli.max()) + 1), cfg)
    assert res.status == SUBSOLVER_FAILURE
    assert len(res.diagnostics) == inst.space.scenario_count
    assert {"scenario", "method", "inner_iters", "residual"} <= set(res.diagnostics[0])


def test_fpa_rejects_small_r_before_iterating(small_nash):
    from ipha.errors import ConfigurationError

    _, inst, _ = small_nash
    calls = []
    with pytest.raises(ConfigurationError):
        solve(inst, IphaParams(r=1.0), SubsolverConfig(method="FPA"), callback=calls.append)
    assert calls == []


def test_divergence_detected_on_non_monotone_instance():
    sp = ScenarioSpace.single_stage([0.5, 0.5], 1)
    inst = SviInstance(sp, AffineMapping([[[-3.0]], [[-3.0]]], [[1.0], [0.0]]), AffineFree())
    res = solve(inst, IphaParams(r=0.3, divergence_window=5, max_outer_iters=500),
                SubsolverConfig(max_inner_iters=50), x0=np.ones((2, 1)))
    assert res.status == DIVERGED


def test_non_nonanticipative_start_is_projected():
    inst = counterexample_instance()
    with pytest.warns(UserWarning, match="projecting it onto N"):
        solve(inst, IphaParams(r=5.0), SubsolverConfig(), x0=np.array([[1.0, 0.0], [0.0, 1.0]]))


class AffineFree(Orthant):
    """Whole space, so a non-monotone map can run away."""

    piecewise_affine = True

    def project(self, Y, idx=None):
        return np.array(Y, dtype=float, copy=True)

    def jacobian(self, Y, idx=None):
        Y = np.asarray(Y)
        return np.broadcast_to(np.eye(Y.shape[1]), (Y.shape[0], Y.shape[1], Y.shape[1])).copy()
