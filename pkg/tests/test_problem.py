import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import power_iteration_norm, triangle_grid_projection
from ipha.errors import DimensionError, IntegrityError, ParameterError
from ipha.nash import counterexample_instance
from ipha.problem import (
    AffineMapping,
    Box,
    CappedPairs,
    CustomConstraint,
    Orthant,
    SviInstance,
    check_monotone,
    evaluate_F,
    extensive_residual,
    project_C,
    project_triangle,
)
from ipha.space import ScenarioSpace, norm, project_N

seeds = st.integers(0, 2**32 - 1)


def _instance(M, b, cons=None, p=None):
    M = np.asarray(M, dtype=float)
    S, n = M.shape[0], M.shape[1]
    p = p or [1.0 / S] * S
    return SviInstance(ScenarioSpace.single_stage(p, n), AffineMapping(M, b), cons or Orthant())


def test_evaluate_F_examples():
    inst = counterexample_instance()
    np.testing.assert_allclose(evaluate_F(inst, np.zeros((2, 2))), inst.mapping.offsets)
    np.testing.assert_allclose(evaluate_F(inst, np.ones((2, 2)))[1], [4.0, 5.0])
    ident = _instance(np.stack([np.eye(3)] * 2), np.zeros((2, 3)))
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_allclose(evaluate_F(ident, x), x)


def test_project_C_examples():
    inst = _instance(np.stack([np.eye(2)]), np.zeros((1, 2)))
    np.testing.assert_allclose(project_C(inst, np.array([[-1.0, 2.0]])), [[0.0, 2.0]])
    tri = CappedPairs([0], [1], [[2.0]])
    np.testing.assert_allclose(tri.project(np.array([[0.5, 0.5]])), [[0.5, 0.5]])
    np.testing.assert_allclose(tri.project(np.array([[2.0, 2.0]])), [[1.0, 1.0]])
    np.testing.assert_allclose(triangle_grid_projection([2.0, 2.0], 2.0), [1.0, 1.0], atol=3e-3)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 4))
def test_triangle_projection_matches_grid_search(a, b, cap):
    pa, pb = project_triangle(np.array(a), np.array(b), cap)
    ref = triangle_grid_projection([a, b], cap, steps=401)
    # grid spacing bounds the oracle's error
    assert np.hypot(pa - ref[0], pb - ref[1]) <= 2 * cap / 400 + 1e-12


@given(seeds)
def test_triangle_projection_variational_inequality(seed):
    rng = np.random.default_rng(seed)
    cap = rng.uniform(0.1, 5)
    q = rng.normal(scale=4, size=2)
    p = np.array(project_triangle(q[0], q[1], cap))
    assert p.min() >= 0 and p.sum() <= cap + 1e-12
    for _ in range(50):
        c = rng.dirichlet(np.ones(3))[:2] * cap
        assert (q - p) @ (c - p) <= 1e-10


@given(seeds)
def test_projections_firmly_nonexpansive(seed):
    rng = np.random.default_rng(seed)
    S, n = 3, 6
    families = [
        Orthant(),
        Box(-rng.uniform(0, 2, (S, n)), rng.uniform(0, 2, (S, n))),
        CappedPairs([0, 1, 2], [3, 4, 5], rng.uniform(0.5, 3, (S, 3))),
    ]
    q1, q2 = rng.normal(scale=3, size=(2, S, n))
    for fam in families:
        p1, p2 = fam.project(q1), fam.project(q2)
        lhs = np.sum((p1 - p2) ** 2, axis=1)
        rhs = np.sum((p1 - p2) * (q1 - q2), axis=1)
        assert np.all(lhs <= rhs + 1e-10)


@given(seeds)
def test_projection_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    S, n = 4, 6
    fam = CappedPairs([0, 1, 2], [3, 4, 5], rng.uniform(0.5, 3, (S, 3)))
    Y = rng.normal(scale=3, size=(S, n))
    J = fam.jacobian(Y)
    h = 1e-7
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        fd = (fam.project(Y + e) - fam.project(Y - e)) / (2 * h)
        # random points avoid kinks almost surely
        np.testing.assert_allclose(J[:, :, j], fd, atol=1e-6)


def test_jacobian_boundary_conventions():
    fam = CappedPairs([0], [1], [[2.0]])
    pts = np.array([[0.0, 0.5], [1.0, 1.0], [-1.0, -1.0], [3.0, -5.0], [0.5, 0.5]])
    J = fam.jacobian(pts)
    np.testing.assert_array_equal(J[0], [[0, 0], [0, 1]])      # on the a = 0 axis
    np.testing.assert_array_equal(J[1], [[0.5, -0.5], [-0.5, 0.5]])  # cap edge
    np.testing.assert_array_equal(J[2], np.zeros((2, 2)))      # origin vertex
    np.testing.assert_array_equal(J[3], np.zeros((2, 2)))      # vertex (cap, 0)
    np.testing.assert_array_equal(J[4], np.eye(2))
    box = Box([[0.0, 0.0]], [[1.0, 1.0]])
    np.testing.assert_array_equal(box.jacobian(np.array([[0.0, 0.5]]))[0], np.diag([0.0, 1.0]))


def test_lipschitz_moduli_match_power_iteration(rng):
    M = rng.normal(size=(5, 7, 7))
    mapping = AffineMapping(M, np.zeros((5, 7)))
    for s in range(5):
        assert mapping.lipschitz_moduli[s] == pytest.approx(power_iteration_norm(M[s]), abs=1e-8)


@given(seeds)
def test_affine_lipschitz_bound(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(3, 4, 4))
    mp = AffineMapping(M, rng.normal(size=(3, 4)))
    x, y = rng.normal(size=(2, 3, 4))
    lhs = np.linalg.norm(mp.evaluate(x) - mp.evaluate(y), axis=1)
    rhs = mp.lipschitz_moduli * np.linalg.norm(x - y, axis=1)
    assert np.all(lhs <= rhs * (1 + 1e-8))


def test_check_monotone_examples():
    assert check_monotone(_instance([np.eye(2)], [[0.0, 0.0]])).min_eigenvalues[0] == pytest.approx(1.0)
    cert = check_monotone(counterexample_instance())
    assert cert.min_eigenvalues[0] == pytest.approx(1.0)
    skew = check_monotone(_instance([[[0.0, 1.0], [-1.0, 0.0]]], [[0.0, 0.0]]))
    assert skew.min_eigenvalues[0] == pytest.approx(0.0, abs=1e-15)
    assert skew.monotone


def test_non_monotone_instance_warns_but_builds():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        inst = _instance([[[-1.0, 0.0], [0.0, 1.0]]], [[0.0, 0.0]])
    assert not inst.certificate.monotone
    assert any("not monotone" in str(w.message) for w in caught)


def test_extensive_residual_examples(rng):
    inst = counterexample_instance()
    z = np.zeros((2, 2))
    assert extensive_residual(inst, z, z) == 0.0
    x = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert extensive_residual(inst, x, z) >= norm(x - project_N(x, inst.space), inst.space) > 0
    feasible = np.full((2, 2), 0.3)
    assert extensive_residual(inst, feasible, z) > 0


@given(seeds)
def test_small_residual_bounds_distance_to_C_cap_N(seed):
    """dist(P_N x, C) <= ||x - P_N x|| + natural residual <= 2 * residual."""
    rng = np.random.default_rng(seed)
    S, n = 4, 4
    sp = ScenarioSpace.two_stage(rng.dirichlet(np.ones(S)) / 1.0, 2, 2)
    M = rng.normal(size=(S, n, n))
    inst = SviInstance(sp, AffineMapping(M @ np.transpose(M, (0, 2, 1)), rng.normal(size=(S, n))),
                       CappedPairs([0, 1], [2, 3], rng.uniform(0.5, 2, (S, 2))))
    x = rng.normal(size=sp.shape)
    w = rng.normal(size=sp.shape)
    res = extensive_residual(inst, x, w)
    xn = project_N(x, sp)
    dist = norm(xn - inst.constraints.project(xn), sp)
    assert dist <= 2 * res + 1e-12


def test_custom_projection_checked():
    ball = CustomConstraint(lambda y, s: y / max(1.0, np.linalg.norm(y)), 1)
    np.testing.assert_allclose(ball.project(np.array([[3.0, 4.0]])), [[0.6, 0.8]])
    bad = CustomConstraint(lambda y, s: y + 1.0, 1)
    with pytest.raises(IntegrityError, match="scenario 0"):
        bad.project(np.zeros((1, 2)))


def test_constraint_validation():
    with pytest.raises(ParameterError):
        CappedPairs([0], [1], [[0.0]])
    with pytest.raises(ParameterError):
        CappedPairs([0, 1], [1, 2], [[1.0, 1.0]])
    with pytest.raises(ParameterError):
        Box([[1.0]], [[0.0]])
    with pytest.raises(DimensionError):
        _instance([np.eye(2)], [[0.0, 0.0]], CappedPairs([0], [1], [[1.0], [1.0]]))


def test_instance_round_trip():
    inst = counterexample_instance()
    back = SviInstance.from_dict(inst.to_dict())
    np.testing.assert_array_equal(back.mapping.matrices, inst.mapping.matrices)
    np.testing.assert_array_equal(back.mapping.offsets, inst.mapping.offsets)
    assert back.space == inst.space
    d = inst.to_dict()
    d["mapping"]["matrices"] = [[1.0, 2.0, 3.0]] * 2
    with pytest.raises(DimensionError):
        SviInstance.from_dict(d)
