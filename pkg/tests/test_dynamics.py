import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bifurcate import branches
from bifurcate.dynamics import (UpdateOperator, attractor_sweep, fixed_point_residual,
                                identity_operator, rollout, scaling_operator)
from bifurcate.errors import DivergenceError, InputError


def test_identity_rollout_converges_after_one_step():
    traj = rollout(identity_operator(), [3.0], None, T=5, tol=1e-12)
    assert traj.converged
    assert traj.steps_used == 1
    assert all(np.all(y == 3.0) for y in traj.iterates)
    assert np.all(traj.residuals == 0.0)


def test_halving_rollout_is_geometric():
    traj = rollout(scaling_operator(0.5), [1.0], None, T=10, tol=0.0)
    assert not traj.converged and traj.steps_used == 10
    for t, y in enumerate(traj.iterates):
        assert y[0] == 2.0 ** -t
    np.testing.assert_array_equal(traj.residuals, 2.0 ** -(np.arange(10) + 1.0))


def test_regularized_affine_pair_converges_to_upper_branch():
    op = branches.regularized_operator(branches.make_family("affine_pair"))
    traj = rollout(op, [5.0], [0.3], T=500, tol=1e-12)
    assert traj.converged
    assert abs(traj.final[0] - 1.3) <= 1e-8


def test_store_iterates_false_keeps_endpoints():
    traj = rollout(scaling_operator(0.5), [1.0], None, T=10, tol=0.0, store_iterates=False)
    assert len(traj.iterates) == 2
    assert traj.iterates[0][0] == 1.0 and traj.final[0] == 2.0 ** -10
    assert len(traj.residuals) == 10


def test_rollout_rejects_bad_arguments():
    with pytest.raises(InputError):
        rollout(identity_operator(), [1.0], None, T=0)
    with pytest.raises(InputError):
        rollout(identity_operator(2), [1.0], None, T=3)
    op = UpdateOperator(lambda y, x: y, 1, 2)
    with pytest.raises(InputError):
        rollout(op, [1.0], [0.0], T=3)


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_carries_step_index():
    op = UpdateOperator(lambda y, x: y * 1e200, 1)
    with pytest.raises(DivergenceError) as info:
        rollout(op, [1.0], None, T=10)
    assert info.value.step == 2


def test_sweep_identity_keeps_every_init():
    rep = attractor_sweep(identity_operator(), None, [[1.0], [2.0], [3.0]], T=5, tol=1e-12, dedup_radius=0.1)
    assert [float(v[0]) for v in rep.limits] == [1.0, 2.0, 3.0]
    assert rep.init_assignments == {0: 0, 1: 1, 2: 2}
    assert rep.unconverged_count == 0


def test_sweep_affine_pair_finds_both_branches():
    op = branches.regularized_operator(branches.make_family("affine_pair"))
    inits = np.random.default_rng(0).uniform(-5, 5, (100, 1))
    rep = attractor_sweep(op, [0.3], inits, T=500, tol=1e-10, dedup_radius=1e-6)
    got = sorted(float(v[0]) for v in rep.limits)
    np.testing.assert_allclose(got, [-0.7, 1.3], atol=1e-8)
    assert rep.unconverged_count == 0
    assert sum(rep.coverage) == 100


def test_sweep_halving_single_limit():
    rep = attractor_sweep(scaling_operator(0.5), None, [[-1.0], [1.0]], T=100, tol=1e-9, dedup_radius=1e-6)
    assert rep.n_limits == 1
    assert abs(rep.limits[0][0]) < 1e-8


@pytest.mark.filterwarnings("ignore:overflow")
def test_sweep_counts_divergent_inits():
    op = UpdateOperator(lambda y, x: y * 1e200 if y[0] > 0 else 0.5 * y, 1)
    rep = attractor_sweep(op, None, [[1.0], [-1.0]], T=200, tol=1e-9, dedup_radius=1e-6)
    assert rep.unconverged_count == 1
    assert list(rep.init_assignments) == [1]


def test_sweep_rejects_empty_inits_and_bad_radius():
    with pytest.raises(InputError):
        attractor_sweep(identity_operator(), None, [], T=3, tol=1e-9, dedup_radius=0.1)
    with pytest.raises(InputError):
        attractor_sweep(identity_operator(), None, [[0.0]], T=3, tol=1e-9, dedup_radius=0.0)


def test_fixed_point_residual_examples():
    assert fixed_point_residual(identity_operator(3), [1.0, -2.0, 5.0], None) == 0.0
    assert fixed_point_residual(scaling_operator(0.5, 2), [2.0, 2.0], [7.0]) == 1.0


def test_fixed_point_residual_non_finite():
    op = UpdateOperator(lambda y, x: y * np.inf, 1)
    with pytest.raises(DivergenceError):
        fixed_point_residual(op, [1.0], None)


@pytest.mark.parametrize("y0", [-5.0, -3.0, 1.0, 4.0, 5.0])
def test_regularized_operator_converges_geometrically(y0):
    # fit error: worst deviation from the line, relative to the span of log residuals
    op = branches.regularized_operator(branches.make_family("affine_pair"))
    traj = rollout(op, [y0], [0.3], T=40, tol=0.0)
    t = np.arange(3, 40)
    logr = np.log(traj.residuals[3:40])
    slope, icept = np.polyfit(t, logr, 1)
    assert slope < 0
    assert np.max(np.abs(slope * t + icept - logr)) < 0.05 * np.ptp(logr)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-1.9, 1.9), st.integers(1, 30))
def test_residuals_recompute_from_iterates(y0, x, T):
    op = branches.regularized_operator(branches.make_family("affine_pair"))
    traj = rollout(op, [y0], [x], T=T, tol=1e-9)
    recomputed = [float(np.linalg.norm(b - a)) for a, b in zip(traj.iterates[:-1], traj.iterates[1:])]
    assert recomputed == list(traj.residuals)
    if traj.converged:
        assert traj.residuals[traj.steps_used - 1] <= 1e-9


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12), st.floats(-1.9, 1.9))
def test_sweep_is_deterministic_and_assigns_every_converged_init(inits, x):
    op = branches.regularized_operator(branches.make_family("affine_pair"))
    inits = [[v] for v in inits]
    a = attractor_sweep(op, [x], inits, T=300, tol=1e-10, dedup_radius=1e-6)
    b = attractor_sweep(op, [x], inits, T=300, tol=1e-10, dedup_radius=1e-6)
    assert a.init_assignments == b.init_assignments
    assert all(np.array_equal(p, q) for p, q in zip(a.limits, b.limits))
    assert set(a.init_assignments) == set(a.finals)
    finals = list(a.finals.values())
    for lim in a.limits:
        assert any(np.array_equal(lim, f) for f in finals)
    for i, p in enumerate(a.limits):
        for q in a.limits[i + 1:]:
            assert np.linalg.norm(p - q) > 1e-6
