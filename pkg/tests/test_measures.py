import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust_stopper.errors import AssumptionViolationError, ParameterError, UnsupportedRuleError
from robust_stopper.lattice import LatticeModel, deterministic_rule, first_hitting_rule
from robust_stopper.measures import (
    ControlPolicy,
    density_process,
    max_tilt,
    paste,
    path_density,
    penalty_cost,
    tilt_probabilities,
    truncate_policy,
)
from robust_stopper.penalty import PenaltySpec

from helpers import all_paths


def random_policy(model, rng, active_from=0, scale=0.9):
    th = rng.uniform(-scale, scale, (model.n_steps,) * 2) * max_tilt(model.dt)
    return ControlPolicy(model, th, active_from)


def test_tilt_examples():
    assert tilt_probabilities(0.0, 1.0) == (0.5, 0.5)
    assert tilt_probabilities(0.5, 0.25) == (0.625, 0.375)
    with pytest.raises(ParameterError):
        tilt_probabilities(3.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(theta=st.floats(-0.99, 0.99), dt=st.floats(0.001, 4.0))
def test_tilt_mean_is_exact(theta, dt):
    th = theta / np.sqrt(dt)
    qu, qd = tilt_probabilities(th, dt)
    assert 0 < qu < 1 and 0 < qd < 1
    assert qu + qd == pytest.approx(1.0, abs=1e-15)
    mean = (qu - qd) * np.sqrt(dt)
    assert mean == pytest.approx(th * dt, rel=1e-12, abs=1e-15)


def test_policy_invariants():
    m = LatticeModel(3, 0.25)
    with pytest.raises(ParameterError):
        ControlPolicy.constant(m, 2.5)
    p = ControlPolicy.constant(m, 1.0, active_from=2)
    assert np.all(p.theta[:2] == 0.0)
    assert np.all(p.level(2) == 1.0)
    with pytest.raises(ValueError):
        p.theta[2, 0] = 0.0


def test_density_examples():
    m = LatticeModel(1, 1.0)
    d = density_process(m, ControlPolicy.constant(m, 0.5))
    assert d.z[1, 1] == 1.5 and d.z[1, 0] == 0.5
    m = LatticeModel(4, 0.5)
    d = density_process(m, ControlPolicy.zero(m))
    assert np.all(d.z[m.node_mask()] == 1.0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 7), seed=st.integers(0, 10 ** 6))
def test_density_level_mean_is_one(n, seed):
    m = LatticeModel(n, 1.0 / n)
    d = density_process(m, random_policy(m, np.random.default_rng(seed)))
    for t in range(n + 1):
        assert d.level_mean(t) == pytest.approx(1.0, abs=1e-12)
        assert np.all(d.z[t, : t + 1] > 0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 10 ** 6))
def test_pathwise_density_is_martingale(n, seed):
    m = LatticeModel(n, 1.0 / n)
    pol = random_policy(m, np.random.default_rng(seed))
    paths = list(all_paths(n))
    dens = np.array([path_density(m, pol, p) for p in paths])
    # reference mean of the terminal density over all paths is one
    assert dens[:, -1].mean() == pytest.approx(1.0, abs=1e-12)
    # node-marginal density is the reference average over paths into the node
    d = density_process(m, pol)
    ups = np.array([sum(p) for p in paths])
    for j in range(n + 1):
        assert dens[ups == j, -1].mean() == pytest.approx(d.z[n, j], rel=1e-12)


def test_paste_examples():
    m = LatticeModel(2, 0.25)
    a = ControlPolicy.constant(m, 0.4)
    b = ControlPolicy.constant(m, -0.8)
    at_n = paste(a, b, deterministic_rule(m, 2))
    np.testing.assert_array_equal(at_n.theta, a.theta)
    at_0 = paste(a, b, deterministic_rule(m, 0))
    np.testing.assert_array_equal(at_0.theta, b.theta)
    mid = paste(a, b, deterministic_rule(m, 1))
    assert mid.theta[0, 0] == 0.4
    assert np.all(mid.level(1) == -0.8)


def test_paste_rejects_path_dependent_switch():
    m = LatticeModel(3, 0.25)
    region = np.zeros((4, 4), bool)
    region[1, 1] = True
    gamma = first_hitting_rule(m, region)
    a = ControlPolicy.constant(m, 0.4)
    b = ControlPolicy.constant(m, -0.8)
    with pytest.raises(UnsupportedRuleError):
        paste(a, b, gamma)
    # equal tilts at the mixed node are fine
    th = b.theta.copy()
    th[2, 1] = 0.4
    paste(a, ControlPolicy(m, th), gamma)
    with pytest.raises(UnsupportedRuleError):
        paste(a, b, "not a rule")


def test_paste_floor_check():
    m = LatticeModel(3, 0.25)
    a = ControlPolicy.constant(m, 0.4, active_from=2)
    with pytest.raises(ParameterError):
        paste(a, a, deterministic_rule(m, 1))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 6), level=st.integers(0, 6), seed=st.integers(0, 10 ** 6))
def test_pasting_multiplies_densities(n, level, seed):
    level = min(level, n)
    rng = np.random.default_rng(seed)
    m = LatticeModel(n, 1.0 / n)
    a, b = random_policy(m, rng), random_policy(m, rng)
    pasted = paste(a, b, deterministic_rule(m, level))
    for path in all_paths(n):
        zp = path_density(m, pasted, path)
        za = path_density(m, a, path)
        zb = path_density(m, b, path)
        expect = za[level] * zb[-1] / zb[level]
        assert zp[-1] == pytest.approx(expect, rel=1e-12)


def test_truncate_examples():
    m = LatticeModel(2, 0.1)
    z = ControlPolicy.zero(m)
    np.testing.assert_array_equal(truncate_policy(z, PenaltySpec.entropic(1.0), 1.0).theta, z.theta)
    two = ControlPolicy.constant(m, 2.0)
    assert np.all(truncate_policy(two, PenaltySpec.entropic(1.0), 1.0).theta == 0.0)
    one = ControlPolicy.constant(m, 1.0)
    assert np.all(truncate_policy(one, PenaltySpec.entropic(4.0), 1.0).theta == 0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), k1=st.floats(0.1, 3.0), k2=st.floats(0.1, 3.0))
def test_truncation_idempotent_and_monotone(seed, k1, k2):
    k1, k2 = sorted((k1, k2))
    m = LatticeModel(5, 0.2)
    spec = PenaltySpec.entropic(1.5)
    pol = random_policy(m, np.random.default_rng(seed))
    t1 = truncate_policy(pol, spec, k1)
    np.testing.assert_array_equal(truncate_policy(t1, spec, k1).theta, t1.theta)
    t2 = truncate_policy(pol, spec, k2)
    assert np.all((t1.theta != 0) <= (t2.theta != 0))


def test_penalty_cost_examples():
    m = LatticeModel(1, 1.0)
    spec = PenaltySpec.entropic(1.0)
    end = deterministic_rule(m, 1)
    assert penalty_cost(m, spec, ControlPolicy.zero(m), 0, end) == 0.0
    assert penalty_cost(m, spec, ControlPolicy.constant(m, 0.5), 0, end) == 0.125
    m = LatticeModel(2, 0.25)
    pol = ControlPolicy.constant(m, 1.0)
    g = deterministic_rule(m, 1)
    assert penalty_cost(m, spec, pol, g, g) == 0.0
    # N=1, dt=1, theta=1 is inadmissible; the same cost on a finer lattice
    assert penalty_cost(m, spec, pol, 0, deterministic_rule(m, 2)) == pytest.approx(0.25)
    with pytest.raises(AssumptionViolationError):
        penalty_cost(m, spec, pol, 0, deterministic_rule(m, 2), k=0.1)


def test_penalty_cost_between_rules_matches_paths():
    rng = np.random.default_rng(5)
    m = LatticeModel(4, 0.25)
    spec = PenaltySpec.entropic(2.0)
    pol = random_policy(m, rng)
    start = deterministic_rule(m, 1)
    region = rng.random((5, 5)) < 0.4
    stop = first_hitting_rule(m, region, floor=1)
    q_up, q_dn = pol.probabilities()
    cost = pol.cost_table(spec)
    total = 0.0
    for path in all_paths(4):
        prob, acc = 1.0, 0.0
        s = stop.stop_level(path)
        for (t, j), move in zip(m.node_of_path(path), path):
            if 1 <= t < s:
                acc += cost[t, j]
            prob *= q_up[t, j] if move else q_dn[t, j]
        total += prob * acc
    assert penalty_cost(m, spec, pol, start, stop) == pytest.approx(total, abs=1e-14)
