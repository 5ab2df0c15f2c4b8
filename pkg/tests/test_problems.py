"""Benchmark-problem tests: sampling, rollout, constraints, gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajdiff import problems as P
from trajdiff.errors import (
    ClampWarning,
    ConfigError,
    NumericInputError,
    PlacementError,
)


def physical_vector(kind, rng):
    prob = P.get_problem(kind)
    arr = prob.denormalize_array(rng.uniform(-1.0, 1.0, size=prob.dim))
    return P.DecisionVector.from_array(arr)


def naive_rollout(x, params):
    """Sequential-loop Euler oracle, independent of the cumsum implementation."""
    arr = x.to_array()
    t, u = arr[0], arr[1:]
    prob = P.get_problem(params.kind)
    dt = t / prob.n_steps
    if params.kind == P.KIND_TABLETOP:
        states = [P.TABLETOP_START.copy()]
        uu = u.reshape(prob.n_steps, 2)
        for i in range(prob.n_steps):
            states.append(states[-1] + dt * uu[i])
        return np.array(states)
    states = [P.TWOCAR_STARTS.copy()]
    uu = u.reshape(prob.n_steps, 2, 2)
    for i in range(prob.n_steps):
        s = states[-1].copy()
        for c in range(2):
            px, py, v, th = s[c]
            a, om = uu[i, c]
            s[c] = [px + dt * v * np.cos(th), py + dt * v * np.sin(th),
                    v + dt * a, th + dt * om]
        states.append(s)
    return np.array(states)


def naive_violation(x, params):
    """Termwise oracle: walk every constraint entry and sum the violations."""
    states = naive_rollout(x, params)
    total = 0.0
    if params.kind == P.KIND_TABLETOP:
        for p in states[1:]:
            for c, r in zip(params.obstacle_centers, params.obstacle_radii):
                total += max(r + P.OBSTACLE_MARGIN - np.linalg.norm(p - c), 0.0)
        total += np.abs(states[-1] - params.goals[0]).sum()
    else:
        for s in states[1:]:
            for car in range(2):
                for c, r in zip(params.obstacle_centers, params.obstacle_radii):
                    total += max(
                        r + P.OBSTACLE_MARGIN - np.linalg.norm(s[car, :2] - c), 0.0
                    )
            total += max(
                P.INTER_CAR_CLEARANCE - np.linalg.norm(s[0, :2] - s[1, :2]), 0.0
            )
        total += np.abs(states[-1][:, :2] - P.TWOCAR_GOALS).sum()
    return total


# ---------------------------------------------------------------------------
# parameter sampling


def test_sampling_deterministic():
    a = P.sample_problem_params(7, P.KIND_TABLETOP)
    b = P.sample_problem_params(7, P.KIND_TABLETOP)
    assert a.to_dict() == b.to_dict()


@pytest.mark.parametrize("kind,lo,hi", [("tabletop", 0.3, 1.0), ("twocar", 0.5, 1.5)])
def test_sampling_radius_ranges(kind, lo, hi):
    for seed in range(40):
        params = P.sample_problem_params(seed, kind)
        assert np.all(params.obstacle_radii >= lo)
        assert np.all(params.obstacle_radii <= hi)


def test_sampling_invariants():
    for seed in range(30):
        params = P.sample_problem_params(seed, P.KIND_TABLETOP)
        params.validate()
        assert params.obstacle_centers.shape == (4, 2)
        # the chosen goal is a corner and one obstacle blocks the segment
        assert any(np.allclose(params.goals[0], c) for c in P.TABLETOP_CORNERS)
        d = P._segment_point_distance(
            P.TABLETOP_START, params.goals[0], params.obstacle_centers
        )
        assert np.any(d <= params.obstacle_radii)


def test_sampling_corner_frequencies():
    # Monte-Carlo frequency oracle over 1000 seeds
    counts = np.zeros(4)
    for seed in range(1000):
        params = P.sample_problem_params(seed, P.KIND_TABLETOP)
        idx = np.argmin(np.linalg.norm(P.TABLETOP_CORNERS - params.goals[0], axis=1))
        counts[idx] += 1
    freqs = counts / 1000.0
    assert np.all(np.abs(freqs - 0.25) <= 0.05)


def test_sampling_placement_failure(monkeypatch):
    monkeypatch.setattr(P, "MAX_PLACEMENT_ATTEMPTS", 0)
    with pytest.raises(PlacementError):
        P.sample_problem_params(0, P.KIND_TABLETOP)


def test_params_json_round_trip():
    params = P.sample_problem_params(3, P.KIND_TWOCAR)
    again = P.ProblemParams.from_dict(params.to_dict())
    assert np.array_equal(again.goals, params.goals)
    assert np.array_equal(again.obstacle_centers, params.obstacle_centers)
    assert np.array_equal(again.obstacle_radii, params.obstacle_radii)


# ---------------------------------------------------------------------------
# rollout


def test_rollout_constant_velocity():
    params = P.sample_problem_params(1, P.KIND_TABLETOP)
    u = np.tile([0.5, 0.0], 80)
    x = P.DecisionVector(t_final=8.0, controls=u)
    traj = P.rollout(x, params)
    assert traj.dt == pytest.approx(0.1)
    assert traj.states[-1] == pytest.approx([4.0, 0.0])


def test_rollout_zero_dynamics_twocar():
    params = P.sample_problem_params(1, P.KIND_TWOCAR)
    x = P.DecisionVector(t_final=10.0, controls=np.zeros(160))
    traj = P.rollout(x, params)
    for car in range(2):
        assert np.allclose(traj.states[:, car, :2], P.TWOCAR_STARTS[car, :2])


def test_rollout_straight_line_twocar():
    # car 1 with a = 0, w = 0, v0 = 1, theta0 = 0 travels t meters along +x
    prob = P.get_problem(P.KIND_TWOCAR)
    start = P.TWOCAR_STARTS.copy()
    start[0, 2] = 1.0
    x = np.concatenate(([4.0], np.zeros(160)))
    states = prob.rollout_batch(x[None, :], start=start)[0]
    expected = start[0, :2] + np.array([4.0, 0.0])
    assert states[-1, 0, :2] == pytest.approx(expected)


def test_rollout_matches_naive_loop():
    rng = np.random.default_rng(0)
    for kind in P.KINDS:
        params = P.sample_problem_params(2, kind)
        x = physical_vector(kind, rng)
        traj = P.rollout(x, params)
        assert np.allclose(traj.states, naive_rollout(x, params), atol=1e-12)


def test_rollout_euler_consistency():
    # states[i+1] - states[i] = dt * f(states[i], controls[i]) to 1e-12
    rng = np.random.default_rng(1)
    params = P.sample_problem_params(2, P.KIND_TWOCAR)
    x = physical_vector(P.KIND_TWOCAR, rng)
    traj = P.rollout(x, params)
    u = x.to_array()[1:].reshape(40, 2, 2)
    for i in range(40):
        s = traj.states[i]
        f = np.stack(
            [
                s[:, 2] * np.cos(s[:, 3]),
                s[:, 2] * np.sin(s[:, 3]),
                u[i, :, 0],
                u[i, :, 1],
            ],
            axis=-1,
        )
        step = traj.states[i + 1] - traj.states[i]
        assert np.allclose(step, traj.dt * f, atol=1e-12)


def test_rollout_rejects_non_finite():
    params = P.sample_problem_params(1, P.KIND_TABLETOP)
    u = np.zeros(160)
    u[3] = np.nan
    with pytest.raises(NumericInputError):
        P.rollout(P.DecisionVector(t_final=5.0, controls=u), params)


# ---------------------------------------------------------------------------
# objective and constraints


def test_objective_is_final_time():
    params = P.sample_problem_params(1, P.KIND_TABLETOP)
    rng = np.random.default_rng(2)
    x = physical_vector(P.KIND_TABLETOP, rng)
    x.t_final = 7.5
    assert P.evaluate_objective(x, params) == 7.5
    x.t_final = P.T_BOUNDS[0]
    assert P.evaluate_objective(x, params) == P.T_BOUNDS[0]
    y = P.DecisionVector(t_final=x.t_final, controls=rng.uniform(-1, 1, 160))
    assert P.evaluate_objective(y, params) == P.evaluate_objective(x, params)


def test_constraint_counts():
    rng = np.random.default_rng(3)
    for kind, n_ineq, n_eq in [("tabletop", 320, 2), ("twocar", 200, 4)]:
        params = P.sample_problem_params(4, kind)
        cv = P.evaluate_constraints(physical_vector(kind, rng), params)
        assert cv.inequality.shape == (n_ineq,)
        assert cv.equality.shape == (n_eq,)


def test_constraint_boundary_case():
    # state exactly on the obstacle boundary gives g = 0
    params = P.ProblemParams(
        kind="tabletop",
        goals=np.array([[4.0, 0.0]]),
        obstacle_centers=np.array([[2.0, 0.5]]),
        obstacle_radii=np.array([0.5]),
    )
    u = np.tile([0.5, 0.0], 80)
    x = P.DecisionVector(t_final=8.0, controls=u)  # passes through (2, 0)
    cv = P.evaluate_constraints(x, params)
    assert np.max(cv.inequality) == pytest.approx(0.0, abs=1e-12)
    assert cv.equality == pytest.approx([0.0, 0.0], abs=1e-12)


def test_constraint_near_miss_value():
    # closest state sits 0.2 m from the obstacle center (radius 0.5):
    # deepest penetration is 0.5 - 0.2 = 0.3
    params = P.ProblemParams(
        kind="tabletop",
        goals=np.array([[4.0, 0.0]]),
        obstacle_centers=np.array([[2.0, 0.2]]),
        obstacle_radii=np.array([0.5]),
    )
    u = np.tile([0.5, 0.0], 80)
    x = P.DecisionVector(t_final=8.0, controls=u)
    cv = P.evaluate_constraints(x, params)
    entries = cv.inequality.reshape(80, 1)
    assert entries.max() == pytest.approx(0.3, abs=1e-12)
    # independent check over all steps
    states = naive_rollout(x, params)[1:]
    expected = max(
        0.5 - np.linalg.norm(p - params.obstacle_centers[0]) for p in states
    )
    assert entries.max() == pytest.approx(expected)


# ---------------------------------------------------------------------------
# violation functional


def make_feasible_tabletop():
    params = P.ProblemParams(
        kind="tabletop",
        goals=np.array([[4.0, 0.0]]),
        obstacle_centers=np.array([[0.0, 3.0]]),
        obstacle_radii=np.array([0.5]),
    )
    x = P.DecisionVector(t_final=8.0, controls=np.tile([0.5, 0.0], 80))
    return x, params


def test_violation_feasible_zero():
    x, params = make_feasible_tabletop()
    rep = P.violation(x, params)
    assert rep.total == 0.0
    assert set(rep.by_category) == {"obstacle", "goal", "inter_car"}


def test_violation_goal_miss():
    params = P.ProblemParams(
        kind="tabletop",
        goals=np.array([[4.0, 4.0]]),
        obstacle_centers=np.zeros((0, 2)),
        obstacle_radii=np.zeros(0),
    )
    # terminal point (3.9, 4.0)
    u = np.tile([3.9 / 8.0, 0.5], 80)
    x = P.DecisionVector(t_final=8.0, controls=u)
    rep = P.violation(x, params)
    assert rep.total == pytest.approx(0.1, abs=1e-12)
    assert rep.by_category["goal"] == pytest.approx(0.1, abs=1e-12)
    assert rep.by_category["obstacle"] == 0.0


@pytest.mark.parametrize("kind", P.KINDS)
def test_violation_matches_naive_oracle(kind):
    rng = np.random.default_rng(11)
    for _ in range(10):
        params = P.sample_problem_params(int(rng.integers(1000)), kind)
        x = physical_vector(kind, rng)
        rep = P.violation(x, params)
        assert rep.total == pytest.approx(naive_violation(x, params), rel=1e-12)
        assert rep.total == pytest.approx(sum(rep.by_category.values()), rel=1e-12)


@pytest.mark.parametrize("kind", P.KINDS)
def test_violation_iff_constraints_satisfied(kind):
    rng = np.random.default_rng(12)
    params = P.sample_problem_params(9, kind)
    for _ in range(5):
        x = physical_vector(kind, rng)
        cv = P.evaluate_constraints(x, params)
        satisfied = np.all(cv.inequality <= P.NUMERIC_ZERO) and np.all(
            np.abs(cv.equality) <= P.NUMERIC_ZERO
        )
        assert (P.violation(x, params).total <= P.NUMERIC_ZERO * len(cv.inequality)) == satisfied


# ---------------------------------------------------------------------------
# violation gradient


def test_gradient_zero_when_strictly_feasible():
    x, params = make_feasible_tabletop()
    g = P.violation_gradient(x, params)
    assert np.all(g == 0.0)


@pytest.mark.parametrize("kind", P.KINDS)
def test_gradient_matches_finite_differences(kind):
    # 100 random smooth points, central differences with step 1e-5
    prob = P.get_problem(kind)
    rng = np.random.default_rng(21)
    params = P.sample_problem_params(17, kind)
    accepted = 0
    attempts = 0
    eps = 1e-5
    while accepted < 100 and attempts < 2000:
        attempts += 1
        X = prob.denormalize_array(rng.uniform(-1, 1, size=(1, prob.dim)))
        g, h = prob.constraint_values_batch(X, params)
        if np.min(np.abs(g)) < 1e-6 or np.min(np.abs(h)) < 1e-6:
            continue  # too close to a kink for finite differences
        accepted += 1
        ga = prob.violation_gradient_batch(X, params)[0]
        base = np.repeat(X, 2 * prob.dim, axis=0)
        for j in range(prob.dim):
            base[2 * j, j] += eps
            base[2 * j + 1, j] -= eps
        v = prob.violation_batch(base, params)
        gfd = (v[0::2] - v[1::2]) / (2 * eps)
        rel = np.linalg.norm(ga - gfd) / max(np.linalg.norm(gfd), 1e-12)
        assert rel < 1e-4
    assert accepted == 100


def test_gradient_goal_miss_chain_rule():
    # violation reduces to |h|; every control gradient is dt * sign(h)
    params = P.ProblemParams(
        kind="tabletop",
        goals=np.array([[4.0, 4.0]]),
        obstacle_centers=np.zeros((0, 2)),
        obstacle_radii=np.zeros(0),
    )
    u = np.tile([0.4, 0.3], 80)
    x = P.DecisionVector(t_final=8.0, controls=u)
    rep = P.violation(x, params)
    assert rep.by_category["obstacle"] == 0.0 and rep.by_category["goal"] > 0.0
    g = P.violation_gradient(x, params)
    dt = 8.0 / 80
    h = P.evaluate_constraints(x, params).equality
    assert g[1 + 2 * 79] == pytest.approx(dt * np.sign(h[0]))  # u_x of last step
    assert g[2 + 2 * 79] == pytest.approx(dt * np.sign(h[1]))  # u_y of last step


def test_gradient_rejects_non_finite():
    params = P.sample_problem_params(1, P.KIND_TABLETOP)
    u = np.zeros(160)
    u[0] = np.inf
    with pytest.raises(NumericInputError):
        P.violation_gradient(P.DecisionVector(t_final=5.0, controls=u), params)


# ---------------------------------------------------------------------------
# normalization


def test_normalize_endpoints():
    x = P.DecisionVector(t_final=4.0, controls=np.zeros(160))
    n = P.normalize(x)
    assert n.normalized
    assert n.t_final == pytest.approx(-1.0)
    assert np.all(n.controls == 0.0)  # midpoint of [-1, 1] is 0
    x.t_final = 20.0
    assert P.normalize(x).t_final == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_normalize_round_trip(seed):
    rng = np.random.default_rng(seed)
    x = physical_vector(P.KIND_TABLETOP, rng)
    back = P.denormalize(P.normalize(x))
    assert np.allclose(back.to_array(), x.to_array(), atol=1e-12)


def test_normalize_clamps_and_warns():
    u = np.zeros(160)
    u[5] = 1.5
    x = P.DecisionVector(t_final=25.0, controls=u)
    with pytest.warns(ClampWarning):
        n = P.normalize(x)
    assert n.t_final == pytest.approx(1.0)
    assert n.controls[5] == pytest.approx(1.0)


def test_normalize_flag_mismatch():
    x = P.DecisionVector(t_final=0.0, controls=np.zeros(160), normalized=True)
    with pytest.raises(ConfigError):
        P.normalize(x)
    y = P.DecisionVector(t_final=5.0, controls=np.zeros(160))
    with pytest.raises(ConfigError):
        P.denormalize(y)


def test_decision_vector_dimension():
    for kind in P.KINDS:
        assert P.get_problem(kind).dim == 161
