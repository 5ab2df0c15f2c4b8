"""Solver and dataset-generation tests."""

import numpy as np
import pytest

from trajdiff import problems as P
from trajdiff.errors import ConfigError
from trajdiff.nlp_solver import (
    DatasetRecord,
    SolveConfig,
    filter_by_objective,
    generate_dataset,
    solve_batch,
    solve_local,
)


@pytest.fixture(scope="module")
def cfg():
    return SolveConfig()


def random_inits(kind, n, seed):
    prob = P.get_problem(kind)
    rng = np.random.default_rng(seed)
    return np.stack([rng.uniform(prob.lower, prob.upper) for _ in range(n)])


def test_config_validation():
    with pytest.raises(ConfigError):
        SolveConfig(feas_tol=0.0)
    with pytest.raises(ConfigError):
        SolveConfig(penalty_growth=1.0)
    with pytest.raises(ConfigError):
        SolveConfig(step_rule="exact")


def test_zero_obstacle_analytic_optimum(cfg):
    # without obstacles the time-optimal solution saturates u = (1, 1), t = 4
    params = P.ProblemParams(
        kind="tabletop",
        goals=np.array([[4.0, 4.0]]),
        obstacle_centers=np.zeros((0, 2)),
        obstacle_radii=np.zeros(0),
    )
    res = solve_batch(random_inits("tabletop", 3, 0), params, cfg)
    for r in res:
        assert r.converged
        assert r.objective == pytest.approx(4.0, abs=0.05)
        assert r.violation <= cfg.feas_tol
        u = r.x_star.controls.reshape(80, 2)
        assert np.all(u > 0.9)


def test_fixed_point_behavior(cfg):
    params = P.sample_problem_params(5, "tabletop")
    base = solve_batch(random_inits("tabletop", 2, 1), params, cfg)
    start = next(r for r in base if r.converged)
    res = solve_local(start.x_star, params, cfg)
    assert res.converged
    assert res.outer_iters <= 2
    assert np.max(np.abs(res.x_star.to_array() - start.x_star.to_array())) <= 1e-3


@pytest.mark.parametrize("kind", P.KINDS)
def test_random_init_convergence_rate(cfg, kind):
    params = P.sample_problem_params(5, kind)
    res = solve_batch(random_inits(kind, 20, 2), params, cfg)
    converged = [r for r in res if r.converged]
    assert len(converged) >= 0.6 * len(res)
    for r in converged:
        assert r.violation <= cfg.feas_tol
        x = P.DecisionVector.from_array(r.x_star.to_array())
        assert P.violation(x, params).total <= cfg.feas_tol


def test_inner_loop_monotone_and_penalty_nondecreasing(cfg):
    params = P.sample_problem_params(5, "twocar")
    res = solve_batch(random_inits("twocar", 2, 3), params, cfg, record_history=True)
    for r in res:
        # accepted augmented-objective values never increase within a phase
        # (across phases the multiplier update may lift the value)
        assert any(len(phase) > 0 for phase in r.history["accepted_values"])
        for phase in r.history["accepted_values"]:
            assert np.all(np.diff(np.array(phase)) <= 0.0)
        rho = np.array(r.history["rho"])
        assert np.all(np.diff(rho) >= 0.0)


def test_solver_survives_divergent_guess(cfg):
    params = P.sample_problem_params(5, "tabletop")
    x = P.DecisionVector(t_final=20.0, controls=np.full(160, 1.0))
    res = solve_local(x, params, cfg)
    assert isinstance(res.converged, bool)  # never raises


def test_batched_equals_serial(cfg):
    params = P.sample_problem_params(7, "twocar")
    X = random_inits("twocar", 4, 4)
    batched = solve_batch(X, params, cfg)
    for i, rb in enumerate(batched):
        rs = solve_batch(X[i : i + 1], params, cfg)[0]
        assert np.array_equal(rs.x_star.to_array(), rb.x_star.to_array())
        assert rs.inner_iters_total == rb.inner_iters_total
        assert rs.outer_iters == rb.outer_iters
        assert rs.converged == rb.converged


# ---------------------------------------------------------------------------
# filtering and dataset generation


def _record(obj):
    return DatasetRecord(
        params=P.sample_problem_params(0, "tabletop"),
        x_star=P.DecisionVector(t_final=0.0, controls=np.zeros(160), normalized=True),
        objective=obj,
        violation=0.0,
        source_seed=0,
    )


def test_filter_by_objective():
    recs = [_record(o) for o in [9.0, 5.0, 7.0, 5.0, 11.0]]
    assert filter_by_objective(recs, np.inf) == recs
    assert filter_by_objective(recs, 4.0) == []
    median = 7.0
    kept = filter_by_objective(recs, median)
    assert [r.objective for r in kept] == [5.0, 7.0, 5.0]


def test_generate_dataset_bounds_and_validity(cfg):
    records = generate_dataset("tabletop", 2, 3, cfg, seed=1)
    assert len(records) <= 6
    for rec in records:
        assert rec.violation <= cfg.feas_tol
        assert rec.x_star.normalized
        x = P.denormalize(rec.x_star)
        assert P.violation(x, rec.params).total <= cfg.feas_tol
        assert rec.objective <= P.get_problem("tabletop").objective_threshold


def test_generate_dataset_deterministic(cfg):
    a = generate_dataset("tabletop", 2, 2, cfg, seed=3)
    b = generate_dataset("tabletop", 2, 2, cfg, seed=3)
    assert len(a) == len(b)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.x_star.to_array(), rb.x_star.to_array())
        assert ra.source_seed == rb.source_seed


def test_generate_dataset_parallel_matches_serial(cfg):
    serial = generate_dataset("tabletop", 3, 2, cfg, seed=4, workers=1)
    parallel = generate_dataset("tabletop", 3, 2, cfg, seed=4, workers=2)
    assert len(serial) == len(parallel)
    for rs, rp in zip(serial, parallel):
        assert np.array_equal(rs.x_star.to_array(), rp.x_star.to_array())
        assert rs.source_seed == rp.source_seed
