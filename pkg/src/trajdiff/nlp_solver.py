"""Local NLP solver and dataset generation.

The solver is an augmented-Lagrangian method: the outer loop maintains
multiplier estimates for the inequality/equality constraints and a
non-decreasing quadratic penalty; the inner loop minimizes the augmented
objective with projected gradient descent onto the decision box, using a
backtracking step size.  Iterates live in normalized [-1, 1] coordinates so
every component is equally scaled.

Chains are mathematically independent, so a whole batch of initial guesses
is advanced in lockstep with per-chain step sizes, multipliers, and penalty
parameters; all array operations are elementwise across chains, which makes
batched execution bitwise identical to one-at-a-time solves.

Multipliers are warm-started by a clipped least-squares fit of the KKT
stationarity residual on the free (non-bound-active) coordinates, which makes
already-optimal initial guesses converge in one or two outer iterations.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .problems import (
    DecisionVector,
    ProblemParams,
    get_problem,
    sample_problem_params,
)
from .seeding import STREAM_INIT_GUESS, STREAM_PARAMS, derived_seed_int

logger = logging.getLogger(__name__)

ARMIJO_C1 = 1e-4
STEP_SHRINK = 0.5
STEP_MIN = 1e-14
STEP_MAX = 1e8
BB_FALLBACK_GROWTH = 2.0  # trial-step growth when BB curvature is unusable
MULTIPLIER_CAP = 100.0
ACTIVE_TOL = 0.1  # inequality considered near-active for multiplier estimation
WARMSTART_VIOL_MAX = 1.0  # estimate multipliers only for near-feasible guesses
PROGRESS_FACTOR = 0.5  # required violation decrease at a multiplier update
SOLVED_FACTOR = 10.0  # subproblem counts as solved at pg <= SOLVED_FACTOR * opt_tol
PRECOND_PROBES = 6  # Hutchinson probes for the Gauss-Newton diagonal
PRECOND_PROBE_SEED = 7_117  # shared probe signs; fixed so batching is immaterial
PRECOND_RIDGE = 1e-3  # relative ridge on the estimated curvature diagonal


@dataclass
class SolveConfig:
    """Augmented-Lagrangian solver settings."""

    max_outer_iters: int = 20
    max_inner_iters: int = 400
    penalty_init: float = 1.0
    penalty_growth: float = 5.0
    feas_tol: float = 1e-4
    opt_tol: float = 1e-3
    step_rule: str = "backtracking"

    def __post_init__(self):
        if self.feas_tol <= 0 or self.opt_tol <= 0:
            raise ConfigError("feas_tol and opt_tol must be positive")
        if self.penalty_growth <= 1.0:
            raise ConfigError("penalty_growth must exceed 1")
        if self.step_rule != "backtracking":
            raise ConfigError(f"unknown step rule {self.step_rule!r}")


@dataclass
class SolveResult:
    x_star: DecisionVector  # physical units
    objective: float
    violation: float
    converged: bool
    outer_iters: int
    inner_iters_total: int
    wall_time: float
    history: dict | None = None


@dataclass
class DatasetRecord:
    """One locally-optimal training pair (x*, y)."""

    params: ProblemParams
    x_star: DecisionVector  # normalized
    objective: float
    violation: float
    source_seed: int


def _estimate_multipliers(problem, params, Z, g, h):
    """Least-squares multiplier warm start from the KKT residual.

    Works per chain: fits grad J + J_c^T y = 0 on the coordinates strictly
    inside the box, over near-active inequalities plus all equalities, then
    clips inequality multipliers to be nonnegative.
    """
    B = Z.shape[0]
    lam = np.zeros_like(g)
    mu = np.zeros_like(h)
    hw = problem.box_halfwidth
    for b in range(B):
        active = np.where(g[b] > -ACTIVE_TOL)[0]
        n_act, n_eq = active.size, h.shape[1]
        rows = n_act + n_eq
        if rows == 0:
            continue
        w_ineq = np.zeros((rows, g.shape[1]))
        w_ineq[np.arange(n_act), active] = 1.0
        w_eq = np.zeros((rows, n_eq))
        w_eq[n_act + np.arange(n_eq), np.arange(n_eq)] = 1.0
        X_rep = np.repeat(problem.denormalize_array(Z[b : b + 1]), rows, axis=0)
        J = problem.weighted_constraint_gradient_batch(X_rep, params, w_ineq, w_eq)
        free = np.abs(Z[b]) < 1.0 - 1e-9
        if not np.any(free):
            continue
        Jn = (J * hw[None, :])[:, free]
        obj_grad = np.zeros(problem.dim)
        obj_grad[0] = hw[0]
        y, *_ = np.linalg.lstsq(Jn.T, -obj_grad[free], rcond=None)
        lam[b, active] = np.clip(y[:n_act], 0.0, MULTIPLIER_CAP)
        mu[b] = np.clip(y[n_act:], -MULTIPLIER_CAP, MULTIPLIER_CAP)
    return lam, mu


def _al_value(problem, params, Z, lam, mu, rho):
    """Augmented objective per chain plus raw constraint values."""
    X = problem.denormalize_array(Z)
    g, h = problem.constraint_values_batch(X, params)
    he = h + mu / rho[:, None]
    ge = np.maximum(0.0, g + lam / rho[:, None])
    val = X[:, 0] + 0.5 * rho * ((he * he).sum(axis=1) + (ge * ge).sum(axis=1))
    return val, g, h


def _constraints(problem, params, Z):
    return problem.constraint_values_batch(problem.denormalize_array(Z), params)


def _al_gradient(problem, params, Z, lam, mu, rho):
    """Gradient of the augmented objective in normalized coordinates."""
    X = problem.denormalize_array(Z)
    g, h = problem.constraint_values_batch(X, params)
    w_ineq = rho[:, None] * np.maximum(0.0, g + lam / rho[:, None])
    w_eq = rho[:, None] * h + mu
    gx = problem.weighted_constraint_gradient_batch(X, params, w_ineq, w_eq)
    gx[:, 0] += 1.0  # objective is the final time
    return gx * problem.box_halfwidth[None, :]


def _violation_from(g, h):
    return np.maximum(g, 0.0).sum(axis=1) + np.abs(h).sum(axis=1)


def _gn_diagonal(problem, params, Z, g, lam, rho, outer):
    """Hutchinson estimate of the Gauss-Newton diagonal of the AL.

    With random signs s, E[(sum_j s_j sqrt(w_j) grad c_j)_i^2] equals
    sum_j w_j (grad c_j)_i^2, the GN curvature of the quadratic penalty.
    The probe signs are shared across chains and fixed per outer phase, so
    batched and one-at-a-time solves see identical numbers.
    """
    X = problem.denormalize_array(Z)
    act = (g + lam / rho[:, None]) > 0
    w_g = np.sqrt(rho)[:, None] * act
    w_h = np.broadcast_to(np.sqrt(rho)[:, None], (Z.shape[0], problem.n_eq))
    rng = np.random.default_rng(PRECOND_PROBE_SEED + outer)
    acc = np.zeros_like(Z)
    for _ in range(PRECOND_PROBES):
        sg = rng.choice([-1.0, 1.0], size=g.shape[1])
        sh = rng.choice([-1.0, 1.0], size=problem.n_eq)
        r = problem.weighted_constraint_gradient_batch(X, params, w_g * sg, w_h * sh)
        rn = r * problem.box_halfwidth[None, :]
        acc += rn * rn
    return acc / PRECOND_PROBES


def solve_batch(
    X_init: np.ndarray,
    params: ProblemParams,
    cfg: SolveConfig,
    record_history: bool = False,
) -> list[SolveResult]:
    """Solve one instance from a batch of physical-space initial guesses."""
    problem = get_problem(params.kind)
    t_start = time.perf_counter()
    X_init = np.atleast_2d(np.asarray(X_init, dtype=float))
    B = X_init.shape[0]
    Z = np.clip(problem.normalize_array(X_init), -1.0, 1.0)

    g, h = _constraints(problem, params, Z)
    viol = _violation_from(g, h)
    lam = np.zeros_like(g)
    mu = np.zeros_like(h)
    warm = viol <= WARMSTART_VIOL_MAX
    if np.any(warm):
        lam_w, mu_w = _estimate_multipliers(problem, params, Z[warm], g[warm], h[warm])
        lam[warm] = lam_w
        mu[warm] = mu_w
    rho = np.full(B, cfg.penalty_init)
    val, g, h = _al_value(problem, params, Z, lam, mu, rho)
    viol_ref = viol.copy()  # violation at the last multiplier update

    inner_iters = np.zeros(B, dtype=int)
    outer_iters = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    pg_inf = np.full(B, np.inf)

    best_Z = Z.copy()
    best_viol = viol.copy()
    best_obj = problem.denormalize_array(Z)[:, 0].copy()

    history = (
        {"accepted_values": [[] for _ in range(B)], "rho": [[] for _ in range(B)]}
        if record_history
        else None
    )

    grad = np.zeros_like(Z)
    need_grad = np.ones(B, dtype=bool)
    # spectral (Barzilai-Borwein) trial steps in a diagonally preconditioned
    # metric, refined by backtracking
    eta = np.ones(B)
    D = np.ones_like(Z)
    Dinv = np.ones_like(Z)
    prev_Z = np.zeros_like(Z)
    prev_grad = np.zeros_like(Z)
    have_prev = np.zeros(B, dtype=bool)

    def update_best(idx):
        obj = problem.denormalize_array(Z[idx])[:, 0]
        v = viol[idx]
        for pos, b in enumerate(np.where(idx)[0]):
            better = False
            if v[pos] <= cfg.feas_tol and best_viol[b] <= cfg.feas_tol:
                better = obj[pos] < best_obj[b]
            elif v[pos] <= cfg.feas_tol:
                better = True
            elif best_viol[b] > cfg.feas_tol:
                better = v[pos] < best_viol[b]
            if better:
                best_Z[b] = Z[b]
                best_viol[b] = v[pos]
                best_obj[b] = obj[pos]

    for outer in range(cfg.max_outer_iters):
        active_outer = ~(converged | failed)
        if not np.any(active_outer):
            break
        outer_iters[active_outer] += 1
        if history is not None:
            for b in np.where(active_outer)[0]:
                history["rho"][b].append(float(rho[b]))
                history["accepted_values"][b].append([])

        sel = active_outer
        diag = _gn_diagonal(problem, params, Z[sel], g[sel], lam[sel], rho[sel], outer)
        ridge = PRECOND_RIDGE * diag.max(axis=1, keepdims=True) + 1e-12
        Dsel = 1.0 / (diag + ridge)
        D[sel] = Dsel / Dsel.max(axis=1, keepdims=True)
        Dinv[sel] = 1.0 / D[sel]

        inner_done = ~active_outer
        phase_iters = np.zeros(B, dtype=int)
        have_prev[:] = False  # BB memory is stale once multipliers change
        while not np.all(inner_done):
            act = ~inner_done
            if np.any(need_grad & act):
                sel = need_grad & act
                grad[sel] = _al_gradient(
                    problem, params, Z[sel], lam[sel], mu[sel], rho[sel]
                )
                nf = sel & ~np.all(np.isfinite(grad), axis=1)
                if np.any(nf):
                    failed |= nf
                    inner_done |= nf
                    act &= ~nf
                need_grad[sel] = False
                # fresh gradient: pick the trial step (BB1 in the D metric)
                fresh = sel & act
                if np.any(fresh):
                    bb = np.full(B, np.nan)
                    with_hist = fresh & have_prev
                    if np.any(with_hist):
                        dz = Z[with_hist] - prev_Z[with_hist]
                        dg = grad[with_hist] - prev_grad[with_hist]
                        sy = np.einsum("bi,bi->b", dz, dg)
                        ss = np.einsum("bi,bi,bi->b", dz, Dinv[with_hist], dz)
                        bb_val = np.where(sy > 1e-16, ss / np.maximum(sy, 1e-300), np.nan)
                        bb[with_hist] = bb_val
                    no_hist = fresh & ~have_prev
                    if np.any(no_hist):
                        gmax = np.abs(D[no_hist] * grad[no_hist]).max(axis=1)
                        bb[no_hist] = 1.0 / np.maximum(gmax, 1e-8)
                    eta[fresh] = np.where(
                        np.isfinite(bb[fresh]),
                        np.clip(bb[fresh], STEP_MIN, STEP_MAX),
                        np.clip(eta[fresh] * BB_FALLBACK_GROWTH, STEP_MIN, STEP_MAX),
                    )
                    prev_Z[fresh] = Z[fresh]
                    prev_grad[fresh] = grad[fresh]
                    have_prev[fresh] = True
                if not np.any(act):
                    continue
            pg = Z[act] - np.clip(Z[act] - grad[act], -1.0, 1.0)
            pg_inf[act] = np.abs(pg).max(axis=1)
            stationary = np.zeros(B, dtype=bool)
            stationary[act] = pg_inf[act] <= cfg.opt_tol
            inner_done |= stationary
            act &= ~stationary
            if not np.any(act):
                continue

            Z_new = np.clip(Z[act] - (eta[act, None] * D[act]) * grad[act], -1.0, 1.0)
            dz = Z_new - Z[act]
            step_sq = np.einsum("bi,bi,bi->b", dz, Dinv[act], dz)
            val_new, g_new, h_new = _al_value(
                problem, params, Z_new, lam[act], mu[act], rho[act]
            )
            ok = np.isfinite(val_new)
            accept = ok & (val_new <= val[act] - ARMIJO_C1 / eta[act] * step_sq)

            idx_act = np.where(act)[0]
            acc_idx = idx_act[accept]
            rej_idx = idx_act[~accept]
            if acc_idx.size:
                Z[acc_idx] = Z_new[accept]
                val[acc_idx] = val_new[accept]
                g[acc_idx] = g_new[accept]
                h[acc_idx] = h_new[accept]
                viol[acc_idx] = _violation_from(g_new[accept], h_new[accept])
                need_grad[acc_idx] = True
                if history is not None:
                    for b, v in zip(acc_idx, val_new[accept]):
                        history["accepted_values"][b][-1].append(float(v))
            if rej_idx.size:
                eta[rej_idx] *= STEP_SHRINK
                dead = rej_idx[eta[rej_idx] < STEP_MIN]
                inner_done[dead] = True
            phase_iters[idx_act] += 1
            inner_iters[idx_act] += 1
            inner_done |= phase_iters >= cfg.max_inner_iters

        # outer bookkeeping: convergence, multiplier updates, penalty growth
        act = ~(converged | failed)
        if not np.any(act):
            break
        update_best(act)
        newly = act & (viol <= cfg.feas_tol) & (pg_inf <= cfg.opt_tol)
        converged |= newly
        act &= ~newly
        if np.any(act):
            improve = act & (viol <= np.maximum(cfg.feas_tol, PROGRESS_FACTOR * viol_ref))
            lam[improve] = np.maximum(0.0, lam[improve] + rho[improve, None] * g[improve])
            mu[improve] += rho[improve, None] * h[improve]
            viol_ref[improve] = viol[improve]
            # grow the penalty only when the subproblem was approximately
            # solved yet feasibility stalled; an unsolved subproblem just
            # gets another phase of minimization
            grow = act & ~improve & (pg_inf <= SOLVED_FACTOR * cfg.opt_tol)
            rho[grow] *= cfg.penalty_growth
            changed = improve | grow
            if np.any(changed):
                val[changed], _, _ = _al_value(
                    problem, params, Z[changed], lam[changed], mu[changed], rho[changed]
                )
            need_grad[act] = True

    update_best(~failed)
    elapsed = time.perf_counter() - t_start

    results = []
    for b in range(B):
        Xb = problem.denormalize_array(best_Z[b] if not converged[b] else Z[b])
        res = SolveResult(
            x_star=DecisionVector.from_array(Xb),
            objective=float(Xb[0]),
            violation=float(
                viol[b] if converged[b] else best_viol[b]
            ),
            converged=bool(converged[b]),
            outer_iters=int(outer_iters[b]),
            inner_iters_total=int(inner_iters[b]),
            wall_time=elapsed / B,
            history=None
            if history is None
            else {
                "accepted_values": history["accepted_values"][b],
                "rho": history["rho"][b],
            },
        )
        results.append(res)
    return results


def solve_local(
    x_init: DecisionVector,
    params: ProblemParams,
    cfg: SolveConfig,
    record_history: bool = False,
) -> SolveResult:
    """Solve a single instance from one initial guess (physical units)."""
    if x_init.normalized:
        raise ConfigError("solve_local expects a physical-space initial guess")
    res = solve_batch(
        x_init.to_array()[None, :], params, cfg, record_history=record_history
    )[0]
    res.wall_time *= 1.0  # B = 1: per-guess timing is exact
    return res


# ---------------------------------------------------------------------------
# dataset generation


def filter_by_objective(records: list[DatasetRecord], threshold: float) -> list[DatasetRecord]:
    """Keep records with objective <= threshold, preserving order."""
    return [r for r in records if r.objective <= threshold]


def _uniform_guess(problem, rng) -> np.ndarray:
    return rng.uniform(problem.lower, problem.upper)


def _instance_records(args) -> tuple[list[DatasetRecord], dict]:
    kind, master_seed, index, solves, cfg, threshold = args
    problem = get_problem(kind)
    params = sample_problem_params(
        derived_seed_int(master_seed, STREAM_PARAMS, index), kind
    )
    init_seeds = [
        derived_seed_int(master_seed, STREAM_INIT_GUESS, index, j)
        for j in range(solves)
    ]
    X_init = np.stack(
        [_uniform_guess(problem, np.random.default_rng(s)) for s in init_seeds]
    )
    results = solve_batch(X_init, params, cfg)
    records = []
    n_converged = 0
    for seed_j, res in zip(init_seeds, results):
        if not res.converged:
            continue
        n_converged += 1
        if res.objective > threshold:
            continue
        records.append(
            DatasetRecord(
                params=params,
                x_star=DecisionVector.from_array(
                    problem.normalize_array(res.x_star.to_array()), normalized=True
                ),
                objective=res.objective,
                violation=res.violation,
                source_seed=seed_j,
            )
        )
    stats = {
        "instance": index,
        "attempted": solves,
        "converged": n_converged,
        "kept": len(records),
    }
    if not records:
        logger.warning("instance %d produced no usable solutions; skipped", index)
    return records, stats


def generate_dataset(
    kind: str,
    n_instances: int,
    solves_per_instance: int,
    cfg: SolveConfig,
    seed: int,
    objective_threshold: float | None = None,
    workers: int = 1,
    return_stats: bool = False,
):
    """Sample instances, solve from uniform random guesses, keep good solutions.

    Deterministic for a given seed: per-instance parameter and per-solve
    initial-guess seeds are derived with fixed spawn keys, and record order is
    (instance, solve) regardless of worker count.
    """
    if n_instances < 1:
        raise ConfigError("n_instances must be >= 1")
    problem = get_problem(kind)
    threshold = (
        problem.objective_threshold if objective_threshold is None else objective_threshold
    )
    jobs = [
        (kind, seed, i, solves_per_instance, cfg, threshold) for i in range(n_instances)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_instance_records, jobs, chunksize=1))
    else:
        outputs = [_instance_records(job) for job in jobs]
    records = [r for recs, _ in outputs for r in recs]
    if return_stats:
        return records, [s for _, s in outputs]
    return records
