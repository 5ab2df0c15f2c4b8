"""Constraint-aligned training: violation statistics, losses, training loop.

The idea: during training, take the predicted noise at step k, apply one
deterministic-free reverse step to get a denoised candidate, clamp it to the
normalized box, and evaluate the physical constraint violation.  That
violation, divided by the violation that *feasible* data corrupted to the
same step would show on average, joins the standard noise-prediction loss.
Dividing by the per-step reference makes violations count most near the end
of denoising (small k), where clean data is nearly feasible.

Gradients flow through the model's noise output only: the corrupted sample
x_k and the reverse-step noise z are data, and the clamp passes zero
gradient outside the box.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .denoiser import (
    Denoiser,
    TrainConfig,
    diffusion_loss,
    draw_loss_randomness,
    run_training,
    training_arrays,
)
from .diffusion import NoiseSchedule, forward_sample, make_schedule
from .errors import ConfigError, TrainingDiverged
from .problems import ProblemParams, get_problem
from .seeding import STREAM_GT_NOISE, STREAM_GT_RECORDS, derived_rng

EPSILON_FLOOR_DEFAULT = 1e-3  # keeps the k=1 re-weighting denominator finite
CI_Z = 1.959963984540054  # two-sided 95% normal quantile


@dataclass
class GtViolationTable:
    """Violation statistics of forward-corrupted feasible data, per step."""

    kind: str
    K: int
    mean: np.ndarray  # (K+1,), index k = corruption step, k = 0 is identity
    std: np.ndarray
    ci95_lo: np.ndarray
    ci95_hi: np.ndarray
    n_noise: int
    m_data: int
    seed: int
    epsilon_floor: float = EPSILON_FLOOR_DEFAULT

    def denominator(self, k) -> np.ndarray:
        """Re-weighting denominator at step k: max(mean[k], floor)."""
        return np.maximum(self.mean[np.asarray(k)], self.epsilon_floor)


def _gt_rows(args):
    kind, X0s, beta_start, beta_end, K, n_noise, seed, k_lo, k_hi = args
    problem = get_problem(kind)
    sched = make_schedule(K, beta_start, beta_end)
    rows = []
    M, dim = X0s.shape
    for k in range(k_lo, k_hi):
        eps = np.concatenate(
            [
                derived_rng(seed, STREAM_GT_NOISE, m, k).standard_normal((n_noise, dim))
                for m in range(M)
            ]
        )
        x0_rep = np.repeat(X0s, n_noise, axis=0)
        xk = forward_sample(x0_rep, k, eps, sched)
        # params differ per record: evaluate per record block
        rows.append((k, xk))
    return rows


def compute_gt_violation_table(
    records,
    sched: NoiseSchedule,
    n_noise: int,
    m_data: int,
    seed: int,
    epsilon_floor: float = EPSILON_FLOOR_DEFAULT,
    workers: int = 1,
) -> GtViolationTable:
    """Corrupt sampled records at every step and aggregate violations.

    Draws ``m_data`` records (without replacement when the dataset is large
    enough), corrupts each with ``n_noise`` fresh noise draws per step k in
    0..K, denormalizes, and evaluates the violation functional.  Noise
    streams are keyed by (record, step), so any parallel split over steps
    reproduces the serial result exactly.
    """
    if n_noise < 1 or m_data < 1:
        raise ConfigError("n_noise and m_data must be >= 1")
    kind, X0, _ = training_arrays(records)
    problem = get_problem(kind)
    rng = derived_rng(seed, STREAM_GT_RECORDS)
    n = X0.shape[0]
    idx = rng.choice(n, size=m_data, replace=n < m_data)
    X0s = X0[idx]
    params_list = [records[i].params for i in idx]

    K = sched.K
    k_values = list(range(K + 1))
    mean = np.empty(K + 1)
    std = np.empty(K + 1)

    def eval_block(k):
        dim = X0s.shape[1]
        values = np.empty(m_data * n_noise)
        for m in range(m_data):
            eps = derived_rng(seed, STREAM_GT_NOISE, m, k).standard_normal(
                (n_noise, dim)
            )
            xk = forward_sample(np.repeat(X0s[m : m + 1], n_noise, axis=0), k, eps, sched)
            X_phys = problem.denormalize_array(xk)
            values[m * n_noise : (m + 1) * n_noise] = problem.violation_batch(
                X_phys, params_list[m]
            )
        return values

    if workers > 1:
        chunks = np.array_split(np.asarray(k_values), workers * 4)
        jobs = [
            (kind, X0s, [p.to_dict() for p in params_list], sched.beta_start,
             sched.beta_end, K, n_noise, seed, chunk.tolist())
            for chunk in chunks
            if chunk.size
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rows in pool.map(_gt_chunk_worker, jobs):
                for k, mu, sd in rows:
                    mean[k] = mu
                    std[k] = sd
    else:
        for k in k_values:
            values = eval_block(k)
            mean[k] = values.mean()
            std[k] = values.std(ddof=1)

    half = CI_Z * std / np.sqrt(m_data * n_noise)
    return GtViolationTable(
        kind=kind,
        K=K,
        mean=mean,
        std=std,
        ci95_lo=mean - half,
        ci95_hi=mean + half,
        n_noise=n_noise,
        m_data=m_data,
        seed=seed,
        epsilon_floor=epsilon_floor,
    )


def _gt_chunk_worker(args):
    (kind, X0s, params_dicts, beta_start, beta_end, K, n_noise, seed, ks) = args
    problem = get_problem(kind)
    sched = make_schedule(K, beta_start, beta_end)
    params_list = [ProblemParams.from_dict(d) for d in params_dicts]
    m_data, dim = X0s.shape
    out = []
    for k in ks:
        values = np.empty(m_data * n_noise)
        for m in range(m_data):
            eps = derived_rng(seed, STREAM_GT_NOISE, m, k).standard_normal(
                (n_noise, dim)
            )
            xk = forward_sample(np.repeat(X0s[m : m + 1], n_noise, axis=0), k, eps, sched)
            X_phys = problem.denormalize_array(xk)
            values[m * n_noise : (m + 1) * n_noise] = problem.violation_batch(
                X_phys, params_list[m]
            )
        out.append((k, values.mean(), values.std(ddof=1)))
    return out


# ---------------------------------------------------------------------------
# one-step reverse and the violation loss


def _reverse_terms(model, X_k, k, Y, z, sched, want_cache):
    """Conditional one-step reverse with clamp; returns gradient bookkeeping.

    coeff[i] = d x_tilde_i / d eps_hat_i (scalar per item, before the clamp).
    """
    res = model.forward_batch(X_k, k, Y, null_mask=None, want_cache=want_cache)
    eps_hat, cache = res if want_cache else (res, None)
    beta = sched.beta[k - 1][:, None]
    alpha = sched.alpha[k - 1][:, None]
    ab = sched.alpha_bar[k][:, None]
    raw = (X_k - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha) + np.sqrt(beta) * z
    x_tilde = np.clip(raw, -1.0, 1.0)
    clip_pass = ((raw > -1.0) & (raw < 1.0)).astype(float)
    coeff = -(beta / (np.sqrt(alpha) * np.sqrt(1.0 - ab)))
    return x_tilde, clip_pass, coeff, eps_hat, cache


def one_step_reverse_conditional(
    x_k: np.ndarray,
    k: int,
    model: Denoiser,
    condition: ProblemParams,
    z: np.ndarray,
    sched: NoiseSchedule,
) -> np.ndarray:
    """Denoise one step using conditional noise only, then clamp to [-1, 1]."""
    if not 1 <= k <= sched.K:
        raise ConfigError(f"step k={k} outside [1, {sched.K}]")
    problem = get_problem(model.problem_kind)
    y = problem.condition_vector(condition)[None, :]
    x_tilde, _, _, _, _ = _reverse_terms(
        model,
        np.asarray(x_k, dtype=float).reshape(1, -1),
        np.array([k]),
        y,
        np.asarray(z, dtype=float).reshape(1, -1),
        sched,
        want_cache=False,
    )
    return x_tilde[0]


def violation_terms(
    model, X0, Y, params_list, k, eps, z, sched, item_weights=None, want_grads=True
):
    """Per-item violation of the one-step-reverse prediction, with gradients.

    ``item_weights`` scales each item's contribution to the mean (used for
    the ground-truth re-weighting); gradients flow only through the model's
    noise output, into the clamp, the denormalization, and the rollout.
    """
    problem = get_problem(model.problem_kind)
    B = X0.shape[0]
    X_k = forward_sample(X0, k, eps, sched)
    x_tilde, clip_pass, coeff, eps_hat, cache = _reverse_terms(
        model, X_k, k, Y, z, sched, want_cache=want_grads
    )
    X_phys = problem.denormalize_array(x_tilde)
    per_item = np.empty(B)
    dV_phys = np.empty_like(X_phys) if want_grads else None
    # group rows sharing the same params object to batch the evaluation
    groups = {}
    for i, p in enumerate(params_list):
        groups.setdefault(id(p), (p, []))[1].append(i)
    for p, rows in groups.values():
        rows = np.asarray(rows)
        per_item[rows] = problem.violation_batch(X_phys[rows], p)
        if want_grads:
            dV_phys[rows] = problem.violation_gradient_batch(X_phys[rows], p)
    if not np.all(np.isfinite(per_item)):
        bad = int(np.argmax(~np.isfinite(per_item)))
        raise TrainingDiverged(f"non-finite violation for batch item {bad}")
    weights = np.ones(B) if item_weights is None else np.asarray(item_weights)
    loss = float((per_item * weights).mean())
    if not want_grads:
        return per_item, loss, None
    d_eps = (
        dV_phys
        * problem.box_halfwidth[None, :]
        * clip_pass
        * coeff
        * (weights / B)[:, None]
    )
    grads = model.backward(cache, d_eps)
    return per_item, loss, grads


def violation_loss(X0, Y, params_list, k_draws, model, sched, rng, want_grads=True):
    """Expected violation of one-step-reverse predictions at the given steps."""
    B = X0.shape[0]
    if B == 0:
        raise ConfigError("empty batch")
    eps = rng.standard_normal(X0.shape)
    z = rng.standard_normal(X0.shape)
    z[np.asarray(k_draws) == 1] = 0.0
    return violation_terms(
        model, X0, Y, params_list, np.asarray(k_draws), eps, z, sched,
        want_grads=want_grads,
    )


def _accumulate(total: dict, extra: dict):
    for name, g in extra.items():
        if name in total:
            total[name] = total[name] + g
        else:
            total[name] = g
    return total


def hybrid_loss(
    X0,
    Y,
    params_list,
    model,
    sched,
    gt_table: GtViolationTable,
    lambda_: float,
    p_uncond: float,
    rng,
    gt_weighting: str = "table",
    per_sample_draws: int = 8,
):
    """Noise-prediction loss plus the re-weighted violation penalty.

    With lambda = 0 this consumes exactly the draws of ``diffusion_loss``
    and returns bitwise-identical results.  Otherwise the diffusion draws
    come first (same order), then the reverse-step noise z, then any
    per-sample re-weighting draws.
    """
    if lambda_ == 0.0:
        return diffusion_loss(X0, Y, model, sched, p_uncond, rng)
    if gt_table.kind != model.problem_kind:
        raise ConfigError("ground-truth table kind does not match the model")
    if gt_table.K != sched.K:
        raise ConfigError(
            f"ground-truth table has K={gt_table.K}, schedule K={sched.K}"
        )
    B = X0.shape[0]
    if B == 0:
        raise ConfigError("empty batch")
    k, eps, b = draw_loss_randomness(rng, B, sched.K, p_uncond, X0.shape[1])
    z = rng.standard_normal(X0.shape)
    z[k == 1] = 0.0

    X_k = forward_sample(X0, k, eps, sched)
    x_tilde, clip_pass, coeff, eps_cond, cache_c = _reverse_terms(
        model, X_k, k, Y, z, sched, want_cache=True
    )

    problem = get_problem(model.problem_kind)
    X_phys = problem.denormalize_array(x_tilde)
    per_item = np.empty(B)
    dV_phys = np.empty_like(X_phys)
    groups = {}
    for i, p in enumerate(params_list):
        groups.setdefault(id(p), (p, []))[1].append(i)
    for p, rows in groups.values():
        rows = np.asarray(rows)
        per_item[rows] = problem.violation_batch(X_phys[rows], p)
        dV_phys[rows] = problem.violation_gradient_batch(X_phys[rows], p)
    if not np.all(np.isfinite(per_item)):
        bad = int(np.argmax(~np.isfinite(per_item)))
        raise TrainingDiverged(f"non-finite violation for batch item {bad}")

    if gt_weighting == "table":
        denom = gt_table.denominator(k - 1)
    else:  # per-sample expectation at step k-1, estimated on the fly
        denom = np.empty(B)
        for i in range(B):
            eps2 = rng.standard_normal((per_sample_draws, X0.shape[1]))
            xk1 = forward_sample(
                np.repeat(X0[i : i + 1], per_sample_draws, axis=0), k[i] - 1, eps2, sched
            )
            vals = problem.violation_batch(
                problem.denormalize_array(xk1), params_list[i]
            )
            denom[i] = max(vals.mean(), gt_table.epsilon_floor)
    weights = 1.0 / denom

    # diffusion part: null rows need the unconditional forward
    eps_hat_diff = eps_cond.copy()
    cache_n = None
    if np.any(b):
        eps_null, cache_n = model.forward_batch(
            X_k[b], k[b], None, null_mask=np.ones(int(b.sum()), dtype=bool),
            want_cache=True,
        )
        eps_hat_diff[b] = eps_null
    diff = eps_hat_diff - eps
    loss_diff = float((diff * diff).sum(axis=1).mean())
    loss_vio = float((per_item * weights).mean())
    total = loss_diff + lambda_ * loss_vio

    d_eps_cond = np.where(b[:, None], 0.0, 2.0 * diff / B)
    d_eps_cond = d_eps_cond + (
        dV_phys
        * problem.box_halfwidth[None, :]
        * clip_pass
        * coeff
        * (lambda_ * weights / B)[:, None]
    )
    grads = model.backward(cache_c, d_eps_cond)
    if cache_n is not None:
        grads = _accumulate(grads, model.backward(cache_n, 2.0 * diff[b] / B))
    aux = {
        "loss_diff": loss_diff,
        "loss_vio": loss_vio,
        "violation_raw_mean": float(per_item.mean()),
    }
    return total, grads, aux


def train_constrained(records, cfg: TrainConfig, sched: NoiseSchedule, gt_table):
    """Train with the hybrid loss; logs both loss components per epoch."""
    if cfg.mode != "constrained" or cfg.lambda_ <= 0:
        raise ConfigError("train_constrained requires mode='constrained', lambda > 0")
    kind, _, _ = training_arrays(records)
    if gt_table.kind != kind:
        raise ConfigError("ground-truth table kind does not match the dataset")
    if gt_table.K != sched.K:
        raise ConfigError("ground-truth table K does not match the schedule")
    params_by_row = [r.params for r in records]

    def loss_step(model, X0b, Yb, rng, idx):
        return hybrid_loss(
            X0b,
            Yb,
            [params_by_row[i] for i in idx],
            model,
            sched,
            gt_table,
            cfg.lambda_,
            cfg.p_uncond,
            rng,
            gt_weighting=cfg.gt_weighting,
            per_sample_draws=cfg.per_sample_draws,
        )

    return run_training(records, cfg, sched, loss_step, pass_indices=True)
