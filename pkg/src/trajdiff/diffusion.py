"""Denoising-diffusion machinery: schedule, corruption, reverse sampling.

Independent of any particular noise predictor: the sampling loop only
requires an object with ``problem_kind`` and
``forward_batch(x, k, cond, null_mask)`` returning the predicted noise.

Indexing convention: diffusion steps are 1-based (k = 1..K).  ``beta[k-1]``
and ``alpha[k-1]`` belong to step k, while ``alpha_bar`` has K + 1 entries
with ``alpha_bar[0] = 1`` (the empty product).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .problems import DecisionVector, ProblemParams, get_problem
from .seeding import STREAM_CHAIN, derived_rng

BETA_START_DEFAULT = 1e-4
BETA_END_DEFAULT = 0.02


@dataclass
class NoiseSchedule:
    """Linear-beta schedule tables over K diffusion steps."""

    K: int
    beta: np.ndarray  # (K,), beta[k-1] is the step-k noise variance
    alpha: np.ndarray  # (K,), 1 - beta
    alpha_bar: np.ndarray  # (K+1,), cumulative product, alpha_bar[0] = 1
    beta_start: float
    beta_end: float


@dataclass
class GuidanceConfig:
    """Classifier-free guidance weight and unconditional-training rate."""

    omega: float = 1.0
    p_uncond: float = 0.1

    def __post_init__(self):
        if self.omega < 0:
            raise ConfigError("omega must be nonnegative")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ConfigError("p_uncond must be a probability")


def make_schedule(
    K: int, beta_start: float = BETA_START_DEFAULT, beta_end: float = BETA_END_DEFAULT
) -> NoiseSchedule:
    """Linear interpolation of beta over K steps; alpha_bar by cumprod."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, K)
    alpha = 1.0 - beta
    alpha_bar = np.concatenate(([1.0], np.cumprod(alpha)))
    return NoiseSchedule(
        K=K,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def forward_sample(x0: np.ndarray, k, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Corrupt x0 to step k:  sqrt(ab_k) x0 + sqrt(1 - ab_k) eps.

    ``k`` may be a scalar (0 <= k <= K) or a per-row integer array when x0
    and eps are batched.
    """
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    k_arr = np.asarray(k)
    if np.any(k_arr < 0) or np.any(k_arr > sched.K):
        raise ConfigError(f"step k={k} outside [0, {sched.K}]")
    ab = sched.alpha_bar[k_arr]
    if x0.ndim == 2 and k_arr.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def guided_noise(eps_cond: np.ndarray, eps_uncond: np.ndarray, omega: float) -> np.ndarray:
    """Classifier-free guidance combination (omega + 1) e_c - omega e_u."""
    eps_cond = np.asarray(eps_cond, dtype=float)
    eps_uncond = np.asarray(eps_uncond, dtype=float)
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError("guided_noise operands differ in shape")
    return (omega + 1.0) * eps_cond - omega * eps_uncond


def reverse_step(
    x_k: np.ndarray, k: int, eps_hat: np.ndarray, z: np.ndarray, sched: NoiseSchedule
) -> np.ndarray:
    """One denoising step from x_k to x_{k-1}; caller passes z = 0 at k = 1."""
    if not 1 <= k <= sched.K:
        raise IndexError(f"step k={k} outside [1, {sched.K}]")
    beta = sched.beta[k - 1]
    alpha = sched.alpha[k - 1]
    ab = sched.alpha_bar[k]
    mean = (x_k - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
    return mean + np.sqrt(beta) * np.asarray(z, dtype=float)


def sample(
    model,
    params: ProblemParams,
    guidance: GuidanceConfig,
    sched: NoiseSchedule,
    n: int,
    seed: int,
) -> list[DecisionVector]:
    """Generate n normalized decision vectors by iterative denoising.

    Noise is drawn from per-chain derived streams, so results do not depend
    on how chains are batched.  When omega == 0 the unconditional branch is
    never evaluated.
    """
    if params.kind != model.problem_kind:
        raise ConfigError(
            f"model is for {model.problem_kind!r}, params are {params.kind!r}"
        )
    if n == 0:
        return []
    problem = get_problem(params.kind)
    dim = problem.dim
    rngs = [derived_rng(seed, STREAM_CHAIN, c) for c in range(n)]
    X = np.stack([rng.standard_normal(dim) for rng in rngs])
    y = problem.condition_vector(params)
    cond = np.broadcast_to(y, (n, y.size))
    k_col = np.empty(n, dtype=int)
    for k in range(sched.K, 0, -1):
        k_col[:] = k
        eps_cond = model.forward_batch(X, k_col, cond, null_mask=None)
        if guidance.omega == 0.0:
            eps = eps_cond
        else:
            eps_uncond = model.forward_batch(
                X, k_col, None, null_mask=np.ones(n, dtype=bool)
            )
            eps = guided_noise(eps_cond, eps_uncond, guidance.omega)
        if k > 1:
            z = np.stack([rng.standard_normal(dim) for rng in rngs])
        else:
            z = np.zeros((n, dim))
        X = reverse_step(X, k, eps, z, sched)
    X = np.clip(X, -1.0, 1.0)
    return [DecisionVector.from_array(row, normalized=True) for row in X]
