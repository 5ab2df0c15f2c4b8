"""Conditional noise predictor, its reverse-mode gradients, and training.

The model is a residual MLP over [x_k | time embedding | condition
embedding] with a separate feed-forward condition encoder and a learned
null-condition token for classifier-free guidance.  Forward and backward
passes are written directly against numpy so training is bit-reproducible
on CPU; gradients are checked against finite differences in the test suite.

Weights are float64 in memory; checkpoints store float32 (see persistence).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, forward_sample
from .errors import ConfigError, NumericInputError, TrainingDiverged
from .problems import ProblemParams, get_problem
from .seeding import STREAM_TRAIN, STREAM_WEIGHTS, derived_rng

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class DenoiserArch:
    """Layer widths; the trunk applies residual connections where shapes match."""

    time_embed_dim: int = 64
    cond_widths: tuple = (128, 128)
    trunk_widths: tuple = (256, 256, 256)


# The desk profile is sized for CPU runs; the paper profile keeps the
# published layer widths (512/512/1024 trunk, 256/512 condition encoder).
ARCH_PROFILES = {
    "desk": DenoiserArch(),
    "paper": DenoiserArch(
        time_embed_dim=64, cond_widths=(256, 512), trunk_widths=(512, 512, 1024)
    ),
}


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 128
    learning_rate: float = 1e-4
    p_uncond: float = 0.1
    seed: int = 0
    lambda_: float = 0.0
    mode: str = "vanilla"
    gt_weighting: str = "table"  # or "per_sample"
    per_sample_draws: int = 8
    arch: str = "desk"

    def __post_init__(self):
        if self.mode not in ("vanilla", "constrained"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if (self.lambda_ == 0.0) != (self.mode == "vanilla"):
            raise ConfigError("lambda must be 0 exactly for vanilla mode")
        if self.lambda_ < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.gt_weighting not in ("table", "per_sample"):
            raise ConfigError(f"unknown gt_weighting {self.gt_weighting!r}")
        if self.arch not in ARCH_PROFILES:
            raise ConfigError(f"unknown architecture profile {self.arch!r}")


def time_embedding(k, dim: int) -> np.ndarray:
    """Sinusoidal step embedding with geometric frequencies from 1 to 1e-4.

    ``k`` may be a scalar or an integer array; the output gains a leading
    batch axis accordingly.  All components lie in [-1, 1].
    """
    if dim % 2 != 0 or dim < 2:
        raise ConfigError("time embedding dimension must be even and >= 2")
    half = dim // 2
    if half == 1:
        freqs = np.array([1.0])
    else:
        freqs = 10.0 ** (-4.0 * np.arange(half) / (half - 1))
    k_arr = np.asarray(k, dtype=float)
    phase = k_arr[..., None] * freqs
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def _silu(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig


def _silu_grad(x, sig):
    return sig * (1.0 + x * (1.0 - sig))


class Denoiser:
    """Trainable eps-predictor for one problem kind."""

    def __init__(
        self,
        problem_kind: str,
        arch: DenoiserArch = ARCH_PROFILES["desk"],
        rng: np.random.Generator | None = None,
        params: dict | None = None,
    ):
        problem = get_problem(problem_kind)
        self.problem_kind = problem_kind
        self.arch = arch
        self.x_dim = problem.dim
        self.y_dim = problem.condition_dim
        self.cond_out_dim = arch.cond_widths[-1]
        self.trunk_in_dim = self.x_dim + arch.time_embed_dim + self.cond_out_dim
        self.null_eval_count = 0  # instrumentation: unconditional evaluations
        if params is not None:
            self.params = params
        else:
            rng = np.random.default_rng(0) if rng is None else rng
            self.params = self._init_params(rng)

    def _init_params(self, rng) -> dict:
        """Scaled-uniform fan-in init; the output layer starts at zero."""

        def layer(fan_in, fan_out):
            s = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-s, s, size=(fan_in, fan_out)), np.zeros(fan_out)

        p = {}
        widths = (self.y_dim,) + tuple(self.arch.cond_widths)
        for i in range(len(self.arch.cond_widths)):
            p[f"cond.W{i}"], p[f"cond.b{i}"] = layer(widths[i], widths[i + 1])
        p["null_token"] = np.zeros(self.cond_out_dim)
        t_widths = (self.trunk_in_dim,) + tuple(self.arch.trunk_widths)
        for i in range(len(self.arch.trunk_widths)):
            p[f"trunk.W{i}"], p[f"trunk.b{i}"] = layer(t_widths[i], t_widths[i + 1])
        p["trunk.Wout"] = np.zeros((self.arch.trunk_widths[-1], self.x_dim))
        p["trunk.bout"] = np.zeros(self.x_dim)
        return p

    # -- condition encoder ---------------------------------------------------

    def _encode_batch(self, cond, null_mask, cache):
        """(B, cond_out_dim) embeddings; hidden layers SiLU, last layer linear."""
        B = null_mask.shape[0]
        out = np.empty((B, self.cond_out_dim))
        n_null = int(null_mask.sum())
        if n_null:
            out[null_mask] = self.params["null_token"]
            self.null_eval_count += n_null
        cond_rows = ~null_mask
        if np.any(cond_rows):
            if cond is None:
                raise ConfigError("conditional rows present but no condition given")
            h = np.asarray(cond, dtype=float)[cond_rows]
            if h.shape[1] != self.y_dim:
                raise ConfigError(
                    f"condition has dim {h.shape[1]}, expected {self.y_dim}"
                )
            pres, sigs, hs = [], [], [h]
            n_layers = len(self.arch.cond_widths)
            for i in range(n_layers):
                pre = h @ self.params[f"cond.W{i}"] + self.params[f"cond.b{i}"]
                if i < n_layers - 1:
                    h, sig = _silu(pre)
                else:
                    h, sig = pre, None  # final encoder layer is linear
                pres.append(pre)
                sigs.append(sig)
                hs.append(h)
            out[cond_rows] = h
            if cache is not None:
                cache["cond"] = {"pres": pres, "sigs": sigs, "hs": hs}
        if cache is not None:
            cache["null_mask"] = null_mask
            cache["cond_rows"] = cond_rows
        return out

    def encode_condition(self, condition: ProblemParams | None) -> np.ndarray:
        """Embed one condition (or the learned null token)."""
        if condition is None:
            return self.params["null_token"].copy()
        if condition.kind != self.problem_kind:
            raise ConfigError(
                f"condition kind {condition.kind!r} does not match model "
                f"{self.problem_kind!r}"
            )
        y = get_problem(self.problem_kind).condition_vector(condition)
        return self._encode_batch(
            y[None, :], np.zeros(1, dtype=bool), cache=None
        )[0]

    # -- trunk ----------------------------------------------------------------

    def forward_batch(self, X, k, cond, null_mask=None, want_cache=False):
        """Predict noise for a batch; returns (eps_hat, cache) with a cache."""
        X = np.asarray(X, dtype=float)
        if not np.all(np.isfinite(X)):
            raise NumericInputError("non-finite input to the denoiser")
        B = X.shape[0]
        if null_mask is None:
            null_mask = np.zeros(B, dtype=bool)
        cache = {} if want_cache else None
        T = time_embedding(np.asarray(k), self.arch.time_embed_dim)
        if T.ndim == 1:
            T = np.broadcast_to(T, (B, T.size))
        E = self._encode_batch(cond, null_mask, cache)
        Z = np.concatenate([X, T, E], axis=1)

        n_layers = len(self.arch.trunk_widths)
        pres, sigs, hs, residuals = [], [], [Z], []
        h = Z
        for i in range(n_layers):
            pre = h @ self.params[f"trunk.W{i}"] + self.params[f"trunk.b{i}"]
            a, sig = _silu(pre)
            residual = a.shape[1] == h.shape[1]
            h = a + h if residual else a
            pres.append(pre)
            sigs.append(sig)
            hs.append(h)
            residuals.append(residual)
        out = h @ self.params["trunk.Wout"] + self.params["trunk.bout"]
        if want_cache:
            cache["trunk"] = {
                "pres": pres,
                "sigs": sigs,
                "hs": hs,
                "residuals": residuals,
            }
            return out, cache
        return out

    def forward(self, x_k: np.ndarray, k: int, condition: ProblemParams | None) -> np.ndarray:
        """Single-vector forward pass."""
        x_k = np.asarray(x_k, dtype=float).reshape(1, -1)
        if condition is None:
            return self.forward_batch(
                x_k, np.array([k]), None, null_mask=np.ones(1, dtype=bool)
            )[0]
        if condition.kind != self.problem_kind:
            raise ConfigError(
                f"condition kind {condition.kind!r} does not match model "
                f"{self.problem_kind!r}"
            )
        y = get_problem(self.problem_kind).condition_vector(condition)
        return self.forward_batch(x_k, np.array([k]), y[None, :])[0]

    def backward(self, cache, dout, want_dx=False):
        """Accumulate dLoss/dparams from dLoss/dout; optionally dLoss/dx."""
        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        tr = cache["trunk"]
        h_last = tr["hs"][-1]
        grads["trunk.Wout"] = h_last.T @ dout
        grads["trunk.bout"] = dout.sum(axis=0)
        dh = dout @ self.params["trunk.Wout"].T
        for i in reversed(range(len(self.arch.trunk_widths))):
            dpre = dh * _silu_grad(tr["pres"][i], tr["sigs"][i])
            h_in = tr["hs"][i]
            grads[f"trunk.W{i}"] = h_in.T @ dpre
            grads[f"trunk.b{i}"] = dpre.sum(axis=0)
            dh_new = dpre @ self.params[f"trunk.W{i}"].T
            dh = dh_new + dh if tr["residuals"][i] else dh_new
        dZ = dh
        dE = dZ[:, self.x_dim + self.arch.time_embed_dim :]
        null_mask = cache["null_mask"]
        if np.any(null_mask):
            grads["null_token"] = dE[null_mask].sum(axis=0)
        cond_rows = cache["cond_rows"]
        if np.any(cond_rows):
            ce = cache["cond"]
            dh_c = dE[cond_rows]
            n_layers = len(self.arch.cond_widths)
            for i in reversed(range(n_layers)):
                if i < n_layers - 1:
                    dpre = dh_c * _silu_grad(ce["pres"][i], ce["sigs"][i])
                else:
                    dpre = dh_c  # linear output layer
                grads[f"cond.W{i}"] = ce["hs"][i].T @ dpre
                grads[f"cond.b{i}"] = dpre.sum(axis=0)
                dh_c = dpre @ self.params[f"cond.W{i}"].T
        if want_dx:
            return grads, dZ[:, : self.x_dim]
        return grads


class Adam:
    """Standard Adam with per-parameter state, deterministic update order."""

    def __init__(self, params: dict, lr: float):
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = ADAM_BETAS
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name in sorted(params):
            gr = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * gr
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * gr * gr
            params[name] -= (
                self.lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + ADAM_EPS)
            )


# ---------------------------------------------------------------------------
# diffusion loss and vanilla training


def draw_loss_randomness(rng, B, K, p_uncond, dim):
    """Per-item step, noise, and null-condition draws, in a frozen order."""
    k = rng.integers(1, K + 1, size=B)
    eps = rng.standard_normal((B, dim))
    b = rng.random(B) < p_uncond
    return k, eps, b


def diffusion_loss_terms(model, X0, Y, k, eps, b_mask, sched, want_grads=True):
    """Noise-prediction MSE given frozen draws; no randomness inside."""
    X_k = forward_sample(X0, k, eps, sched)
    res = model.forward_batch(X_k, k, Y, null_mask=b_mask, want_cache=want_grads)
    eps_hat, cache = res if want_grads else (res, None)
    diff = eps_hat - eps
    loss = float((diff * diff).sum(axis=1).mean())
    if not want_grads:
        return loss, None
    grads = model.backward(cache, 2.0 * diff / X0.shape[0])
    return loss, grads


def diffusion_loss(X0, Y, model, sched, p_uncond, rng, want_grads=True):
    """Classifier-free-guidance training loss over one batch.

    X0 rows are normalized decision vectors, Y rows the scaled conditions.
    """
    if X0.shape[0] == 0:
        raise ConfigError("empty batch")
    k, eps, b = draw_loss_randomness(rng, X0.shape[0], sched.K, p_uncond, X0.shape[1])
    loss, grads = diffusion_loss_terms(model, X0, Y, k, eps, b, sched, want_grads)
    return loss, grads, {"loss_diff": loss, "loss_vio": 0.0}


def training_arrays(records):
    """Stack normalized solutions and scaled condition vectors from records."""
    if not records:
        raise ConfigError("dataset is empty")
    kinds = {r.params.kind for r in records}
    if len(kinds) != 1:
        raise ConfigError(f"dataset mixes problem kinds {sorted(kinds)}")
    kind = kinds.pop()
    problem = get_problem(kind)
    X0 = np.stack([r.x_star.to_array() for r in records])
    for r in records:
        if not r.x_star.normalized:
            raise ConfigError("dataset records must store normalized solutions")
    Y = np.stack([problem.condition_vector(r.params) for r in records])
    return kind, X0, Y


def run_training(records, cfg: TrainConfig, sched: NoiseSchedule, loss_step,
                 pass_indices: bool = False):
    """Shared Adam loop; ``loss_step(model, X0b, Yb, rng[, idx])`` returns
    (loss, grads, aux)."""
    kind, X0, Y = training_arrays(records)
    model = Denoiser(
        kind,
        ARCH_PROFILES[cfg.arch],
        rng=derived_rng(cfg.seed, STREAM_WEIGHTS),
    )
    opt = Adam(model.params, cfg.learning_rate)
    rng = derived_rng(cfg.seed, STREAM_TRAIN)
    n = X0.shape[0]
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        sums = {"loss": 0.0, "loss_diff": 0.0, "loss_vio": 0.0}
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if pass_indices:
                loss, grads, aux = loss_step(model, X0[idx], Y[idx], rng, idx)
            else:
                loss, grads, aux = loss_step(model, X0[idx], Y[idx], rng)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(batch start {start}, lr {cfg.learning_rate})"
                )
            opt.step(model.params, grads)
            step += 1
            n_batches += 1
            sums["loss"] += loss
            sums["loss_diff"] += aux["loss_diff"]
            sums["loss_vio"] += aux["loss_vio"]
        history.append(
            {
                "epoch": epoch,
                "loss": sums["loss"] / n_batches,
                "loss_diff": sums["loss_diff"] / n_batches,
                "loss_vio": sums["loss_vio"] / n_batches,
            }
        )
    return model, history


def train_vanilla(records, cfg: TrainConfig, sched: NoiseSchedule):
    """Train the unconstrained noise predictor; returns (model, history)."""
    if cfg.mode != "vanilla":
        raise ConfigError("train_vanilla requires mode='vanilla'")

    def loss_step(model, X0b, Yb, rng):
        return diffusion_loss(X0b, Yb, model, sched, cfg.p_uncond, rng)

    return run_training(records, cfg, sched, loss_step)
