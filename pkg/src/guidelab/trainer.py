"""Score-matching training loop with Adam, inverse-sqrt LR decay, and
power-function EMA tracking at several widths.

Noise levels are drawn log-normally. Targets are either the analytic
mixture score at the noised point (exact score matching) or the plain
denoising target (clean - noisy) / sigma^2; both minimize the same thing in
expectation and trained models should agree closely.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

from . import mixture as mx
from . import netmodel as nm
from .streams import derive_rng, restore_rng

LOSS_KINDS = ("exact_sm", "denoising_sm")
DEFAULT_EMA_GRID = (0.005, 0.010, 0.025, 0.050)


@dataclass
class TrainConfig:
    iterations: int
    batch_size: int = 4096
    p_mean: float = -2.3
    p_std: float = 1.5
    alpha_ref: float = 0.01
    t_ref: int = 512
    loss_kind: str = "exact_sm"
    ema_sigma_rels: tuple[float, ...] = DEFAULT_EMA_GRID
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 2:
            raise ValueError("iterations must be >= 0 and batch_size positive")
        if self.p_std <= 0 or self.alpha_ref <= 0 or self.t_ref < 1:
            raise ValueError("invalid schedule parameters")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        for r in self.ema_sigma_rels:
            if not 0.0 < r < 0.28:
                raise ValueError("ema sigma_rel must lie in (0, 0.28)")


def sample_noise_levels(config: TrainConfig, rng: np.random.Generator, count: int) -> np.ndarray:
    return np.exp(config.p_mean + config.p_std * rng.standard_normal(count))


def learning_rate(config: TrainConfig, step: int) -> float:
    return config.alpha_ref / np.sqrt(max(step / config.t_ref, 1.0))


# ---------------------------------------------------------------------------
# power-function EMA

def ema_profile_weights(exponent: float, steps: int) -> np.ndarray:
    """Exact contribution of each step to the final average.

    The tracker update is averaged <- (1-beta_t) averaged + beta_t current
    with beta_t = min(1, (exponent+1)/t), so step t ends up with weight
    beta_t * prod_{s>t} (1 - beta_s). Early full-replacement steps zero out
    everything before them.
    """
    t = np.arange(1, steps + 1, dtype=np.float64)
    beta = np.minimum(1.0, (exponent + 1.0) / t)
    one_minus = 1.0 - beta
    suffix = np.ones(steps)
    if steps > 1:
        suffix[:-1] = np.cumprod(one_minus[::-1])[::-1][1:]
    return beta * suffix


def profile_relative_std(exponent: float, steps: int) -> float:
    """Std of the profile's step position, as a fraction of training length."""
    w = ema_profile_weights(exponent, steps)
    pos = np.arange(1, steps + 1) / steps
    m = float((w * pos).sum())
    var = float((w * pos * pos).sum()) - m * m
    return float(np.sqrt(max(var, 0.0)))


def closed_form_relative_std(exponent: float) -> float:
    """Continuous-limit profile std: sqrt((g+1) / ((g+2)^2 (g+3)))."""
    g = exponent
    return float(np.sqrt((g + 1.0) / ((g + 2.0) ** 2 * (g + 3.0))))


def exponent_for_sigma_rel(sigma_rel: float, steps: int = 10_000) -> float:
    """Bisect the simulated profile std down to the requested width."""
    if not 0.0 < sigma_rel < profile_relative_std(0.0, steps):
        raise ValueError(f"sigma_rel {sigma_rel} outside attainable range")
    lo, hi = 0.0, 1e7  # profile std decreases monotonically in the exponent
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if profile_relative_std(mid, steps) > sigma_rel:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class EmaTracker:
    sigma_rel: float
    exponent: float
    averaged: nm.ModelParams

    def update(self, current: nm.ModelParams, step: int) -> None:
        beta = min(1.0, (self.exponent + 1.0) / step)
        for a, c in zip(self.averaged.layer_weights, current.layer_weights):
            a *= 1.0 - beta
            a += beta * c
        self.averaged.output_gain = (1.0 - beta) * self.averaged.output_gain \
            + beta * current.output_gain


# ---------------------------------------------------------------------------
# Adam

class AdamState:
    def __init__(self, params: nm.ModelParams, config: TrainConfig):
        self.m = [np.zeros_like(w) for w in params.layer_weights]
        self.v = [np.zeros_like(w) for w in params.layer_weights]
        self.mg = 0.0
        self.vg = 0.0
        self.config = config

    def step(self, params: nm.ModelParams, grads: nm.ParamGrads, t: int, lr: float) -> None:
        c = self.config
        b1c = 1.0 - c.adam_beta1 ** t
        b2c = 1.0 - c.adam_beta2 ** t
        for i, g in enumerate(grads.layer_weights):
            self.m[i] = c.adam_beta1 * self.m[i] + (1 - c.adam_beta1) * g
            self.v[i] = c.adam_beta2 * self.v[i] + (1 - c.adam_beta2) * g * g
            w = params.layer_weights[i]
            w -= lr * (self.m[i] / b1c) / (np.sqrt(self.v[i] / b2c) + c.adam_eps)
            # forced weight normalization: stored rows stay unit length so the
            # per-step rotation rate does not decay as norms drift
            w /= np.linalg.norm(w, axis=1, keepdims=True)
        self.mg = c.adam_beta1 * self.mg + (1 - c.adam_beta1) * grads.output_gain
        self.vg = c.adam_beta2 * self.vg + (1 - c.adam_beta2) * grads.output_gain ** 2
        params.output_gain -= lr * (self.mg / b1c) / (np.sqrt(self.vg / b2c) + c.adam_eps)


# ---------------------------------------------------------------------------
# batch construction

def _fill_samples(pack, rows, sigmas, u, z, out):
    lw, mu, cov = pack
    cum = np.cumsum(np.exp(lw))
    cum /= cum[-1]
    idx = np.minimum(np.searchsorted(cum, u[rows]), lw.shape[0] - 1)
    s2 = sigmas[rows] ** 2
    a = cov[idx, 0] + s2
    b = cov[idx, 1]
    c = cov[idx, 2] + s2
    l11 = np.sqrt(a)
    l21 = b / l11
    l22 = np.sqrt(c - l21 * l21)
    zr = z[rows]
    out[rows, 0] = mu[idx, 0] + l11 * zr[:, 0]
    out[rows, 1] = mu[idx, 1] + l21 * zr[:, 0] + l22 * zr[:, 1]


def draw_training_batch(spec: mx.MixtureSpec, config: TrainConfig, labels, rng):
    """One batch: (x, sigmas, targets).

    Stream layout per iteration: batch_size normals for log-sigma, batch_size
    uniforms for component choice, batch_size normal pairs for the point, and
    for the denoising loss one extra batch of normal pairs for the noise.
    """
    B = config.batch_size
    sigmas = sample_noise_levels(config, rng, B)
    u = rng.random(B)
    z = rng.standard_normal((B, 2))
    x = np.empty((B, 2))
    if config.loss_kind == "exact_sm":
        _fill_rows(spec, labels, sigmas, u, z, x)
        targets = _score_rows(spec, labels, x, sigmas)
    else:
        clean = np.empty((B, 2))
        _fill_rows(spec, labels, np.zeros(B), u, z, clean)
        noise = rng.standard_normal((B, 2))
        x[:] = clean + sigmas[:, None] * noise
        targets = (clean - x) / (sigmas ** 2)[:, None]
    return x, sigmas, targets


def _fill_rows(spec, labels, sigmas, u, z, out):
    if labels is None:
        _fill_samples(spec.packed(None), np.arange(u.shape[0]), sigmas, u, z, out)
    else:
        for c in range(spec.n_classes):
            rows = np.flatnonzero(labels == c)
            if rows.size:
                _fill_samples(spec.packed(c), rows, sigmas, u, z, out)


def _score_rows(spec, labels, x, sigmas):
    if labels is None:
        return mx.score(spec, None, x, sigmas)
    out = np.empty_like(x)
    for c in range(spec.n_classes):
        rows = np.flatnonzero(labels == c)
        if rows.size:
            out[rows] = mx.score(spec, c, x[rows], sigmas[rows])
    return out


# ---------------------------------------------------------------------------
# main loop

@dataclass
class TrainResult:
    params: nm.ModelParams
    ema: dict[float, nm.ModelParams]
    losses: np.ndarray
    steps: int
    rng_state: dict | None = None


def train(params: nm.ModelParams, spec: mx.MixtureSpec, config: TrainConfig,
          resume: nm.CheckpointBundle | None = None, checkpoint_path=None,
          checkpoint_every: int = 0, progress: bool = False) -> TrainResult:
    """Run (or continue) training; params is modified in place.

    Resume restores the step counter, EMA tables, and the noise stream, so a
    continued run sees exactly the batches the uninterrupted run would have.
    Adam moments are not checkpointed and restart from zero, so a resumed run
    is close to but not bitwise equal to an uninterrupted one.
    """
    arch = params.arch
    if config.iterations == 0:
        return TrainResult(params=params, ema={r: params.copy() for r in config.ema_sigma_rels},
                           losses=np.zeros(0), steps=0,
                           rng_state=derive_rng(config.seed, 13).bit_generator.state)
    exps = {r: exponent_for_sigma_rel(r, config.iterations) for r in config.ema_sigma_rels}
    if resume is not None:
        if resume.params.arch != arch:
            raise ValueError("checkpoint architecture does not match")
        if resume.rng_state is None:
            raise ValueError("checkpoint has no RNG state and cannot resume the noise stream")
        params = resume.params
        start = resume.step
        rng = restore_rng(resume.rng_state)
        trackers = [EmaTracker(r, exps[r], resume.ema[r]) for r in config.ema_sigma_rels]
    else:
        start = 0
        rng = derive_rng(config.seed, 13)
        trackers = [EmaTracker(r, exps[r], params.copy()) for r in config.ema_sigma_rels]
    adam = AdamState(params, config)

    B = config.batch_size
    if arch.conditional:
        labels = np.arange(B) % arch.class_count  # balanced, fixed layout
    else:
        labels = None
    losses = []
    for t in range(start + 1, config.iterations + 1):
        x, sigmas, targets = draw_training_batch(spec, config, labels, rng)
        try:
            grads, loss = nm.grad_params(params, x, sigmas, labels, targets)
        except nm.NonFiniteLossError:
            if checkpoint_path is not None:
                # leave a resumable snapshot of the last healthy state
                nm.save_checkpoint(checkpoint_path, params, step=t - 1,
                                   rng_state=rng.bit_generator.state,
                                   ema={tr.sigma_rel: tr.averaged for tr in trackers})
            raise
        adam.step(params, grads, t, learning_rate(config, t))
        for tr in trackers:
            tr.update(params, t)
        losses.append(loss)
        if checkpoint_path is not None and checkpoint_every > 0 and t % checkpoint_every == 0:
            nm.save_checkpoint(checkpoint_path, params, step=t,
                               rng_state=rng.bit_generator.state,
                               ema={tr.sigma_rel: tr.averaged for tr in trackers})
        if progress and (t % max(1, config.iterations // 10) == 0 or t == config.iterations):
            print(f"  step {t}/{config.iterations} loss {loss:.5f}", file=sys.stderr)
    return TrainResult(params=params, ema={tr.sigma_rel: tr.averaged for tr in trackers},
                       losses=np.asarray(losses), steps=config.iterations,
                       rng_state=rng.bit_generator.state)


def save_loss_curve(path, losses, config: TrainConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss,lr\n")
        for i, v in enumerate(np.asarray(losses), start=1):
            fh.write(f"{i},{float(v)!r},{float(learning_rate(config, i))!r}\n")


def load_loss_curve(path) -> np.ndarray:
    """Returns (steps, 2) array of (loss, lr)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        if fh.readline().strip() != "step,loss,lr":
            raise ValueError("not a loss curve file")
        for line in fh:
            parts = line.split(",")
            rows.append((float(parts[1]), float(parts[2])))
    return np.asarray(rows).reshape(-1, 2)
