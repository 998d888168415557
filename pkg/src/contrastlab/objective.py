"""Symmetric InfoNCE with analytic gradients, AdamW, warmup+cosine schedule, clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from contrastlab.model import EmbeddingBatch


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SimilarityMatrix:
    s: np.ndarray
    tau: float

    @property
    def n(self) -> int:
        return self.s.shape[0]


@dataclass(frozen=True)
class LossReport:
    total: float
    i2t: float
    t2i: float
    batch_size: int


def similarity_matrix(batch: EmbeddingBatch, tau: float) -> SimilarityMatrix:
    """Raw cosine similarities ``image_emb @ text_emb.T``; ``tau`` is applied in the loss."""
    if batch.image_emb.shape[0] == 0:
        raise ValueError("cannot build a similarity matrix for an empty batch")
    if batch.image_emb.shape != batch.text_emb.shape:
        raise ValueError(f"embedding shapes differ: {batch.image_emb.shape} vs {batch.text_emb.shape}")
    return SimilarityMatrix(batch.image_emb @ batch.text_emb.T, float(tau))


def _log_softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    m = logits.max(axis=axis, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def infonce_loss(sim: SimilarityMatrix) -> LossReport:
    s = sim.s
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {s.shape}")
    if not sim.tau > 0:
        raise ValueError(f"temperature must be positive, got {sim.tau}")
    if not np.all(np.isfinite(s)):
        raise NonFiniteError("similarity matrix has non-finite entries")
    logits = s / sim.tau
    i2t = -float(np.mean(np.diag(_log_softmax(logits, axis=1))))
    t2i = -float(np.mean(np.diag(_log_softmax(logits, axis=0))))
    return LossReport((i2t + t2i) / 2, i2t, t2i, s.shape[0])


def infonce_grad_s(sim: SimilarityMatrix) -> np.ndarray:
    """dL/ds = ((P_row - I) + (P_col - I)) / (2 N tau)."""
    n = sim.n
    logits = sim.s / sim.tau
    p_row = np.exp(_log_softmax(logits, axis=1))
    p_col = np.exp(_log_softmax(logits, axis=0))
    eye = np.eye(n)
    return ((p_row - eye) + (p_col - eye)) / (2 * n * sim.tau)


def infonce_backward(sim: SimilarityMatrix, batch: EmbeddingBatch) -> tuple[np.ndarray, np.ndarray, float]:
    """Gradients of the total loss w.r.t. image_emb, text_emb and log(tau)."""
    if sim.s.shape != (batch.image_emb.shape[0], batch.text_emb.shape[0]):
        raise ValueError(f"similarity shape {sim.s.shape} does not match batch of {batch.image_emb.shape[0]}")
    g = infonce_grad_s(sim)
    d_image = g @ batch.text_emb
    d_text = g.T @ batch.image_emb
    # logits = s * exp(-log_tau), so d logits / d log_tau = -logits
    d_log_tau = -float(np.sum(g * sim.s))
    return d_image, d_text, d_log_tau


# ------------------------------------------------------------- schedule


@dataclass(frozen=True)
class ScheduleSpec:
    peak_lr: float
    total_steps: int
    warmup_fraction: float = 0.10
    warmup_start_divisor: float = 25.0

    def __post_init__(self):
        if not self.peak_lr > 0:
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError(f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}")
        if self.total_steps < 2:
            raise ValueError(f"total_steps must be >= 2, got {self.total_steps}")
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup must end before total_steps")
        if not self.warmup_start_divisor >= 1:
            raise ValueError("warmup_start_divisor must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return max(1, math.ceil(self.warmup_fraction * self.total_steps - 1e-9))


def lr_at_step(spec: ScheduleSpec, step: float) -> float:
    """Linear warmup from peak/divisor to peak, then half-cosine decay to zero.

    ``step`` may be fractional; the curve is continuous at the warmup end.
    """
    if not 0 <= step <= spec.total_steps:
        raise ValueError(f"step {step} outside [0, {spec.total_steps}]")
    peak = spec.peak_lr
    w = spec.warmup_steps
    if step < w:
        start = peak / spec.warmup_start_divisor
        return start + (peak - start) * step / w
    progress = (step - w) / (spec.total_steps - w)
    return 0.5 * peak * (1.0 + math.cos(math.pi * progress))


# ------------------------------------------------------------ optimizer


@dataclass
class OptimizerState:
    exp_avg: dict[str, np.ndarray]
    exp_avg_sq: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    no_decay: frozenset[str] = field(default_factory=lambda: frozenset({"log_temperature"}))

    @classmethod
    def zeros_like(cls, arrays: Mapping[str, np.ndarray], **kwargs) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(v, dtype=np.float64) for k, v in arrays.items()},
            {k: np.zeros_like(v, dtype=np.float64) for k, v in arrays.items()},
            **kwargs,
        )


def adamw_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState,
               lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params`` and ``state``.

    The whole step is rejected, leaving everything untouched, if any gradient
    is non-finite.
    """
    if set(grads) != set(params):
        raise ValueError(f"gradient keys {sorted(grads)} do not match parameters {sorted(params)}")
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, expected {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}; step rejected")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay and name not in state.no_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float = 1.0
                   ) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``.

    Returns the (possibly scaled) gradients and the pre-clip norm.
    """
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return {k: np.array(g, copy=True) for k, g in grads.items()}, norm
