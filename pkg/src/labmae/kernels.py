"""Dense numeric kernels with explicit forward/backward passes.

All arrays are 64-bit floats.  Every kernel is a pure function: it never
mutates its inputs and keeps no internal state, so concurrent calls are safe.
Forward functions return ``(output, cache)`` pairs; the matching backward
function consumes the cache and returns gradients shaped like its inputs.

Kernels accept arbitrary leading batch dimensions and operate on the trailing
axes (last axis for pointwise/normalization ops, last two for matrix ops).
The additive mask used inside attention is the only place -inf may appear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "FullyMaskedRowError",
    "DivergenceError",
    "matmul",
    "softmax_rows",
    "attention_forward",
    "attention_backward",
    "linear_forward",
    "linear_backward",
    "layer_norm_forward",
    "layer_norm_backward",
    "gelu_forward",
    "gelu_backward",
    "OptimState",
    "init_optim_state",
    "adamw_step",
    "LrSchedule",
    "lr_at",
    "splitmix64",
    "derive_seed",
    "make_rng",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class FullyMaskedRowError(ValueError):
    """A softmax row contained no admissible (finite) entry."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


# ---------------------------------------------------------------------------
# basic matrix ops
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check.

    Accumulation order is fixed by the underlying BLAS call, so repeated
    invocations on identical inputs are bit-identical.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, stabilized by row-max subtraction.

    Entries equal to -inf are treated as masked-out and map to exactly 0.
    A row that is entirely -inf has no admissible entry and raises
    :class:`FullyMaskedRowError`.
    """
    scores = np.asarray(scores, dtype=np.float64)
    rowmax = np.max(scores, axis=-1, keepdims=True)
    if np.isneginf(rowmax).any():
        raise FullyMaskedRowError("softmax row with every entry masked to -inf")
    shifted = scores - rowmax
    # exp(-inf) == 0.0, so masked entries drop out exactly
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# scaled dot-product attention with key-visibility mask
# ---------------------------------------------------------------------------

def attention_forward(q, k, v, mask=None):
    """Scaled dot-product attention: softmax(q k^T / sqrt(d_k)) v.

    ``mask`` is a boolean array broadcastable to the score shape
    ``(..., Lq, Lk)``; positions where it is False receive a score of -inf
    before the softmax and therefore contribute exactly zero weight.  With
    ``mask=None`` (or an all-True mask, which leaves every score bit
    untouched) this reduces to plain unmasked attention.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"q/k feature dims disagree: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"k/v row counts disagree: {k.shape} vs {v.shape}")
    d_k = q.shape[-1]
    scale = 1.0 / math.sqrt(d_k)
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
        scores = np.where(mask, scores, -np.inf)
    probs = softmax_rows(scores)
    out = probs @ v
    cache = (q, k, v, probs, scale)
    return out, cache


def attention_backward(d_out, cache):
    """Gradients of attention w.r.t. q, k, v.

    Masked positions have probability exactly 0, so no gradient flows
    through them (the -inf branch is constant).
    """
    q, k, v, probs, scale = cache
    d_v = np.swapaxes(probs, -1, -2) @ d_out
    d_probs = d_out @ np.swapaxes(v, -1, -2)
    # softmax backward: dS = P * (dP - sum(dP * P))
    inner = np.sum(d_probs * probs, axis=-1, keepdims=True)
    d_scores = probs * (d_probs - inner) * scale
    d_q = d_scores @ k
    d_k = np.swapaxes(d_scores, -1, -2) @ q
    return d_q, d_k, d_v


# ---------------------------------------------------------------------------
# linear / layer norm / gelu
# ---------------------------------------------------------------------------

def linear_forward(x, w, b):
    """Affine map over the last axis: y = x w + b."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    y = x @ w + b
    return y, (x, w)


def linear_backward(d_y, cache):
    """Returns (d_x, d_w, d_b); parameter grads sum over all leading dims."""
    x, w = cache
    d_x = d_y @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = d_y.reshape(-1, d_y.shape[-1])
    d_w = x2.T @ dy2
    d_b = dy2.sum(axis=0)
    return d_x, d_w, d_b


def layer_norm_forward(x, gamma, beta, eps=1e-5):
    """Layer normalization over the last axis with affine output.

    A constant row normalizes to zeros (variance 0 is regularized by eps),
    so the output there is just ``beta``.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    y = x_hat * gamma + beta
    return y, (x_hat, inv_std, gamma)


def layer_norm_backward(d_y, cache):
    """Returns (d_x, d_gamma, d_beta)."""
    x_hat, inv_std, gamma = cache
    d_gamma = np.sum(d_y * x_hat, axis=tuple(range(d_y.ndim - 1)))
    d_beta = np.sum(d_y, axis=tuple(range(d_y.ndim - 1)))
    d_xhat = d_y * gamma
    d_x = inv_std * (
        d_xhat
        - np.mean(d_xhat, axis=-1, keepdims=True)
        - x_hat * np.mean(d_xhat * x_hat, axis=-1, keepdims=True)
    )
    return d_x, d_gamma, d_beta


_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu_forward(x):
    """Exact (erf-based) GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    x = np.asarray(x, dtype=np.float64)
    y = 0.5 * x * (1.0 + erf(x / _SQRT_2))
    return y, x


def gelu_backward(d_y, cache):
    x = cache
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return d_y * (cdf + x * pdf)


# ---------------------------------------------------------------------------
# AdamW with decoupled weight decay
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    """Moment estimates and hyperparameters for AdamW.

    ``step`` counts completed updates; moment arrays are keyed and shaped
    like the parameter dict they track.
    """

    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_optim_state(params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    state = OptimState(step=0, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adamw_step(params, grads, state, lr):
    """One AdamW update; returns (new_params, new_state) without mutating inputs.

    Weight decay is decoupled: p <- p - lr*wd*p - lr*m_hat/(sqrt(v_hat)+eps).
    """
    if lr < 0:
        raise ValueError(f"negative learning rate {lr}")
    if set(params) != set(grads):
        raise ShapeError("parameter/gradient key sets differ")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = p - lr * state.weight_decay * p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = m
        new_v[name] = v
    new_state = OptimState(
        step=t,
        beta1=b1,
        beta2=b2,
        eps=state.eps,
        weight_decay=state.weight_decay,
        m=new_m,
        v=new_v,
    )
    return new_params, new_state


# ---------------------------------------------------------------------------
# learning-rate schedule: linear warmup then half-cycle cosine decay
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    min_lr: float
    warmup_epochs: int
    total_epochs: int

    def __post_init__(self):
        if not (0.0 <= self.min_lr <= self.base_lr):
            raise ValueError(f"need 0 <= min_lr <= base_lr, got {self.min_lr}, {self.base_lr}")
        if not (0 <= self.warmup_epochs < self.total_epochs):
            raise ValueError(
                f"need warmup_epochs < total_epochs, got {self.warmup_epochs}, {self.total_epochs}"
            )


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate for a 0-based epoch index.

    Ramps linearly to base_lr over the warmup epochs, then follows a
    half-cycle cosine from base_lr down to min_lr across the remainder.
    """
    if epoch >= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside schedule of {schedule.total_epochs}")
    if epoch < schedule.warmup_epochs:
        return schedule.base_lr * (epoch + 1) / schedule.warmup_epochs
    t = (epoch - schedule.warmup_epochs) / (schedule.total_epochs - schedule.warmup_epochs)
    return schedule.min_lr + (schedule.base_lr - schedule.min_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# seed derivation (splitmix-style mixing) and generator construction
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 scrambling step; full-period 64-bit mixer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *streams) -> int:
    """Deterministically derive a child seed from a master seed and labels.

    Labels may be ints or strings; distinct label tuples give independent
    streams. Kernels never draw randomness themselves; callers own RNGs
    seeded through here.
    """
    state = splitmix64(seed & _MASK64)
    for s in streams:
        if isinstance(s, str):
            for ch in s.encode("utf-8"):
                state = splitmix64(state ^ ch)
        else:
            state = splitmix64(state ^ (int(s) & _MASK64))
    return state


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed & _MASK64))
