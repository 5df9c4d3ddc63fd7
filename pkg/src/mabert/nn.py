"""Numeric building blocks with hand-written backward passes.

Arrays are plain float64 numpy arrays. Every forward function returns its
output together with whatever the matching ``*_backward`` needs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MASK_VALUE = -1e9
LN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where}")
    return x


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None):
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input dim {x.shape[-1]} does not match weight {w.shape}")
    y = x @ w
    if b is not None:
        y = y + b
    return y, x


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns (dx, dw, db)."""
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


def layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray, eps: float = LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + shift, (xhat, inv, gain)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv, gain = cache
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=axes)
    dshift = dy.sum(axis=axes)
    g = dy * gain
    dx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dshift


def relu(x: np.ndarray):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy: np.ndarray, positive: np.ndarray) -> np.ndarray:
    return dy * positive


def softmax_rows(x: np.ndarray, additive_mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis.

    ``additive_mask`` holds 0 for open slots and ``MASK_VALUE`` (or any value
    at or below half of it) for blocked ones. Blocked slots get exactly zero
    weight; a row with every slot blocked comes out all zero.
    """
    if additive_mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(additive_mask) > MASK_VALUE / 2, x.shape)
    return masked_softmax(x, keep)


def masked_softmax(x: np.ndarray, keep: np.ndarray) -> np.ndarray:
    z = np.where(keep, x, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(keep, np.exp(np.where(keep, x, 0.0) - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def softmax_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def dropout(x: np.ndarray, p: float, train: bool, rng: np.random.Generator | None):
    """Inverted dropout. Returns (y, scale) where scale is None when inactive."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    if not train or p == 0.0:
        return x, None
    scale = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * scale, scale


def dropout_backward(dy: np.ndarray, scale: np.ndarray | None) -> np.ndarray:
    return dy if scale is None else dy * scale


def _weights(shape, mask):
    if mask is None:
        return np.ones(shape)
    w = np.broadcast_to(np.asarray(mask, dtype=float), shape)
    return w


def mse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None):
    """Mean squared error over the selected elements; returns (loss, dloss/dpred).

    ``mask`` broadcasts against ``pred`` and selects elements to average over.
    """
    if pred.shape != target.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    w = _weights(pred.shape, mask)
    count = w.sum()
    if count == 0:
        raise ValueError("mse: no valid elements")
    diff = np.where(w > 0, pred - target, 0.0)
    return float((diff * diff).sum() / count), 2.0 * diff / count


def bce(logits: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None):
    """Binary cross-entropy on logits."""
    if logits.shape != target.shape:
        raise ValueError(f"bce: shape mismatch {logits.shape} vs {target.shape}")
    w = _weights(logits.shape, mask)
    count = w.sum()
    if count == 0:
        raise ValueError("bce: no valid elements")
    # log(1 + exp(z)) - y z, computed stably
    per = np.logaddexp(0.0, logits) - target * logits
    prob = 0.5 * (1.0 + np.tanh(0.5 * logits))
    sel = w > 0
    return float(np.where(sel, per, 0.0).sum() / count), np.where(sel, prob - target, 0.0) / count


def cce(logits: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None):
    """Categorical cross-entropy on logits (last axis = classes, one-hot target)."""
    if logits.shape != target.shape:
        raise ValueError(f"cce: shape mismatch {logits.shape} vs {target.shape}")
    rows = logits.shape[:-1]
    w = np.ones(rows) if mask is None else np.broadcast_to(np.asarray(mask, dtype=float), rows)
    count = w.sum()
    if count == 0:
        raise ValueError("cce: no valid elements")
    m = logits.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    logp = logits - lse
    sel = (w > 0)[..., None]
    loss = -np.where(sel, target * logp, 0.0).sum() / count
    grad = np.where(sel, np.exp(logp) * target.sum(axis=-1, keepdims=True) - target, 0.0) / count
    return float(loss), grad


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place bias-corrected update of every parameter that has a gradient."""
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"adam: gradient shape {g.shape} != parameter {name} {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
