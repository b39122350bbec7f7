"""Forward/backward pairs for the layers of the omni-scale network.

Tensors are float64 numpy arrays: batches of sequences are (B, C, T), pooled
features are (B, C). Convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

_swv = np.lib.stride_tricks.sliding_window_view


class ShapeError(ValueError):
    pass


def same_padding(k: int) -> Tuple[int, int]:
    """Zero padding (left, right) keeping length T for kernel size k; extra zero goes left."""
    total = k - 1
    return (total + 1) // 2, total // 2


@dataclass
class ConvParams:
    w: np.ndarray  # (C_out, C_in, K)
    b: np.ndarray  # (C_out,)

    @property
    def kernel_size(self) -> int:
        return self.w.shape[2]


def _check_conv(x, w):
    if x.ndim != 3:
        raise ShapeError(f"conv input must be (B, C, T); got {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv expects {w.shape[1]} input channels, got {x.shape[1]}")


def conv1d_same(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """y[b,o,t] = bias[o] + sum_{c,k} w[o,c,k] * xpad[b,c,t+k]."""
    _check_conv(x, p.w)
    k = p.kernel_size
    left, right = same_padding(k)
    xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
    cols = _swv(xp, k, axis=2)  # (B, C, T, K)
    y = np.tensordot(cols, p.w, axes=([1, 3], [1, 2]))  # (B, T, O)
    return y.transpose(0, 2, 1) + p.b[None, :, None]


def conv1d_same_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Returns (grad_x, ConvParams of gradients)."""
    _check_conv(x, p.w)
    b, _, t = x.shape
    if grad_out.shape != (b, p.w.shape[0], t):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output")
    k = p.kernel_size
    left, right = same_padding(k)
    xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
    cols = _swv(xp, k, axis=2)
    grad_w = np.tensordot(grad_out, cols, axes=([0, 2], [0, 2]))  # (O, C, K)
    grad_b = grad_out.sum(axis=(0, 2))
    # full correlation of grad_out with the flipped kernel gives grad wrt xpad
    gp = np.pad(grad_out, ((0, 0), (0, 0), (k - 1, k - 1)))
    gcols = _swv(gp, k, axis=2)  # (B, O, T+K-1, K)
    grad_xp = np.tensordot(gcols, p.w[:, :, ::-1], axes=([1, 3], [0, 2]))  # (B, T+K-1, C)
    grad_x = grad_xp.transpose(0, 2, 1)[:, :, left:left + t]
    return np.ascontiguousarray(grad_x), ConvParams(grad_w, grad_b)


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BNParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels),
                   momentum, eps)


def batchnorm_fwd(x: np.ndarray, p: BNParams, training: bool):
    """Per-channel normalisation over (B, T). Training mode updates running stats in place."""
    if training:
        n = x.shape[0] * x.shape[2]
        if n < 2:
            raise ShapeError("batch norm in training mode needs B*T >= 2")
        mu = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        p.running_mean = (1 - p.momentum) * p.running_mean + p.momentum * mu
        p.running_var = (1 - p.momentum) * p.running_var + p.momentum * var * n / (n - 1)
    else:
        mu, var = p.running_mean, p.running_var
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mu[None, :, None]) * inv_std[None, :, None]
    y = p.gamma[None, :, None] * xhat + p.beta[None, :, None]
    return y, (xhat, inv_std, p.gamma.copy(), training)


def batchnorm_bwd(cache, grad_out: np.ndarray):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv_std, gamma, training = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2))
    grad_beta = grad_out.sum(axis=(0, 2))
    g = grad_out * gamma[None, :, None]
    if not training:
        return g * inv_std[None, :, None], grad_gamma, grad_beta
    n = xhat.shape[0] * xhat.shape[2]
    grad_x = (inv_std[None, :, None] / n) * (
        n * g - g.sum(axis=(0, 2))[None, :, None] - xhat * (g * xhat).sum(axis=(0, 2))[None, :, None]
    )
    return grad_x, grad_gamma, grad_beta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_bwd(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return grad_out * (x > 0)


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ShapeError("nothing to concatenate")
    b, _, t = parts[0].shape
    for q in parts:
        if q.shape[0] != b or q.shape[2] != t:
            raise ShapeError(f"cannot concat {q.shape} with batch {b}, length {t}")
    return np.concatenate(parts, axis=1)


def concat_bwd(grad_out: np.ndarray, sizes: Sequence[int]) -> List[np.ndarray]:
    edges = np.cumsum(sizes)[:-1]
    return np.split(grad_out, edges, axis=1)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=2)


def global_avg_pool_bwd(grad_out: np.ndarray, t: int) -> np.ndarray:
    return np.repeat(grad_out[:, :, None] / t, t, axis=2)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x (B, D_in), w (D_out, D_in), b (D_out,)."""
    return x @ w.T + b


def linear_bwd(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    """Returns (grad_x, grad_w, grad_b)."""
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels, class_weights=None):
    """Mean cross-entropy and its gradient wrt logits.

    With ``class_weights`` the mean is weighted: sum(w_y * loss) / sum(w_y).
    """
    labels = np.asarray(labels, dtype=np.int64)
    b, n_cls = logits.shape
    if labels.shape != (b,):
        raise ShapeError("one label per row expected")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_cls:
        raise ValueError(f"labels must lie in [0, {n_cls})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(b), labels] - logsum
    probs = np.exp(z - logsum[:, None])
    onehot = np.zeros_like(probs)
    onehot[np.arange(b), labels] = 1.0
    if class_weights is None:
        wts = np.full(b, 1.0 / b)
    else:
        wy = np.asarray(class_weights, dtype=np.float64)[labels]
        wts = wy / wy.sum()
    loss = float(-(wts * logp).sum())
    return loss, (probs - onehot) * wts[:, None]


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
