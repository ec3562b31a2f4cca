"""Differentiable layer primitives for VGG19 and its multipath variant.

Every primitive takes arrays and returns ``(value, vjp)``; see
:mod:`mpnet.autodiff` for the vjp calling convention. Primitives preserve the
promoted input dtype so that gradient checks can run them in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, col2im, im2col


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32), momentum, epsilon)

    def update(self, x: np.ndarray) -> None:
        """Fold the batch statistics of ``x`` into the running averages."""
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = self.momentum
        self.running_mean[...] = (1 - m) * self.running_mean + m * mean
        self.running_var[...] = (1 - m) * self.running_var + m * var


@dataclass
class DropoutState:
    rate: float = 0.5
    mode: str = "train"
    rng_seed: int = 0


def _dt(*arrays):
    return np.result_type(*arrays)


def add(a, b):
    def vjp(g, needs):
        return g, g
    return a + b, vjp


def mul(a, b):
    def vjp(g, needs):
        return (g * b if needs[0] else None), (g * a if needs[1] else None)
    return a * b, vjp


def sum_all(x):
    out = np.asarray(x.sum(), dtype=x.dtype).reshape(1)

    def vjp(g, needs):
        return (np.full_like(x, g.reshape(())),)
    return out, vjp


def conv2d(x, kernels, bias, padding: str = "same", stride: int = 1):
    """Cross-correlation of ``n x h x w x c_in`` input with ``kh x kw x c_in x c_out`` kernels."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects n x h x w x c input, got {x.shape}")
    kh, kw, cin, cout = kernels.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {cout} output channels")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same padding requires odd kernel extents")
        pad = (kh - 1) // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    n, h, w, _ = x.shape
    cols = im2col(x, (kh, kw), stride, pad)
    wf = kernels.reshape(kh * kw * cin, cout)
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = (cols @ wf + bias).reshape(n, oh, ow, cout)

    def vjp(g, needs):
        gf = g.reshape(-1, cout)
        dx = col2im(gf @ wf.T, x.shape, (kh, kw), stride, pad) if needs[0] else None
        dw = (cols.T @ gf).reshape(kernels.shape) if needs[1] else None
        db = gf.sum(axis=0) if needs[2] else None
        return dx, dw, db
    return out, vjp


def relu(x):
    mask = x > 0
    out = np.where(mask, x, 0).astype(x.dtype, copy=False)

    def vjp(g, needs):
        return (g * mask,)
    return out, vjp


def maxpool2d(x):
    """2x2 window, stride 2; odd trailing rows/columns are dropped."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects n x h x w x c input, got {x.shape}")
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2d input too small: {x.shape}")
    oh, ow = h // 2, w // 2
    win = (x[:, :2 * oh, :2 * ow]
           .reshape(n, oh, 2, ow, 2, c)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(n, oh, ow, c, 4))
    arg = win.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g, needs):
        scatter = np.zeros((n, oh, ow, c, 4), dtype=g.dtype)
        np.put_along_axis(scatter, arg[..., None], g[..., None], axis=-1)
        dx = np.zeros(x.shape, dtype=g.dtype)
        dx[:, :2 * oh, :2 * ow] = (scatter.reshape(n, oh, ow, c, 2, 2)
                                   .transpose(0, 1, 4, 2, 5, 3)
                                   .reshape(n, 2 * oh, 2 * ow, c))
        return (dx,)
    return out, vjp


def batchnorm_train(x, gamma, beta, epsilon: float = 1e-5):
    """Normalize per channel (last axis) with biased batch statistics."""
    axes = tuple(range(x.ndim - 1))
    count = x.size // x.shape[-1]
    if count < 2:
        raise ShapeError(f"batch normalization needs at least 2 values per channel, got shape {x.shape}")
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x - mean) * inv_std
    out = gamma * xhat + beta

    def vjp(g, needs):
        dgamma = (g * xhat).sum(axis=axes) if needs[1] else None
        dbeta = g.sum(axis=axes) if needs[2] else None
        dx = None
        if needs[0]:
            dxhat = g * gamma
            dx = (inv_std / count) * (count * dxhat - dxhat.sum(axis=axes)
                                      - xhat * (dxhat * xhat).sum(axis=axes))
        return dx, dgamma, dbeta
    return out.astype(_dt(x, gamma), copy=False), vjp


def batchnorm_eval(x, gamma, beta, *, running_mean, running_var, epsilon: float = 1e-5):
    inv_std = 1.0 / np.sqrt(running_var + epsilon)
    xhat = (x - running_mean) * inv_std
    out = gamma * xhat + beta

    def vjp(g, needs):
        axes = tuple(range(x.ndim - 1))
        return ((g * gamma * inv_std) if needs[0] else None,
                (g * xhat).sum(axis=axes) if needs[1] else None,
                g.sum(axis=axes) if needs[2] else None)
    return out.astype(_dt(x, gamma), copy=False), vjp


def batchnorm2d(x, gamma, beta, state: BatchNormState):
    """Stateful convenience wrapper: train mode also updates running statistics."""
    if state.mode == "train":
        out, _ = batchnorm_train(x, gamma, beta, state.epsilon)
        state.update(x)
        return out
    return batchnorm_eval(x, gamma, beta, running_mean=state.running_mean,
                          running_var=state.running_var, epsilon=state.epsilon)[0]


def dropout_mask(shape, rate: float, seed: int) -> np.ndarray:
    """Bernoulli keep-mask (keep probability ``1 - rate``) from a seeded generator."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    return np.random.default_rng(seed).random(shape) >= rate


def dropout(x, *, mask, rate: float):
    """Inverted dropout with a precomputed keep-mask."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    keep = mask.astype(x.dtype)
    out = x * keep * scale

    def vjp(g, needs):
        return (g * keep * scale,)
    return out, vjp


def apply_dropout(x, state: DropoutState):
    if not 0 <= state.rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {state.rate}")
    if state.mode == "eval" or state.rate == 0:
        return x.copy()
    return dropout(x, mask=dropout_mask(x.shape, state.rate, state.rng_seed), rate=state.rate)[0]


def global_avg_pool(x):
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects n x h x w x c input, got {x.shape}")
    n, h, w, c = x.shape
    out = x.mean(axis=(1, 2))

    def vjp(g, needs):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).astype(g.dtype),)
    return out, vjp


def dense(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    out = x @ w + b

    def vjp(g, needs):
        return (g @ w.T if needs[0] else None,
                x.T @ g if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)
    return out, vjp


def concat(*parts):
    """Feature-axis concatenation of ``n x d_i`` parts, order preserved."""
    if not parts:
        raise ShapeError("concat needs at least one part")
    n = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != n:
            raise ShapeError(f"concat batch mismatch: {[q.shape for q in parts]}")
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate(parts, axis=1)

    def vjp(g, needs):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))
    return out, vjp


def split(x, widths):
    offsets = np.cumsum([0] + list(widths))
    return [x[:, offsets[i]:offsets[i + 1]] for i in range(len(widths))]


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, *, labels):
    """Mean cross-entropy over the batch; the vjp is the fused (probs - onehot)/n."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"logits must be n x C with C >= 2, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), labels] - logsum
    loss = np.asarray(-logp.mean(), dtype=logits.dtype).reshape(1)

    def vjp(g, needs):
        p = softmax(logits)
        p[np.arange(n), labels] -= 1
        return (p * (g.reshape(()) / n),)
    return loss, vjp
