"""Minimal differentiable operator set for the convolutional models.

Tensors are plain float64 numpy arrays shaped (channels, height, width).
There is no autodiff tape: each composite model chains the per-op gradient
functions in reverse by hand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass
class ConvLayer:
    """3x3 (or 1x1) convolution parameters; stride 1, zero padding (k-1)/2.

    "Convolution" here is cross-correlation: no kernel flip.
    """

    kernel: np.ndarray  # (out_ch, in_ch, k, k)
    bias: np.ndarray  # (out_ch,)

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise ValueError(f"bad kernel shape {self.kernel.shape}")
        if self.kernel.shape[2] % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ValueError("bias shape must match out_ch")

    @property
    def out_ch(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_ch(self) -> int:
        return self.kernel.shape[1]

    @property
    def ksize(self) -> int:
        return self.kernel.shape[2]


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C, H, W) -> (H*W, C*k*k) patches with zero padding."""
    r = (k - 1) // 2
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (r, r), (r, r)))
    win = sliding_window_view(padded, (k, k), axis=(1, 2))  # (C, H, W, k, k)
    return win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * k * k)


def conv2d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Same-size cross-correlation with zero padding, stride 1."""
    if x.shape[0] != layer.in_ch:
        raise ValueError(f"input has {x.shape[0]} channels, layer expects {layer.in_ch}")
    _, h, w = x.shape
    cols = _im2col(x, layer.ksize)
    out = cols @ layer.kernel.reshape(layer.out_ch, -1).T + layer.bias
    return out.T.reshape(layer.out_ch, h, w)


def conv2d_grad(x: np.ndarray, layer: ConvLayer, upstream: np.ndarray,
                need_input_grad: bool = True, need_param_grad: bool = True):
    """Gradients of sum(upstream * conv2d(x, layer)).

    Returns (d_kernel, d_bias, d_input); entries not requested are None.
    """
    if upstream.shape != (layer.out_ch,) + x.shape[1:]:
        raise ValueError(f"upstream shape {upstream.shape} mismatch")
    k = layer.ksize
    r = (k - 1) // 2
    c, h, w = x.shape
    up_flat = upstream.reshape(layer.out_ch, h * w)

    d_kernel = d_bias = d_input = None
    if need_param_grad:
        cols = _im2col(x, k)
        d_kernel = (up_flat @ cols).reshape(layer.kernel.shape)
        d_bias = upstream.sum(axis=(1, 2))
    if need_input_grad:
        # scatter columns back: d_x = sum over taps of shifted upstream * kernel
        d_cols = up_flat.T @ layer.kernel.reshape(layer.out_ch, -1)  # (H*W, C*k*k)
        d_cols = d_cols.reshape(h, w, c, k, k)
        d_pad = np.zeros((c, h + 2 * r, w + 2 * r))
        for dy in range(k):
            for dx in range(k):
                d_pad[:, dy:dy + h, dx:dx + w] += d_cols[:, :, :, dy, dx].transpose(2, 0, 1)
        d_input = d_pad[:, r:r + h, r:r + w] if r else d_pad
    return d_kernel, d_bias, d_input


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is taken as 0
    return upstream * (x > 0.0)


def avgpool2(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling, stride 2; requires even spatial dims."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2 needs even spatial dims, got {h}x{w}")
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def avgpool2_grad(upstream: np.ndarray) -> np.ndarray:
    c, h, w = upstream.shape
    return np.repeat(np.repeat(upstream, 2, axis=1), 2, axis=2) * 0.25


def upsample2(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor 2x upsampling (each pixel repeated 2x2)."""
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_grad(upstream: np.ndarray) -> np.ndarray:
    c, h, w = upstream.shape
    return upstream.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


def concat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Channel concatenation, a's channels first."""
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"concat spatial mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=0)


def softmax_ce(logits: np.ndarray, labels: np.ndarray):
    """Mean per-pixel softmax cross-entropy and its gradient w.r.t. logits."""
    k, h, w = logits.shape
    if labels.shape != (h, w):
        raise ValueError("label grid mismatch")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label id out of range")
    shifted = logits - logits.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=0, keepdims=True)
    log_probs = shifted - np.log(denom)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    loss = -log_probs[labels, yy, xx].mean()
    grad = exp / denom
    grad[labels, yy, xx] -= 1.0
    grad /= h * w
    return loss, grad


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam update; returns (param, m, v), all new arrays."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam state for a dict of named parameter arrays."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for name, p in params.items():
            if name not in self._m:
                self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
            out[name], self._m[name], self._v[name] = adam_step(
                p, grads[name], self._m[name], self._v[name], self.t,
                self.lr, self.beta1, self.beta2, self.eps)
        return out
