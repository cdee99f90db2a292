"""Similarity metrics, the smoothness regularizer, and the assembled
registration loss (data term + lambda-weighted regularizer).

Every similarity s is converted to a dissimilarity 1 - s inside the loss so
all data terms are non-negative and comparable. Gradients are analytic and
flow only through the displacement field; feature extractors stay frozen
(their input-gradients participate, their parameters never do).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import DisplacementField, Image, LabelMap
from .models import FeaturePyramid, UNet, extract_features_with_cache, load_checkpoint
from .warp import warp_image, warp_image_grad, warp_onehot

EPS_NCC = 1e-8
EPS_COS = 1e-8
EPS_DICE = 1e-6

METRIC_KINDS = ("mse", "ncc", "nccsup", "deepsim", "randsim")


@dataclass
class MetricKind:
    """Metric selection: mse | ncc | nccsup | deepsim | randsim."""

    kind: str
    window: int = 9
    dice_weight: float = 1.0
    extractor: UNet | None = None

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.dice_weight < 0:
            raise ValueError("dice_weight must be >= 0")
        if self.kind in ("deepsim", "randsim") and self.extractor is None:
            raise ValueError(f"{self.kind} requires a feature extractor")

    @property
    def needs_labels(self) -> bool:
        return self.kind == "nccsup"

    @property
    def needs_features(self) -> bool:
        return self.kind in ("deepsim", "randsim")


def parse_metric(spec: str) -> MetricKind:
    """Parse the CLI grammar: mse | ncc:<win> | nccsup:<win>:<w> |
    deepsim:<ckpt> | randsim:<seed>."""
    parts = spec.split(":")
    kind = parts[0]
    if kind == "mse":
        return MetricKind("mse")
    if kind == "ncc":
        win = int(parts[1]) if len(parts) > 1 else 9
        return MetricKind("ncc", window=win)
    if kind == "nccsup":
        win = int(parts[1]) if len(parts) > 1 else 9
        weight = float(parts[2]) if len(parts) > 2 else 1.0
        return MetricKind("nccsup", window=win, dice_weight=weight)
    if kind == "deepsim":
        if len(parts) < 2:
            raise ValueError("deepsim requires a checkpoint path: deepsim:<ckpt>")
        net, _ = load_checkpoint(parts[1])
        net.frozen = True
        return MetricKind("deepsim", extractor=net)
    if kind == "randsim":
        from .core import Rng

        seed = int(parts[1]) if len(parts) > 1 else 0
        net = UNet(1, 2, Rng(seed))
        net.frozen = True
        return MetricKind("randsim", extractor=net)
    raise ValueError(f"unknown metric {spec!r}")


@dataclass(frozen=True)
class LossTerms:
    data: float
    reg: float
    lam: float

    @property
    def total(self) -> float:
        return self.data + self.lam * self.reg


# ---------------------------------------------------------------------------
# Pixel metrics
# ---------------------------------------------------------------------------


def _check_same_grid(a: Image, b: Image) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"grid mismatch: {a.data.shape} vs {b.data.shape}")


def mse(a: Image, b: Image) -> float:
    _check_same_grid(a, b)
    return float(np.mean((a.data - b.data) ** 2))


def _mse_grad(a: Image, b: Image) -> np.ndarray:
    return 2.0 * (a.data - b.data) / a.data.size


def _ncc_plane(a: np.ndarray, b: np.ndarray, window: int, want_grad: bool):
    """Mean squared local correlation over edge-clamped windows on one
    channel; optionally the gradient w.r.t. a."""
    h, w = a.shape
    r = window // 2
    pa = np.pad(a, r, mode="edge")
    pb = np.pad(b, r, mode="edge")
    wa = sliding_window_view(pa, (window, window))  # (H, W, k, k)
    wb = sliding_window_view(pb, (window, window))
    ca = wa - wa.mean(axis=(2, 3), keepdims=True)
    cb = wb - wb.mean(axis=(2, 3), keepdims=True)
    num = np.sum(ca * cb, axis=(2, 3))
    da = np.sum(ca * ca, axis=(2, 3))
    db = np.sum(cb * cb, axis=(2, 3))
    den = da * db + EPS_NCC
    s = num * num / den
    value = float(s.mean())
    if not want_grad:
        return value, None
    # ds/da_j = 2*num*cb_j/den - num^2*db*2*ca_j/den^2, then scatter back
    c1 = (2.0 * num / den)[:, :, None, None]
    c2 = (2.0 * num * num * db / (den * den))[:, :, None, None]
    g_win = c1 * cb - c2 * ca  # (H, W, k, k)
    g_pad = np.zeros_like(pa)
    for dy in range(window):
        for dx in range(window):
            g_pad[dy:dy + h, dx:dx + w] += g_win[:, :, dy, dx]
    # adjoint of edge-replicate padding: fold the borders back in
    if r:
        g_pad[r, :] += g_pad[:r, :].sum(axis=0)
        g_pad[h + r - 1, :] += g_pad[h + r:, :].sum(axis=0)
        mid = g_pad[r:h + r, :]
        mid[:, r] += mid[:, :r].sum(axis=1)
        mid[:, w + r - 1] += mid[:, w + r:].sum(axis=1)
        grad = mid[:, r:w + r].copy()
    else:
        grad = g_pad
    return value, grad / (h * w)


def patch_ncc(a: Image, b: Image, window: int = 9) -> float:
    """Mean squared local normalized cross-correlation; range [0, 1]."""
    _check_same_grid(a, b)
    vals = [_ncc_plane(a.plane(c), b.plane(c), window, False)[0]
            for c in range(a.channels)]
    return float(np.mean(vals))


def _patch_ncc_with_grad(a: Image, b: Image, window: int):
    _check_same_grid(a, b)
    vals = []
    grads = np.empty_like(a.data)
    for c in range(a.channels):
        v, g = _ncc_plane(a.plane(c), b.plane(c), window, True)
        vals.append(v)
        grads[:, :, c] = g
    return float(np.mean(vals)), grads / a.channels


# ---------------------------------------------------------------------------
# Feature-space similarity
# ---------------------------------------------------------------------------


def deepsim(pyr_a: FeaturePyramid, pyr_b: FeaturePyramid) -> float:
    """Mean per-location cosine of feature vectors, averaged over levels."""
    value, _ = _deepsim_impl(pyr_a, pyr_b, want_grad=False)
    return value


def _deepsim_impl(pyr_a: FeaturePyramid, pyr_b: FeaturePyramid, want_grad: bool):
    total = 0.0
    grads = []
    n_levels = len(pyr_a.levels)
    for fa, fb in zip(pyr_a.levels, pyr_b.levels):
        if fa.shape != fb.shape:
            raise ValueError(f"pyramid shape mismatch: {fa.shape} vs {fb.shape}")
        dot = np.sum(fa * fb, axis=0)
        na = np.sqrt(np.sum(fa * fa, axis=0))
        nb = np.sqrt(np.sum(fb * fb, axis=0))
        den = na * nb + EPS_COS
        cos = dot / den
        n_loc = cos.size
        total += cos.mean() / n_levels
        if want_grad:
            # d cos / d fa = fb/den - dot*nb*fa/(na*den^2); zero where na = 0
            safe_na = np.where(na > 0, na, 1.0)
            g = fb / den - (dot * nb / (safe_na * den * den)) * fa
            g = np.where(na[None, :, :] > 0, g, 0.0)
            grads.append(g / (n_levels * n_loc))
    return float(total), grads if want_grad else None


def _deepsim_field_grad(extractor: UNet, warped: Image, pyr_fixed: FeaturePyramid):
    """deepsim(extract(warped), pyr_fixed) and its gradient w.r.t. warped."""
    pyr_w, cache = extract_features_with_cache(extractor, warped)
    value, level_grads = _deepsim_impl(pyr_w, pyr_fixed, want_grad=True)
    d_input = extractor.encoder_backward(cache, *level_grads)
    return value, d_input.transpose(1, 2, 0)


# ---------------------------------------------------------------------------
# Regularizer and soft Dice
# ---------------------------------------------------------------------------


def diffusion_regularizer(field: DisplacementField) -> float:
    """Mean over pixels of the squared forward-difference gradient of u."""
    u = field.u
    dy = u[1:, :, :] - u[:-1, :, :]
    dx = u[:, 1:, :] - u[:, :-1, :]
    n = u.shape[0] * u.shape[1]
    return float((np.sum(dy * dy) + np.sum(dx * dx)) / n)


def diffusion_regularizer_grad(field: DisplacementField) -> np.ndarray:
    u = field.u
    g = np.zeros_like(u)
    dy = u[1:, :, :] - u[:-1, :, :]
    dx = u[:, 1:, :] - u[:, :-1, :]
    g[:-1, :, :] -= 2.0 * dy
    g[1:, :, :] += 2.0 * dy
    g[:, :-1, :] -= 2.0 * dx
    g[:, 1:, :] += 2.0 * dx
    return g / (u.shape[0] * u.shape[1])


def dice_soft(warped_onehot: Image, target_onehot: Image) -> float:
    """Mean soft Dice over classes; 1 for identical one-hot encodings."""
    value, _ = _dice_soft_impl(warped_onehot, target_onehot, False)
    return value


def _dice_soft_impl(warped_onehot: Image, target_onehot: Image, want_grad: bool):
    _check_same_grid(warped_onehot, target_onehot)
    p = warped_onehot.data
    q = target_onehot.data
    inter = np.sum(p * q, axis=(0, 1))
    sums = np.sum(p, axis=(0, 1)) + np.sum(q, axis=(0, 1))
    per_class = (2.0 * inter + EPS_DICE) / (sums + EPS_DICE)
    value = float(per_class.mean())
    if not want_grad:
        return value, None
    k = p.shape[2]
    grad = (2.0 * q * (sums + EPS_DICE) - (2.0 * inter + EPS_DICE)) / (sums + EPS_DICE) ** 2
    return value, grad / k


# ---------------------------------------------------------------------------
# Assembled registration loss (data + lambda * regularizer)
# ---------------------------------------------------------------------------


@dataclass
class LossContext:
    """Per-pair precomputation reused across optimizer steps."""

    pyr_fixed: FeaturePyramid | None = None
    onehot_fixed: Image | None = None


def prepare_context(metric: MetricKind, fixed: Image,
                    labels_fixed: LabelMap | None = None) -> LossContext:
    ctx = LossContext()
    if metric.needs_features:
        from .models import extract_features

        ctx.pyr_fixed = extract_features(metric.extractor, fixed)
    if metric.needs_labels and labels_fixed is not None:
        ctx.onehot_fixed = labels_fixed.onehot()
    return ctx


def registration_loss(metric: MetricKind, moving: Image, fixed: Image,
                      field: DisplacementField, lam: float,
                      labels_moving: LabelMap | None = None,
                      labels_fixed: LabelMap | None = None,
                      want_grad: bool = False,
                      context: LossContext | None = None):
    """Eq.-style loss: dissimilarity of (moving warped, fixed) + lam * reg.

    Returns LossTerms, or (LossTerms, d_total/d_field) when want_grad.
    """
    _check_same_grid(moving, fixed)
    if metric.needs_labels and (labels_moving is None or labels_fixed is None):
        raise ValueError("nccsup requires moving and fixed labels")
    if context is None:
        context = prepare_context(metric, fixed, labels_fixed)

    warped = warp_image(moving, field)
    grad = np.zeros_like(field.u) if want_grad else None

    if metric.kind == "mse":
        data = mse(warped, fixed)
        if want_grad:
            grad += warp_image_grad(moving, field, _mse_grad(warped, fixed))
    elif metric.kind in ("ncc", "nccsup"):
        if want_grad:
            value, d_warped = _patch_ncc_with_grad(warped, fixed, metric.window)
            grad += warp_image_grad(moving, field, -d_warped)
        else:
            value = patch_ncc(warped, fixed, metric.window)
        data = 1.0 - value
        if metric.kind == "nccsup":
            onehot_fixed = context.onehot_fixed
            if onehot_fixed is None:
                onehot_fixed = labels_fixed.onehot()
            onehot_moving = labels_moving.onehot()
            warped_oh = warp_image(onehot_moving, field)
            dval, d_oh = _dice_soft_impl(warped_oh, onehot_fixed, want_grad)
            data += metric.dice_weight * (1.0 - dval)
            if want_grad:
                grad += metric.dice_weight * warp_image_grad(onehot_moving, field, -d_oh)
    else:  # deepsim / randsim
        if warped.channels != 1:
            raise ValueError("feature metrics require single-channel images")
        pyr_fixed = context.pyr_fixed
        if want_grad:
            value, d_warped = _deepsim_field_grad(metric.extractor, warped, pyr_fixed)
            grad += warp_image_grad(moving, field, -d_warped)
        else:
            from .models import extract_features

            value = deepsim(extract_features(metric.extractor, warped), pyr_fixed)
        data = 1.0 - value

    reg = diffusion_regularizer(field)
    terms = LossTerms(data=float(data), reg=float(reg), lam=float(lam))
    if not want_grad:
        return terms
    grad += lam * diffusion_regularizer_grad(field)
    return terms, grad
