"""Differentiable spatial transformer: bilinear warping and its gradients.

Sampling coordinates are clamped to the image rectangle (border replicate),
so every operation here is total. The gradient of a clamped coordinate is
zero in the clamped direction.
"""

from __future__ import annotations

import numpy as np

from .core import DisplacementField, Image, LabelMap


def _check_grid(a_h, a_w, b_h, b_w, what: str) -> None:
    if (a_h, a_w) != (b_h, b_w):
        raise ValueError(f"grid mismatch in {what}: ({a_h},{a_w}) vs ({b_h},{b_w})")


def _corner_indices(h, w, ys, xs):
    """Clamped coords and the 4-neighbor integer stencil around them."""
    ycl = np.clip(ys, 0.0, h - 1.0)
    xcl = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ycl).astype(np.int64)
    x0 = np.floor(xcl).astype(np.int64)
    np.clip(y0, 0, max(h - 2, 0), out=y0)
    np.clip(x0, 0, max(w - 2, 0), out=x0)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ycl - y0
    wx = xcl - x0
    return y0, x0, y1, x1, wy, wx


def _sample(data: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    """Bilinear sample all channels at (ys, xs); returns (values, dy, dx).

    data is (H, W, C); ys/xs are (H, W). dy/dx are the derivatives of the
    sampled values w.r.t. the y and x coordinates (zero where clamped).
    """
    h, w = data.shape[:2]
    y0, x0, y1, x1, wy, wx = _corner_indices(h, w, ys, xs)
    i00 = data[y0, x0]
    i01 = data[y0, x1]
    i10 = data[y1, x0]
    i11 = data[y1, x1]
    wy_ = wy[..., None]
    wx_ = wx[..., None]
    val = ((1 - wy_) * (1 - wx_) * i00 + (1 - wy_) * wx_ * i01
           + wy_ * (1 - wx_) * i10 + wy_ * wx_ * i11)
    in_y = ((ys >= 0.0) & (ys <= h - 1.0)).astype(np.float64)[..., None]
    in_x = ((xs >= 0.0) & (xs <= w - 1.0)).astype(np.float64)[..., None]
    dy = ((1 - wx_) * (i10 - i00) + wx_ * (i11 - i01)) * in_y
    dx = ((1 - wy_) * (i01 - i00) + wy_ * (i11 - i10)) * in_x
    return val, dy, dx


def bilinear_sample(image: Image, y: float, x: float, channel: int = 0) -> float:
    """Bilinear interpolation at a single (possibly fractional) coordinate."""
    ys = np.asarray([[float(y)]])
    xs = np.asarray([[float(x)]])
    val, _, _ = _sample(image.data, ys, xs)
    return float(val[0, 0, channel])


def _grid_coords(field: DisplacementField):
    h, w = field.height, field.width
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    return yy + field.u[:, :, 0], xx + field.u[:, :, 1]


def warp_image(image: Image, field: DisplacementField) -> Image:
    """Resample the image at p + u(p)."""
    _check_grid(image.height, image.width, field.height, field.width, "warp_image")
    ys, xs = _grid_coords(field)
    val, _, _ = _sample(image.data, ys, xs)
    return Image(val)


def warp_image_grad(image: Image, field: DisplacementField,
                    upstream: np.ndarray) -> np.ndarray:
    """Gradient of sum(upstream * warp_image(image, field)) w.r.t. the field.

    upstream has shape (H, W) or (H, W, C); returns (H, W, 2).
    """
    _check_grid(image.height, image.width, field.height, field.width, "warp_image_grad")
    up = np.asarray(upstream, dtype=np.float64)
    if up.ndim == 2:
        up = up[:, :, None]
    if up.shape != image.data.shape:
        raise ValueError(f"upstream shape {up.shape} does not match image {image.data.shape}")
    ys, xs = _grid_coords(field)
    _, dy, dx = _sample(image.data, ys, xs)
    grad = np.empty((field.height, field.width, 2))
    grad[:, :, 0] = np.sum(up * dy, axis=2)
    grad[:, :, 1] = np.sum(up * dx, axis=2)
    return grad


def warp_labels(labels: LabelMap, field: DisplacementField) -> LabelMap:
    """Nearest-neighbor label transport; class ids are preserved exactly."""
    _check_grid(labels.height, labels.width, field.height, field.width, "warp_labels")
    ys, xs = _grid_coords(field)
    yi = np.rint(np.clip(ys, 0.0, labels.height - 1.0)).astype(np.int64)
    xi = np.rint(np.clip(xs, 0.0, labels.width - 1.0)).astype(np.int64)
    return LabelMap(labels.data[yi, xi], labels.num_classes)


def warp_onehot(labels: LabelMap, field: DisplacementField) -> Image:
    """Differentiable label transport: bilinear warp of the one-hot channels."""
    _check_grid(labels.height, labels.width, field.height, field.width, "warp_onehot")
    return warp_image(labels.onehot(), field)


def jacobian_determinant(field: DisplacementField) -> Image:
    """det(I + grad u) per pixel; values <= 0 indicate folding.

    Forward differences, falling back to backward differences on the last
    row/column so the output covers the full grid.
    """
    u = field.u

    def diff(a, axis):
        d = np.empty_like(a)
        if a.shape[axis] == 1:
            d[...] = 0.0
            return d
        sl = [slice(None)] * a.ndim
        sl_lo = list(sl)
        sl_lo[axis] = slice(0, -1)
        sl_hi = list(sl)
        sl_hi[axis] = slice(1, None)
        fwd = a[tuple(sl_hi)] - a[tuple(sl_lo)]
        sl_head = list(sl)
        sl_head[axis] = slice(0, -1)
        d[tuple(sl_head)] = fwd
        sl_last = list(sl)
        sl_last[axis] = slice(-1, None)
        sl_prev = list(sl)
        sl_prev[axis] = slice(-1, None)
        d[tuple(sl_last)] = fwd[tuple(sl_prev)] if a.shape[axis] > 1 else 0.0
        return d

    duy_dy = diff(u[:, :, 0], 0)
    duy_dx = diff(u[:, :, 0], 1)
    dux_dy = diff(u[:, :, 1], 0)
    dux_dx = diff(u[:, :, 1], 1)
    det = (1.0 + duy_dy) * (1.0 + dux_dx) - duy_dx * dux_dy
    return Image(det)
