"""Dense array types, deterministic RNG, and shared file formats.

All arrays are 64-bit floats in row-major, channel-innermost layout so the
on-disk format and the compute kernels agree bit for bit.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

SEMT_MAGIC = b"SEMT"


class FormatError(ValueError):
    """Malformed file content (bad magic, truncated payload, bad header)."""


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class Image:
    """Dense 2D scalar grid, optionally multi-channel; shape (H, W, C)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"image data must be 2D or 3D, got ndim={arr.ndim}")
        if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError(f"degenerate image shape {arr.shape}")
        _require_finite(arr, "image")
        object.__setattr__(self, "data", np.ascontiguousarray(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def plane(self, channel: int = 0) -> np.ndarray:
        return self.data[:, :, channel]


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel integer class ids on the same grid as its paired Image."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError("label data must be 2D")
        arr = np.ascontiguousarray(arr.astype(np.int64))
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise ValueError("label id out of range")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def onehot(self) -> Image:
        """One-hot encode into an Image with num_classes channels."""
        h, w = self.data.shape
        out = np.zeros((h, w, self.num_classes), dtype=np.float64)
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        out[yy, xx, self.data] = 1.0
        return Image(out)


@dataclass(frozen=True)
class DisplacementField:
    """Per-pixel displacement u with the transform p -> p + u(p).

    u has shape (H, W, 2) holding (du_y, du_x) in pixel units.
    """

    u: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.u, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ValueError(f"displacement field must have shape (H, W, 2), got {arr.shape}")
        _require_finite(arr, "displacement field")
        object.__setattr__(self, "u", np.ascontiguousarray(arr))

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @staticmethod
    def zeros(height: int, width: int) -> "DisplacementField":
        return DisplacementField(np.zeros((height, width, 2)))


# ---------------------------------------------------------------------------
# Counter-based RNG (splitmix64 finalizer). Identical streams on every
# platform; draws are addressed by index so parallel use needs no locking.
# ---------------------------------------------------------------------------

_U64 = np.uint64
_GAMMA = _U64(0x9E3779B97F4A7C15)
_M1 = _U64(0xBF58476D1CE4E5B9)
_M2 = _U64(0x94D049BB133111EB)


def _mix64(x: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps mod 2^64 by design
    with np.errstate(over="ignore"):
        x = (x ^ (x >> _U64(30))) * _M1
        x = (x ^ (x >> _U64(27))) * _M2
        return x ^ (x >> _U64(31))


@dataclass
class Rng:
    """Deterministic counter-based generator; one value per (seed, index)."""

    seed: int
    counter: int = field(default=0)

    def __post_init__(self):
        with np.errstate(over="ignore"):
            self._key = _mix64(_U64(self.seed & 0xFFFFFFFFFFFFFFFF) + _GAMMA)

    def split(self, tag: int) -> "Rng":
        """Derive an independent stream keyed by an integer tag."""
        with np.errstate(over="ignore"):
            derived = int(_mix64(self._key ^ _mix64(_U64(tag & 0xFFFFFFFFFFFFFFFF) + _GAMMA)))
        return Rng(derived)

    def uniform_at(self, index: int, n: int) -> np.ndarray:
        """n uniforms in [0, 1) at explicit stream positions index..index+n-1."""
        idx = np.arange(index, index + n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            bits = _mix64(self._key + idx * _GAMMA)
        return (bits >> _U64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, n: int) -> np.ndarray:
        out = self.uniform_at(self.counter, n)
        self.counter += n
        return out

    def normal(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller (two uniforms per draw)."""
        u = self.uniform(2 * n).reshape(n, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return r * np.cos(2.0 * np.pi * u[:, 1])

    def integers(self, lo: int, hi: int, n: int) -> np.ndarray:
        """n integers uniform on [lo, hi)."""
        return lo + np.floor(self.uniform(n) * (hi - lo)).astype(np.int64)

    def shuffled(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = int(self.integers(0, i + 1, 1)[0])
            perm[i], perm[j] = perm[j], perm[i]
        return perm


# ---------------------------------------------------------------------------
# SEMT tensor file format
# ---------------------------------------------------------------------------


def save_tensor(path, shape, data) -> None:
    """Write a float64 tensor: magic, u32 header length, JSON header, payload."""
    shape = [int(s) for s in shape]
    flat = np.ascontiguousarray(np.asarray(data, dtype=np.float64).reshape(-1))
    if int(np.prod(shape)) != flat.size:
        raise ValueError(f"shape {shape} does not match data length {flat.size}")
    header = json.dumps({"dtype": "f64", "shape": shape},
                        separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(SEMT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(flat.astype("<f8").tobytes())


def load_tensor(path):
    """Exact inverse of save_tensor; returns (shape, flat float64 array)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != SEMT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
        shape = [int(s) for s in header["shape"]]
        dtype = header["dtype"]
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: header parse failure: {e}") from e
    if dtype != "f64":
        raise FormatError(f"{path}: unsupported dtype {dtype!r}")
    count = int(np.prod(shape)) if shape else 1
    payload = raw[8 + hlen:]
    if len(payload) != 8 * count:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {8 * count}")
    return shape, np.frombuffer(payload, dtype="<f8").astype(np.float64)


def save_image(path, image: Image) -> None:
    save_tensor(path, image.data.shape, image.data)


def load_image(path) -> Image:
    shape, data = load_tensor(path)
    return Image(data.reshape(shape))


def save_labels(path, labels: LabelMap) -> None:
    save_tensor(path, [labels.height, labels.width], labels.data.astype(np.float64))


def load_labels(path, num_classes: int) -> LabelMap:
    shape, data = load_tensor(path)
    return LabelMap(data.reshape(shape[0], shape[1]).astype(np.int64), num_classes)


def save_field(path, f: DisplacementField) -> None:
    save_tensor(path, f.u.shape, f.u)


def load_field(path) -> DisplacementField:
    shape, data = load_tensor(path)
    return DisplacementField(data.reshape(shape))


# ---------------------------------------------------------------------------
# PGM (binary P5) for human-viewable output
# ---------------------------------------------------------------------------


def save_pgm(image: Image, path) -> None:
    """Write single-channel image as binary PGM, min->0, max->255.

    A constant image maps to mid-gray (128) so the mapping is total.
    """
    if image.channels != 1:
        raise ValueError("save_pgm requires a single-channel image")
    plane = image.plane(0)
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        scaled = np.rint((plane - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.full_like(plane, 128.0)
    bytes8 = np.clip(scaled, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{image.width} {image.height}\n255\n".encode("ascii"))
        f.write(bytes8.tobytes())


def load_pgm(path) -> Image:
    """Read binary PGM; pixel values returned in [0, 1] (byte / 255)."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM")
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed
    tokens = []
    pos = 2
    while len(tokens) < 3:
        m = re.match(rb"(?:\s+|#[^\n]*\n)*(\d+)", raw[pos:])
        if m is None:
            raise FormatError(f"{path}: malformed PGM header")
        tokens.append(int(m.group(1)))
        pos += m.end()
    width, height, maxval = tokens
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    pixels = raw[pos:pos + width * height]
    if len(pixels) != width * height:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)
    return Image(arr.astype(np.float64) / 255.0)
