"""The two fixed U-net topologies and the segmentation training loop.

Both networks share one encoder/decoder skeleton (widths 16/32/64, two 3x3
conv+relu per block, 2x2 average pooling, nearest-neighbor upsampling with
skip concatenation, 1x1 head). The segmentation net maps 1 channel to class
logits; the registration net maps 2 stacked images to a 2-channel
displacement and starts from a zero-initialized head so training begins at
the identity transform.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import nn
from .core import DisplacementField, Image, LabelMap, Rng, load_tensor, save_tensor

WIDTHS = (16, 32, 64)

# name, in_ch, out_ch, ksize; head filled in per network
_LAYER_SPECS = [
    ("e1a", 1, 16, 3),
    ("e1b", 16, 16, 3),
    ("e2a", 16, 32, 3),
    ("e2b", 32, 32, 3),
    ("e3a", 32, 64, 3),
    ("e3b", 64, 64, 3),
    ("d2a", 96, 32, 3),
    ("d2b", 32, 32, 3),
    ("d1a", 48, 16, 3),
    ("d1b", 16, 16, 3),
]


class UNet:
    """Encoder-decoder network with hand-chained reverse-mode gradients."""

    def __init__(self, in_channels: int, out_channels: int, rng: Rng,
                 zero_head: bool = False):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.frozen = False
        self.layers: dict[str, nn.ConvLayer] = {}
        specs = [(n, in_channels if n == "e1a" else ci, co, k)
                 for n, ci, co, k in _LAYER_SPECS]
        specs.append(("head", 16, out_channels, 1))
        for i, (name, ci, co, k) in enumerate(specs):
            if name == "head" and zero_head:
                kernel = np.zeros((co, ci, k, k))
            else:
                # He-normal init, deterministic per layer
                std = np.sqrt(2.0 / (ci * k * k))
                draws = rng.split(i).normal(co * ci * k * k)
                kernel = std * draws.reshape(co, ci, k, k)
            self.layers[name] = nn.ConvLayer(kernel, np.zeros(co))

    # -- parameter access -------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers.items():
            out[f"{name}.kernel"] = layer.kernel
            out[f"{name}.bias"] = layer.bias
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        if self.frozen:
            raise RuntimeError("cannot update a frozen network")
        for name, layer in self.layers.items():
            layer.kernel = params[f"{name}.kernel"]
            layer.bias = params[f"{name}.bias"]

    # -- forward ----------------------------------------------------------

    def _block(self, x, la, lb, cache, prefix):
        za = nn.conv2d(x, self.layers[la])
        ra = nn.relu(za)
        zb = nn.conv2d(ra, self.layers[lb])
        rb = nn.relu(zb)
        cache[prefix] = (x, za, ra, zb)
        return rb

    def encoder_forward(self, x: np.ndarray):
        """Returns (a1, a2, a3, cache): the three post-block activations."""
        cache: dict = {}
        a1 = self._block(x, "e1a", "e1b", cache, "e1")
        p1 = nn.avgpool2(a1)
        a2 = self._block(p1, "e2a", "e2b", cache, "e2")
        p2 = nn.avgpool2(a2)
        a3 = self._block(p2, "e3a", "e3b", cache, "e3")
        cache["acts"] = (a1, a2, a3)
        return a1, a2, a3, cache

    def forward(self, x: np.ndarray):
        """Full pass; returns (head output, cache for backward)."""
        if x.shape[0] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[0]}")
        if x.shape[1] % 4 or x.shape[2] % 4:
            raise ValueError(f"grid {x.shape[1]}x{x.shape[2]} not divisible by 4")
        a1, a2, a3, cache = self.encoder_forward(x)
        u3 = nn.upsample2(a3)
        c2 = nn.concat(u3, a2)
        r2 = self._block(c2, "d2a", "d2b", cache, "d2")
        u2 = nn.upsample2(r2)
        c1 = nn.concat(u2, a1)
        r1 = self._block(c1, "d1a", "d1b", cache, "d1")
        out = nn.conv2d(r1, self.layers["head"])
        cache["head_in"] = r1
        return out, cache

    # -- backward ---------------------------------------------------------

    def _block_backward(self, cache, prefix, la, lb, upstream, grads,
                        need_input_grad=True, need_param_grad=True):
        x, za, ra, zb = cache[prefix]
        g = nn.relu_grad(zb, upstream)
        gk, gb, g = nn.conv2d_grad(ra, self.layers[lb], g, True, need_param_grad)
        if need_param_grad:
            grads[f"{lb}.kernel"] = grads.get(f"{lb}.kernel", 0) + gk
            grads[f"{lb}.bias"] = grads.get(f"{lb}.bias", 0) + gb
        g = nn.relu_grad(za, g)
        gk, gb, g = nn.conv2d_grad(x, self.layers[la], g, need_input_grad, need_param_grad)
        if need_param_grad:
            grads[f"{la}.kernel"] = grads.get(f"{la}.kernel", 0) + gk
            grads[f"{la}.bias"] = grads.get(f"{la}.bias", 0) + gb
        return g

    def encoder_backward(self, cache, d_a1, d_a2, d_a3, grads=None,
                         need_param_grad=False) -> np.ndarray:
        """Backprop upstream gradients at (a1, a2, a3) to the input tensor."""
        grads = {} if grads is None else grads
        g = self._block_backward(cache, "e3", "e3a", "e3b", d_a3, grads,
                                 True, need_param_grad)
        g = nn.avgpool2_grad(g) + d_a2
        g = self._block_backward(cache, "e2", "e2a", "e2b", g, grads,
                                 True, need_param_grad)
        g = nn.avgpool2_grad(g) + d_a1
        return self._block_backward(cache, "e1", "e1a", "e1b", g, grads,
                                    True, need_param_grad)

    def backward(self, cache, d_out: np.ndarray):
        """Parameter gradients for the full network given d(head output)."""
        grads: dict[str, np.ndarray] = {}
        gk, gb, g = nn.conv2d_grad(cache["head_in"], self.layers["head"], d_out)
        grads["head.kernel"] = gk
        grads["head.bias"] = gb
        g = self._block_backward(cache, "d1", "d1a", "d1b", g, grads)
        d_u2, d_a1 = g[:WIDTHS[1]], g[WIDTHS[1]:]
        g = nn.upsample2_grad(d_u2)
        g = self._block_backward(cache, "d2", "d2a", "d2b", g, grads)
        d_u3, d_a2 = g[:WIDTHS[2]], g[WIDTHS[2]:]
        d_a3 = nn.upsample2_grad(d_u3)
        self.encoder_backward(cache, d_a1, d_a2, d_a3, grads, need_param_grad=True)
        return grads


@dataclass(frozen=True)
class FeaturePyramid:
    """The three encoder activations: (16,H,W), (32,H/2,W/2), (64,H/4,W/4)."""

    levels: tuple

    def __post_init__(self):
        if len(self.levels) != 3:
            raise ValueError("expected 3 pyramid levels")
        h, w = self.levels[0].shape[1:]
        for lv, (c, f) in zip(self.levels, ((16, 1), (32, 2), (64, 4))):
            if lv.shape != (c, h // f, w // f):
                raise ValueError(f"bad pyramid level shape {lv.shape}")


def _image_tensor(image: Image) -> np.ndarray:
    return image.data.transpose(2, 0, 1)


def seg_forward(net: UNet, image: Image):
    """Segmentation pass; returns (logits (K,H,W), FeaturePyramid)."""
    out, cache = net.forward(_image_tensor(image))
    return out, FeaturePyramid(cache["acts"])


def extract_features(net: UNet, image: Image) -> FeaturePyramid:
    """Encoder-only pass of a (typically frozen) extractor."""
    x = _image_tensor(image)
    if x.shape[1] % 4 or x.shape[2] % 4:
        raise ValueError(f"grid {x.shape[1]}x{x.shape[2]} not divisible by 4")
    a1, a2, a3, _ = net.encoder_forward(x)
    return FeaturePyramid((a1, a2, a3))


def extract_features_with_cache(net: UNet, image: Image):
    a1, a2, a3, cache = net.encoder_forward(_image_tensor(image))
    return FeaturePyramid((a1, a2, a3)), cache


def reg_forward(net: UNet, moving: Image, fixed: Image) -> DisplacementField:
    """Predict a displacement field from the stacked image pair."""
    field, _ = reg_forward_with_cache(net, moving, fixed)
    return field


def reg_forward_with_cache(net: UNet, moving: Image, fixed: Image):
    if (moving.height, moving.width) != (fixed.height, fixed.width):
        raise ValueError("moving/fixed grid mismatch")
    x = np.concatenate([_image_tensor(moving), _image_tensor(fixed)], axis=0)
    out, cache = net.forward(x)
    return DisplacementField(out.transpose(1, 2, 0)), cache


def train_segmentation(net: UNet, dataset, epochs: int, lr: float, rng: Rng):
    """Adam-train the segmentation net; returns per-epoch mean losses.

    dataset is a sequence of (Image, LabelMap) pairs on a 4-divisible grid.
    One Adam step per sample, order reshuffled each epoch from rng.
    """
    if not dataset:
        raise ValueError("empty dataset")
    opt = nn.Adam(lr=lr)
    trace = []
    for _ in range(epochs):
        order = rng.shuffled(len(dataset))
        losses = []
        for idx in order:
            image, labels = dataset[idx]
            logits, cache = net.forward(_image_tensor(image))
            loss, d_logits = nn.softmax_ce(logits, labels.data)
            grads = net.backward(cache, d_logits)
            net.set_params(opt.step(net.params(), grads))
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    return net, trace


def pixel_accuracy(net: UNet, dataset) -> float:
    """Fraction of pixels whose argmax logit matches the label."""
    correct = total = 0
    for image, labels in dataset:
        logits, _ = net.forward(_image_tensor(image))
        pred = logits.argmax(axis=0)
        correct += int((pred == labels.data).sum())
        total += labels.data.size
    return correct / total


# ---------------------------------------------------------------------------
# Checkpoints: JSON topology + one SEMT tensor per parameter
# ---------------------------------------------------------------------------


def save_checkpoint(path, net: UNet, kind: str, num_classes: int | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    topo = {
        "kind": kind,
        "in_channels": net.in_channels,
        "out_channels": net.out_channels,
        "frozen": net.frozen,
        "num_classes": num_classes,
        "layers": [{"name": n, "in_ch": l.in_ch, "out_ch": l.out_ch, "ksize": l.ksize}
                   for n, l in net.layers.items()],
    }
    with open(os.path.join(path, "topology.json"), "w") as f:
        json.dump(topo, f, indent=2, sort_keys=True)
    for name, layer in net.layers.items():
        save_tensor(os.path.join(path, f"{name}.kernel.semt"),
                    layer.kernel.shape, layer.kernel)
        save_tensor(os.path.join(path, f"{name}.bias.semt"),
                    layer.bias.shape, layer.bias)


def load_checkpoint(path):
    """Returns (net, topology dict)."""
    with open(os.path.join(path, "topology.json")) as f:
        topo = json.load(f)
    net = UNet(topo["in_channels"], topo["out_channels"], Rng(0))
    for spec in topo["layers"]:
        name = spec["name"]
        kshape, kdata = load_tensor(os.path.join(path, f"{name}.kernel.semt"))
        bshape, bdata = load_tensor(os.path.join(path, f"{name}.bias.semt"))
        net.layers[name] = nn.ConvLayer(kdata.reshape(kshape), bdata.reshape(bshape))
    net.frozen = bool(topo.get("frozen"))
    return net, topo
