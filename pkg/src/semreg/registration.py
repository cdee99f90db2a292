"""Drivers that minimize the registration loss.

Two routes: per-pair iterative Adam optimization over a dense displacement
field, and amortized training of the registration U-net whose loss is
computed with a frozen feature extractor when the metric asks for one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import nn
from .core import DisplacementField, Image, LabelMap, Rng
from .models import UNet, reg_forward_with_cache
from .similarity import MetricKind, prepare_context, registration_loss


class DivergenceError(RuntimeError):
    """Loss became NaN; carries the step index where it happened."""

    def __init__(self, step: int):
        super().__init__(f"loss diverged to NaN at step {step}")
        self.step = step


@dataclass
class IterConfig:
    steps: int = 300
    lr: float = 0.5
    lam: float = 0.1
    metric: MetricKind = dc_field(default_factory=lambda: MetricKind("mse"))
    record_trace: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.lr <= 0 or self.lam < 0:
            raise ValueError("invalid iterative config")


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    lam: float = 0.1
    metric: MetricKind = dc_field(default_factory=lambda: MetricKind("mse"))
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.lam < 0:
            raise ValueError("invalid training config")


@dataclass
class RegResult:
    field: DisplacementField
    trace: list  # LossTerms per step, length steps+1
    wall_time: float


def register_iterative(moving: Image, fixed: Image, config: IterConfig,
                       labels_moving: LabelMap | None = None,
                       labels_fixed: LabelMap | None = None,
                       initial_field: DisplacementField | None = None) -> RegResult:
    """Minimize the loss over a dense per-pixel field with Adam."""
    start = time.perf_counter()
    metric = config.metric
    context = prepare_context(metric, fixed, labels_fixed)
    if initial_field is None:
        u = np.zeros((moving.height, moving.width, 2))
    else:
        u = initial_field.u.copy()
    opt = nn.Adam(lr=config.lr)
    trace = []
    for step in range(config.steps):
        terms, grad = registration_loss(
            metric, moving, fixed, DisplacementField(u), config.lam,
            labels_moving, labels_fixed, want_grad=True, context=context)
        if not np.isfinite(terms.total):
            raise DivergenceError(step)
        trace.append(terms)
        u = opt.step({"u": u}, {"u": grad})["u"]
    final = registration_loss(metric, moving, fixed, DisplacementField(u),
                              config.lam, labels_moving, labels_fixed,
                              context=context)
    if not np.isfinite(final.total):
        raise DivergenceError(config.steps)
    trace.append(final)
    if not config.record_trace:
        trace = [trace[0], trace[-1]]
    return RegResult(DisplacementField(u), trace, time.perf_counter() - start)


def _mean_loss(net: UNet, pairs, metric: MetricKind, lam: float, contexts) -> float:
    totals = []
    for pair, context in zip(pairs, contexts):
        moving, fixed, labels_m, labels_f = pair
        field, _ = reg_forward_with_cache(net, moving, fixed)
        terms = registration_loss(metric, moving, fixed, field, lam,
                                  labels_m, labels_f, context=context)
        totals.append(terms.total)
    return float(np.mean(totals))


def train_registration(net: UNet, dataset, config: TrainConfig,
                       extractor=None):
    """Amortized training of the registration net; returns per-epoch trace.

    dataset: sequence of (moving, fixed, labels_moving | None,
    labels_fixed | None). The trace has epochs+1 entries; entry 0 is the
    mean loss before any update (equal to the mean data term for a
    zero-initialized head).
    """
    if not dataset:
        raise ValueError("empty dataset")
    metric = config.metric
    if metric.needs_features and metric.extractor is None:
        if extractor is None:
            raise ValueError(f"{metric.kind} metric requires a frozen extractor")
        metric.extractor = extractor
    if metric.needs_labels and any(p[2] is None or p[3] is None for p in dataset):
        raise ValueError("nccsup requires labels for every pair")

    contexts = [prepare_context(metric, fixed, labels_f)
                for _, fixed, _, labels_f in dataset]
    rng = Rng(config.seed)
    opt = nn.Adam(lr=config.lr)
    trace = [_mean_loss(net, dataset, metric, config.lam, contexts)]
    for _ in range(config.epochs):
        order = rng.shuffled(len(dataset))
        losses = []
        for idx in order:
            moving, fixed, labels_m, labels_f = dataset[idx]
            field, cache = reg_forward_with_cache(net, moving, fixed)
            terms, d_field = registration_loss(
                metric, moving, fixed, field, config.lam, labels_m, labels_f,
                want_grad=True, context=contexts[idx])
            if not np.isfinite(terms.total):
                raise DivergenceError(opt.t)
            grads = net.backward(cache, d_field.transpose(2, 0, 1))
            net.set_params(opt.step(net.params(), grads))
            losses.append(terms.total)
        trace.append(float(np.mean(losses)))
    return net, trace


def steps_to_fraction(totals, fraction: float = 0.9) -> int:
    """First index whose loss reaches `fraction` of the final reduction."""
    if not len(totals):
        raise ValueError("empty trace")
    first, last = totals[0], totals[-1]
    target = first - fraction * (first - last)
    for i, value in enumerate(totals):
        if value <= target:
            return i
    return len(totals) - 1


def convergence_report(traces: dict, fraction: float = 0.9):
    """Rows of (name, steps-to-fraction-of-final-reduction, first, last)."""
    lengths = {len(t) for t in traces.values()}
    if len(lengths) > 1:
        raise ValueError("traces must have equal length")
    rows = []
    for name, totals in traces.items():
        rows.append({
            "metric": name,
            "steps_to_fraction": steps_to_fraction(totals, fraction),
            "initial": float(totals[0]),
            "final": float(totals[-1]),
        })
    return rows
