"""Evaluation protocol: Dice overlap, deformation smoothness and folding,
paired nonparametric statistics, and grid-line visualization of fields.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .core import DisplacementField, Image, LabelMap
from .similarity import diffusion_regularizer
from .warp import jacobian_determinant, warp_image, warp_labels


def dice(a: LabelMap, b: LabelMap, class_id: int) -> float:
    """Sorensen Dice overlap 2|A∩B|/(|A|+|B|) for one class.

    Both masks empty -> 1.0 (perfect agreement); exactly one empty -> 0.0.
    """
    if a.data.shape != b.data.shape:
        raise ValueError("grid mismatch")
    ma = a.data == class_id
    mb = b.data == class_id
    na, nb = int(ma.sum()), int(mb.sum())
    if na == 0 and nb == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / (na + nb)


def mean_dice(a: LabelMap, b: LabelMap, foreground_classes=None) -> float:
    """Unweighted mean of per-class dice over the foreground classes."""
    if foreground_classes is None:
        foreground_classes = range(1, a.num_classes)
    scores = [dice(a, b, c) for c in foreground_classes]
    if not scores:
        raise ValueError("no foreground classes")
    return float(np.mean(scores))


@dataclass(frozen=True)
class WilcoxonResult:
    p_value: float
    n: int  # pairs remaining after dropping zero differences
    all_zero: bool


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(x, y, direction: str = "greater") -> WilcoxonResult:
    """One-sided Wilcoxon signed-rank test for paired samples.

    direction "greater" tests whether x tends larger than y. Zero
    differences are dropped; ties get average ranks. Exact null
    distribution (sign-flip enumeration via polynomial counting) for
    n <= 20; normal approximation with tie correction and 0.5 continuity
    correction beyond.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 1:
        raise ValueError("need two equal-length 1D samples")
    if direction == "less":
        x, y = y, x
    elif direction != "greater":
        raise ValueError(f"unknown direction {direction!r}")
    d = x - y
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(1.0, 0, True)
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= 20:
        # distribution of W+ over all 2^n sign assignments; average ranks
        # are half-integers, so doubled ranks are exact integers
        r2 = np.rint(2.0 * ranks).astype(np.int64)
        counts = np.zeros(int(r2.sum()) + 1)
        counts[0] = 1.0
        for r in r2:
            shifted = np.zeros_like(counts)
            shifted[r:] = counts[:len(counts) - r]
            counts = counts + shifted
        w2 = int(np.rint(2.0 * w_plus))
        p = counts[w2:].sum() / (2.0 ** n)
        return WilcoxonResult(float(p), n, False)
    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts)) / 48.0
    sigma = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
    z = (w_plus - 0.5 - mu) / sigma
    return WilcoxonResult(0.5 * math.erfc(z / math.sqrt(2.0)), n, False)


def cohens_d(x, y) -> float:
    """Standardized mean difference with the pooled sample deviation."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = len(x), len(y)
    if nx < 2 or ny < 2:
        raise ValueError("need at least 2 samples per group")
    sx2 = x.var(ddof=1)
    sy2 = y.var(ddof=1)
    pooled = ((nx - 1) * sx2 + (ny - 1) * sy2) / (nx + ny - 2)
    if pooled <= 0.0:
        raise ValueError("zero pooled variance: effect size undefined")
    return float((x.mean() - y.mean()) / math.sqrt(pooled))


def significance_stars(p: float) -> str:
    if p <= 0.001:
        return "***"
    if p <= 0.01:
        return "**"
    if p <= 0.05:
        return "*"
    return ""


def smoothness_stats(field: DisplacementField):
    """(mean squared forward-difference gradient, fraction of folded pixels)."""
    mean_grad_sq = diffusion_regularizer(field)
    det = jacobian_determinant(field).plane(0)
    folding = float((det <= 0.0).mean())
    return mean_grad_sq, folding


def render_grid(field: DisplacementField, spacing: int = 8) -> Image:
    """Uniform grid-line image resampled through the field."""
    if spacing < 2:
        raise ValueError("spacing must be >= 2")
    h, w = field.height, field.width
    grid = np.zeros((h, w))
    grid[::spacing, :] = 1.0
    grid[:, ::spacing] = 1.0
    return warp_image(Image(grid), field)


@dataclass
class PairResult:
    """Per-pair evaluation of one metric's registration output."""

    dice_pre: float
    dice_post: float
    mean_grad_sq: float
    folding_fraction: float


def evaluate_pairs(pairs, fields) -> list[PairResult]:
    """Score registered fields against the paired label maps.

    pairs: sequence of (moving, moving_labels, fixed, fixed_labels, ...);
    fields: one DisplacementField per pair.
    """
    if len(pairs) != len(fields):
        raise ValueError("pair/field count mismatch")
    results = []
    for pair, field in zip(pairs, fields):
        moving, labels_m, fixed, labels_f = pair[0], pair[1], pair[2], pair[3]
        pre = mean_dice(labels_m, labels_f)
        post = mean_dice(warp_labels(labels_m, field), labels_f)
        grad_sq, folding = smoothness_stats(field)
        results.append(PairResult(pre, post, grad_sq, folding))
    return results


REPORT_COLUMNS = ["metric", "mean_dice_pre", "mean_dice_post", "mean_grad_sq",
                  "folding_fraction", "p_value", "stars", "cohens_d", "n"]


def aggregate_row(name: str, results: list[PairResult]) -> dict:
    return {
        "metric": name,
        "mean_dice_pre": float(np.mean([r.dice_pre for r in results])),
        "mean_dice_post": float(np.mean([r.dice_post for r in results])),
        "mean_grad_sq": float(np.mean([r.mean_grad_sq for r in results])),
        "folding_fraction": float(np.mean([r.folding_fraction for r in results])),
        "p_value": "", "stars": "", "cohens_d": "", "n": len(results),
    }


def evaluate_run(pairs, fields_by_metric: dict, deepsim_name: str,
                 direction: str = "greater") -> list[dict]:
    """Compare every baseline against the reference metric.

    Returns one report row per baseline: its aggregate Dice and smoothness,
    plus Wilcoxon p (one-sided, reference-vs-baseline post-Dice) with
    significance stars, and Cohen's d. All-zero differences suppress stars.
    """
    if deepsim_name not in fields_by_metric:
        raise ValueError(f"reference metric {deepsim_name!r} missing from runs")
    scored = {name: evaluate_pairs(pairs, fields)
              for name, fields in fields_by_metric.items()}
    ref_dice = [r.dice_post for r in scored[deepsim_name]]
    rows = []
    for name, results in scored.items():
        if name == deepsim_name:
            continue
        row = aggregate_row(name, results)
        base_dice = [r.dice_post for r in results]
        test = wilcoxon_signed_rank(ref_dice, base_dice, direction)
        row["p_value"] = test.p_value
        row["stars"] = "" if test.all_zero else significance_stars(test.p_value)
        try:
            row["cohens_d"] = cohens_d(ref_dice, base_dice)
        except ValueError:
            row["cohens_d"] = ""
        row["n"] = test.n if not test.all_zero else len(results)
        rows.append(row)
    return rows


def write_report_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
