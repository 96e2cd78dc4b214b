"""Counting and instance-segmentation metrics.

Counting: RMSE / relRMSE (and their non-zero variants) per category, GAME(n)
on density maps. Segmentation: average best overlap and mask mAP.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

RMSE_VARIANTS = ("rmse", "rmse_nz", "rel_rmse", "rel_rmse_nz")


@dataclass
class CategoryMetric:
    per_category: np.ndarray  # NaN where undefined
    mean: float


def rmse_family(predicted, ground_truth, variant: str = "rmse") -> CategoryMetric:
    """Per-category error over (T, C) integer count arrays and its category mean.

    ``*_nz`` variants only use images where the ground-truth count is
    non-zero; categories without such images are left out of the mean.
    """
    if variant not in RMSE_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {RMSE_VARIANTS}")
    pred = np.asarray(predicted, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"expected matching (T, C) arrays, got {pred.shape} and {gt.shape}")
    if gt.shape[0] == 0:
        raise ValueError("no records to evaluate")
    sq = (gt - pred) ** 2
    if variant.startswith("rel"):
        sq = sq / (gt + 1)
    use = gt > 0 if variant.endswith("_nz") else np.ones_like(gt, dtype=bool)
    n = use.sum(axis=0)
    # correctly rounded sums keep results independent of summation order
    per = np.array([math.sqrt(math.fsum(sq[use[:, c], c]) / n[c]) if n[c] else math.nan
                    for c in range(gt.shape[1])])
    if (n == 0).any():
        log.warning("%s: categories %s have no non-zero ground truth; excluded",
                    variant, np.flatnonzero(n == 0).tolist())
    valid = per[~np.isnan(per)]
    return CategoryMetric(per, math.fsum(valid) / valid.size if valid.size else math.nan)


def grid_edges(size: int, cells: int) -> np.ndarray:
    """Near-equal integer cell boundaries; nested across powers of two."""
    return (np.arange(cells + 1) * size) // cells


def cell_sums(grid: np.ndarray, level: int) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    cells = 2 ** level
    re, ce = grid_edges(g.shape[0], cells), grid_edges(g.shape[1], cells)
    integral = np.zeros((g.shape[0] + 1, g.shape[1] + 1))
    integral[1:, 1:] = g.cumsum(0).cumsum(1)
    s = integral[np.ix_(re, ce)]
    return s[1:, 1:] - s[:-1, 1:] - s[1:, :-1] + s[:-1, :-1]


def points_to_grid(points: Sequence[tuple[float, float]], shape: tuple[int, int],
                   scale: float = 1.0) -> np.ndarray:
    """Point mass map: each (x, y) point (image pixels) dropped into the cell
    that contains ``(x / scale, y / scale)``."""
    h, w = shape
    out = np.zeros((h, w))
    for x, y in points:
        c = min(max(int(np.floor(x / scale)), 0), w - 1)
        r = min(max(int(np.floor(y / scale)), 0), h - 1)
        out[r, c] += 1
    return out


def game_image(density: np.ndarray, gt_points: Sequence[tuple[float, float]], level: int,
               scale: float = 1.0) -> float:
    """Sum over the 4**level cells of |predicted - ground-truth| local counts."""
    if level < 0:
        raise ValueError("GAME level must be >= 0")
    density = np.asarray(density, dtype=np.float64)
    gt = points_to_grid(gt_points, density.shape, scale)
    return float(np.abs(cell_sums(density, level) - cell_sums(gt, level)).sum())


def game(densities, gt_points, level: int, scale: float = 1.0) -> CategoryMetric:
    """GAME(level) averaged over images, per category and its mean.

    ``densities`` is (N, C, H, W); ``gt_points[i][c]`` lists the (x, y)
    centres of category ``c`` in image ``i`` in image pixels, ``scale`` being
    the image-pixels-per-density-cell factor.
    """
    densities = np.asarray(densities, dtype=np.float64)
    n, c = densities.shape[:2]
    per = np.zeros(c)
    for k in range(c):
        per[k] = np.mean([game_image(densities[i, k], gt_points[i][k], level, scale)
                          for i in range(n)])
    return CategoryMetric(per, float(per.mean()))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


@dataclass
class MaskRecord:
    image_id: str
    category: int
    mask: np.ndarray
    score: float = 0.0


def _by_category(records: Sequence[MaskRecord]) -> dict[int, list[tuple[int, MaskRecord]]]:
    out: dict[int, list] = {}
    for i, r in enumerate(records):
        out.setdefault(r.category, []).append((i, r))
    return out


def abo(predicted: Sequence[MaskRecord], ground_truth: Sequence[MaskRecord]) -> CategoryMetric:
    """Average best overlap: best IoU of each GT instance against same-image,
    same-category predictions, averaged per category then across categories."""
    gt_cat = _by_category(ground_truth)
    if not gt_cat:
        return CategoryMetric(np.zeros(0), 0.0)
    preds: dict[tuple[str, int], list[np.ndarray]] = {}
    for p in predicted:
        preds.setdefault((p.image_id, p.category), []).append(p.mask)
    cats = sorted(gt_cat)
    per = np.zeros(len(cats))
    for k, c in enumerate(cats):
        best = [max((iou(g.mask, m) for m in preds.get((g.image_id, c), [])), default=0.0)
                for _, g in gt_cat[c]]
        per[k] = np.mean(best)
    return CategoryMetric(per, float(per.mean()))


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from a score-ranked TP indicator sequence."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def map_r(predicted: Sequence[MaskRecord], ground_truth: Sequence[MaskRecord],
          iou_threshold: float = 0.5) -> CategoryMetric:
    """Mask mAP at one IoU threshold.

    Predictions are ranked by score (ties keep input order). Each prediction
    is compared with the best-overlapping GT of the same image and category;
    it is a true positive if that overlap reaches the threshold and the GT is
    still unclaimed. Categories without ground truth are skipped.
    """
    gt_cat = _by_category(ground_truth)
    pred_cat = _by_category(predicted)
    cats = sorted(gt_cat)
    per = np.zeros(len(cats))
    for k, c in enumerate(cats):
        gts: dict[str, list[np.ndarray]] = {}
        for _, g in gt_cat[c]:
            gts.setdefault(g.image_id, []).append(g.mask)
        claimed = {img: [False] * len(ms) for img, ms in gts.items()}
        ranked = sorted(pred_cat.get(c, []), key=lambda t: (-t[1].score, t[0]))
        tp = np.zeros(len(ranked))
        for j, (_, p) in enumerate(ranked):
            cands = gts.get(p.image_id, [])
            if not cands:
                continue
            overlaps = [iou(p.mask, g) for g in cands]
            best = int(np.argmax(overlaps))
            if overlaps[best] >= iou_threshold and not claimed[p.image_id][best]:
                claimed[p.image_id][best] = True
                tp[j] = 1
        per[k] = average_precision(tp, len(gt_cat[c]))
    return CategoryMetric(per, float(per.mean()) if len(per) else 0.0)


def write_report(path, rows: Sequence[tuple[str, str, Sequence[str], CategoryMetric]]) -> None:
    """Metrics report CSV: ``metric,variant,category,value`` plus a ``mean`` row each."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "variant", "category", "value"])
        for metric, variant, names, m in rows:
            for name, v in zip(names, m.per_category):
                w.writerow([metric, variant, name, repr(float(v))])
            w.writerow([metric, variant, "mean", repr(float(m.mean))])
