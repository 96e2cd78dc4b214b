"""Density-penalised proposal scoring for instance masks.

For every peak of a present category, each candidate proposal is scored as

    alpha * <R, P> + <R, contour(P)> - beta * <Q, P> - gamma * |1 - <D, P>|

where R is the peak response map, Q a background mask from the category map,
D the category density map and <X, Y> the sum of the elementwise product.
The best proposal per peak is kept.

Mask archive format (JSON lines, one record per mask)::

    {"image_id": str, "id": str, "size": [H, W], "counts": [int, ...], ...}

``counts`` is a run-length encoding of the row-major flattened binary mask,
alternating runs of 0s and 1s and starting with a (possibly empty) run of 0s.
Extra keys (category, score, peak, ...) are carried through untouched.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import cv2
import numpy as np
import torch

from .peaks import extract_peaks


# -- mask archive ----------------------------------------------------------

def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(counts: Sequence[int], size: Sequence[int]) -> np.ndarray:
    h, w = size
    if sum(counts) != h * w:
        raise ValueError(f"RLE covers {sum(counts)} cells, mask has {h * w}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    return np.repeat(values, counts).reshape(h, w)


def write_mask_archive(path, records: Iterable[dict]) -> int:
    """Each record needs ``image_id``, ``id`` and ``mask``; other keys are kept."""
    n = 0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for rec in records:
            rec = dict(rec)
            mask = np.asarray(rec.pop("mask"), dtype=bool)
            rec["size"] = list(mask.shape)
            rec["counts"] = rle_encode(mask)
            f.write(json.dumps(rec, sort_keys=True) + "\n")
            n += 1
    return n


def read_mask_archive(path) -> list[dict]:
    """Records with the decoded boolean ``mask`` in place of size/counts."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mask archive not found: {path}")
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec["mask"] = rle_decode(rec.pop("counts"), rec.pop("size"))
            except (ValueError, KeyError) as e:
                raise ValueError(f"{path}:{lineno}: bad mask record ({e})") from None
            out.append(rec)
    return out


def resample_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resampling of a binary mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == tuple(shape):
        return mask
    h, w = shape
    out = cv2.resize(mask.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST)
    return out.astype(bool)


# -- scoring ---------------------------------------------------------------

def contour_mask(mask: np.ndarray) -> np.ndarray:
    """Morphological gradient (3x3 dilation minus erosion)."""
    m = np.asarray(mask, dtype=np.uint8)
    kernel = np.ones((3, 3), np.uint8)
    return cv2.morphologyEx(m, cv2.MORPH_GRADIENT, kernel).astype(bool)


@dataclass
class Proposal:
    mask: np.ndarray
    contour: np.ndarray = None
    id: str = ""

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.contour is None:
            self.contour = contour_mask(self.mask)

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def resampled(self, shape) -> "Proposal":
        if self.mask.shape == tuple(shape):
            return self
        return Proposal(resample_mask(self.mask, shape), id=self.id)


@dataclass
class PeakEvidence:
    location: tuple[int, int]
    response_map: np.ndarray
    category: int

    def __post_init__(self):
        self.response_map = np.asarray(self.response_map, dtype=np.float64)
        if (self.response_map < 0).any():
            raise ValueError("peak response map must be non-negative")


@dataclass(frozen=True)
class ScoreWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0


@dataclass
class ScoreBreakdown:
    response: float  # <R, P>
    contour: float  # <R, contour(P)>
    background: float  # <Q, P>
    density_penalty: float  # d_p
    weights: ScoreWeights = field(default_factory=ScoreWeights)

    @property
    def total(self) -> float:
        w = self.weights
        return (w.alpha * self.response + self.contour - w.beta * self.background
                - w.gamma * self.density_penalty)


def _check_shapes(*grids):
    shapes = {np.shape(g) for g in grids}
    if len(shapes) != 1:
        raise ValueError(f"grids are not co-registered: {sorted(shapes)}")


def density_penalty(density: np.ndarray, proposal: Proposal) -> float:
    """|1 - sum of density inside the proposal|."""
    _check_shapes(density, proposal.mask)
    return abs(1.0 - float(np.sum(np.asarray(density, dtype=np.float64) * proposal.mask)))


def score_breakdown(evidence: PeakEvidence, proposal: Proposal, background: np.ndarray,
                    density: np.ndarray, weights: ScoreWeights = ScoreWeights()) -> ScoreBreakdown:
    r = evidence.response_map
    _check_shapes(r, proposal.mask, proposal.contour, background, density)
    return ScoreBreakdown(
        response=float(np.sum(r * proposal.mask)),
        contour=float(np.sum(r * proposal.contour)),
        background=float(np.sum(np.asarray(background, dtype=np.float64) * proposal.mask)),
        density_penalty=density_penalty(density, proposal),
        weights=weights,
    )


def score_proposal(evidence, proposal, background, density, weights=ScoreWeights()) -> float:
    return score_breakdown(evidence, proposal, background, density, weights).total


def background_mask(category_map: np.ndarray, quantile: float = 0.5) -> np.ndarray:
    """1 where the category map is below its ``quantile`` value."""
    m = np.asarray(category_map, dtype=np.float64)
    return (m < np.quantile(m, quantile)).astype(np.float64)


def fallback_response_map(category_map: np.ndarray, location: tuple[int, int],
                          sigma: float = 2.0) -> np.ndarray:
    """Stand-in for a peak response map: the min-max normalised category map
    under a Gaussian window centred on the peak."""
    m = np.asarray(category_map, dtype=np.float64)
    span = m.max() - m.min()
    norm = (m - m.min()) / span if span > 0 else np.zeros_like(m)
    yy, xx = np.mgrid[: m.shape[0], : m.shape[1]]
    r, c = location
    window = np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * sigma ** 2))
    return norm * window


def top_peaks(category_map: np.ndarray, k: int, radius: int = 1) -> list[tuple[int, int]]:
    """Locations of the ``k`` highest strict local maxima, highest first."""
    peaks = extract_peaks(torch.as_tensor(np.asarray(category_map, dtype=np.float64)), radius).numpy()
    rows, cols = np.nonzero(peaks)
    order = np.lexsort((cols, rows, -peaks[rows, cols]))
    return [(int(rows[i]), int(cols[i])) for i in order[:k]]


@dataclass
class Selection:
    peak: PeakEvidence
    proposal_index: Optional[int]
    score: Optional[ScoreBreakdown]

    @property
    def matched(self) -> bool:
        return self.proposal_index is not None


def select_masks(peaks: Sequence[PeakEvidence], proposals: Sequence[Proposal],
                 density_maps: np.ndarray, background_maps: np.ndarray,
                 weights: ScoreWeights = ScoreWeights()) -> list[Selection]:
    """Best proposal for every peak.

    ``density_maps`` / ``background_maps`` are (C, H, W) and indexed by the
    peak's category. Proposals are resampled to H x W. Ties go to the smaller
    proposal, then to the earlier one. One proposal may serve several peaks.
    """
    out = []
    if not peaks:
        return out
    shape = np.shape(density_maps)[-2:]
    grid_props = [p.resampled(shape) for p in proposals]
    for pk in peaks:
        best = None
        for i, gp in enumerate(grid_props):
            sb = score_breakdown(pk, gp, background_maps[pk.category], density_maps[pk.category], weights)
            key = (-sb.total, gp.area, i)
            if best is None or key < best[0]:
                best = (key, i, sb)
        if best is None:
            out.append(Selection(pk, None, None))
        else:
            out.append(Selection(pk, best[1], best[2]))
    return out
