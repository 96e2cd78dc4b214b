"""Peak maps, class confidence scores and pseudo ground-truth masks.

All functions operate on torch tensors whose last two dimensions are the
spatial grid; leading dimensions (batch, category) are carried through.
"""
from __future__ import annotations

import logging
from typing import NamedTuple

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)


def peak_locations(grid: torch.Tensor, radius: int = 1) -> torch.Tensor:
    """Boolean grid, True where a cell strictly exceeds every in-bounds
    neighbour within Chebyshev distance ``radius``."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    if grid.dim() < 2 or grid.shape[-1] == 0 or grid.shape[-2] == 0:
        raise ValueError(f"expected a non-empty (..., H, W) grid, got {tuple(grid.shape)}")
    lead, (h, w) = grid.shape[:-2], grid.shape[-2:]
    x = grid.detach().reshape(-1, 1, h, w)
    k = 2 * radius + 1
    # out-of-bounds cells are -inf so border maxima still count
    padded = F.pad(x, (radius,) * 4, value=float("-inf"))
    patches = F.unfold(padded, kernel_size=k)  # (N, k*k, h*w)
    centre = (k * k) // 2
    neighbours = torch.cat([patches[:, :centre], patches[:, centre + 1:]], dim=1)
    if neighbours.shape[1] == 0:
        return torch.ones_like(grid, dtype=torch.bool)
    best = neighbours.max(dim=1).values.reshape(-1, 1, h, w)
    return (x > best).reshape(*lead, h, w)


def extract_peaks(grid: torch.Tensor, radius: int = 1) -> torch.Tensor:
    """Peak map: ``grid`` at strict local maxima, exactly 0 elsewhere."""
    return torch.where(peak_locations(grid, radius), grid, torch.zeros_like(grid))


def class_confidence(peaks: torch.Tensor) -> torch.Tensor:
    """Mean of the non-zero entries of each peak map (0 for an empty map).

    Differentiable with respect to the peak values, so the classifier is
    trained only through its local maxima.
    """
    nonzero = (peaks != 0).to(peaks.dtype)
    n = nonzero.sum(dim=(-2, -1))
    total = (peaks * nonzero).sum(dim=(-2, -1))
    return torch.where(n > 0, total / n.clamp(min=1), torch.zeros_like(total))


class PseudoMask(NamedTuple):
    values: torch.Tensor  # binary, same shape as the peak map
    threshold: torch.Tensor  # h_c per grid
    fallback: torch.Tensor  # True where fewer than t_c peaks existed


def pseudo_masks(peaks: torch.Tensor, t: torch.Tensor) -> PseudoMask:
    """Batched pseudo masks.

    ``peaks`` is (..., H, W); ``t`` holds the per-grid within-range count
    (entries <= 0 produce an empty mask). The threshold is the t-th highest
    non-zero peak; every peak at or above it is switched on, so ties may
    yield more than t ones. With fewer than t peaks the smallest peak is
    used instead. Grids with no peaks at all get an empty mask.
    """
    peaks = peaks.detach()
    lead, (h, w) = peaks.shape[:-2], peaks.shape[-2:]
    flat = peaks.reshape(-1, h * w)
    t = t.reshape(-1).to(torch.long)
    is_peak = flat != 0
    n_peaks = is_peak.sum(dim=1)
    k = min(max(int(t.max().item()) if t.numel() else 1, 1), h * w)
    ranked = torch.where(is_peak, flat, torch.full_like(flat, float("-inf")))
    top = ranked.topk(k, dim=1).values  # descending
    fallback = (t > 0) & (n_peaks < t) & (n_peaks > 0)
    idx = torch.where(fallback, n_peaks, t) - 1
    thresh = top.gather(1, idx.clamp(min=0).unsqueeze(1)).squeeze(1)
    active = (t > 0) & (n_peaks > 0)
    mask = is_peak & (flat >= thresh.unsqueeze(1)) & active.unsqueeze(1)
    return PseudoMask(
        mask.to(peaks.dtype).reshape(*lead, h, w),
        torch.where(active, thresh, torch.zeros_like(thresh)).reshape(lead),
        fallback.reshape(lead),
    )


def pseudo_mask(peaks: torch.Tensor, t_c: int) -> PseudoMask:
    """Pseudo ground-truth mask for a single category grid with count ``t_c``."""
    if not 1 <= t_c:
        raise ValueError(f"t_c must be >= 1, got {t_c}")
    if not bool((peaks != 0).any()):
        raise ValueError("peak map has no peaks; cannot build a pseudo mask")
    res = pseudo_masks(peaks, torch.tensor([t_c]))
    if bool(res.fallback.any()):
        log.warning("only %d peaks for t_c=%d, thresholding at the smallest peak",
                    int((peaks != 0).sum()), t_c)
    return PseudoMask(res.values.reshape(peaks.shape), res.threshold.reshape(()),
                      res.fallback.reshape(()))


def mask_density(density: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Hadamard product of a density grid with a binary mask."""
    if density.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(density.shape)} vs {tuple(mask.shape)}")
    return density * mask
