"""Loss terms for the classification and density branches.

Per-image terms are computed in a batched, vectorised form: each function
returns one value per image (or per image/category grid) together with the
caller deciding which entries are valid. ``batch_objective`` averages every
term over the images for which it is defined and forms the weighted total.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .datamodel import LossReport

log = logging.getLogger(__name__)


def class_loss(scores: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Multi-label soft-margin loss, averaged over categories (last dim).

    ``targets`` is 1 for present categories and 0 for absent ones.
    """
    targets = targets.to(scores.dtype)
    ll = targets * F.logsigmoid(scores) + (1 - targets) * F.logsigmoid(-scores)
    return -ll.mean(dim=-1)


def sp_plus_gradient(masked_density: torch.Tensor, mask: torch.Tensor,
                     cardinality_s: int = 1) -> torch.Tensor:
    """Closed-form gradient of the positive spatial loss, routed through the mask.

    d/dx [-log sigmoid(x)] = -(1 - sigmoid(x)); the result is normalised by
    |S| * ||B|| and multiplied by the mask so masked-out cells get exactly 0.
    """
    if masked_density.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(masked_density.shape)} vs {tuple(mask.shape)}")
    norm = mask.sum(dim=(-2, -1), keepdim=True).clamp(min=1) * cardinality_s
    d = masked_density * mask
    return (-(1 - torch.sigmoid(d)) * mask / norm) * mask


class _SpatialPositive(torch.autograd.Function):
    # backward is the hand-derived masked gradient; the mask itself is
    # treated as a constant, so nothing flows back into the classifier
    @staticmethod
    def forward(ctx, density, mask):
        d = density * mask
        norm = mask.sum(dim=(-2, -1)).clamp(min=1)
        ctx.save_for_backward(density, mask)
        return -(mask * F.logsigmoid(d)).sum(dim=(-2, -1)) / norm

    @staticmethod
    def backward(ctx, grad_out):
        density, mask = ctx.saved_tensors
        grad = sp_plus_gradient(density, mask) * grad_out[..., None, None]
        return grad, None


def spatial_positive_grids(density: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """-||B * log sigmoid(D * B)|| / ||B|| for every (..., H, W) grid.

    Grids with an empty mask contribute 0.
    """
    if density.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(density.shape)} vs {tuple(mask.shape)}")
    return _SpatialPositive.apply(density, mask.detach().to(density.dtype))


def spatial_positive_loss(masked_density: torch.Tensor, mask: torch.Tensor,
                          cardinality_s: int) -> torch.Tensor:
    """One category's contribution to the positive spatial loss."""
    if float(mask.sum()) == 0:
        raise ValueError("pseudo mask is empty")
    if cardinality_s < 1:
        raise ValueError("|S| must be >= 1")
    return spatial_positive_grids(masked_density, mask) / cardinality_s


def spatial_negative_grids(density: torch.Tensor) -> torch.Tensor:
    """-mean(log(1 - sigmoid(D))) for every (..., H, W) grid."""
    return -F.logsigmoid(-density).mean(dim=(-2, -1))


def spatial_negative_loss(density: torch.Tensor, cardinality_a: int) -> torch.Tensor:
    """One absent category's contribution to the negative spatial loss."""
    if cardinality_a < 1:
        raise ValueError("|A| must be >= 1")
    return spatial_negative_grids(density) / cardinality_a


def _selected_mean(values: torch.Tensor, selected: torch.Tensor) -> torch.Tensor:
    sel = selected.to(values.dtype)
    n = sel.sum(dim=-1)
    return torch.where(n > 0, (values * sel).sum(dim=-1) / n.clamp(min=1), torch.zeros_like(n))


def global_mse_loss(predicted: torch.Tensor, target: torch.Tensor,
                    selected: torch.Tensor) -> torch.Tensor:
    """Squared count error averaged over the selected (absent + within-range)
    categories of each image; 0 for images with nothing selected."""
    if not bool(selected.any(dim=-1).all()):
        log.debug("image without absent/within-range categories; MSE term is 0")
    return _selected_mean((predicted - target.to(predicted.dtype)) ** 2, selected)


def rank_loss(predicted: torch.Tensor, beyond: torch.Tensor, t_tilde: int = 5) -> torch.Tensor:
    """Zero-margin hinge against under-counting, averaged over beyond-range
    categories of each image; 0 when there are none."""
    return _selected_mean(F.relu(t_tilde - predicted), beyond)


def _masked_batch_mean(values: torch.Tensor, valid: Optional[torch.Tensor]) -> torch.Tensor:
    if valid is None:
        return values.mean()
    valid = valid.to(values.dtype)
    n = valid.sum()
    if n == 0:
        return values.sum() * 0
    return (values * valid).sum() / n


def batch_objective(class_terms: torch.Tensor,
                    mse_terms: torch.Tensor, mse_valid: torch.Tensor,
                    rank_terms: torch.Tensor, rank_valid: torch.Tensor,
                    sp_plus_terms: Optional[torch.Tensor] = None,
                    sp_plus_valid: Optional[torch.Tensor] = None,
                    sp_minus_terms: Optional[torch.Tensor] = None,
                    sp_minus_valid: Optional[torch.Tensor] = None,
                    lambda_rank: float = 0.1) -> tuple[torch.Tensor, LossReport]:
    """Average per-image terms over the batch and combine them.

    An image whose relevant category set is empty is left out of that term's
    average. Spatial terms may be omitted (first training stage).
    Returns the differentiable total and a detached ``LossReport``.
    """
    if class_terms.numel() == 0:
        raise ValueError("empty batch")
    parts = {
        "class_loss": class_terms.mean(),
        "mse": _masked_batch_mean(mse_terms, mse_valid),
        "rank": _masked_batch_mean(rank_terms, rank_valid),
    }
    if sp_plus_terms is not None:
        parts["sp_plus"] = _masked_batch_mean(sp_plus_terms, sp_plus_valid)
    if sp_minus_terms is not None:
        parts["sp_minus"] = _masked_batch_mean(sp_minus_terms, sp_minus_valid)
    total = parts["class_loss"] + parts["mse"] + lambda_rank * parts["rank"]
    if "sp_plus" in parts:
        total = total + parts["sp_plus"]
    if "sp_minus" in parts:
        total = total + parts["sp_minus"]
    report = LossReport(lambda_rank=lambda_rank,
                        **{k: float(v.detach()) for k, v in parts.items()})
    return total, report


@dataclass
class ImageTerms:
    """Per-image loss values; ``None`` marks a term whose category set is empty."""

    class_loss: float
    mse: Optional[float] = None
    rank: Optional[float] = None
    sp_plus: Optional[float] = None
    sp_minus: Optional[float] = None


def combine_batch(terms: Sequence[ImageTerms], lambda_rank: float = 0.1) -> LossReport:
    if not terms:
        raise ValueError("empty batch")

    def column(name):
        vals = [getattr(t, name) for t in terms]
        v = torch.tensor([0.0 if x is None else x for x in vals], dtype=torch.float64)
        ok = torch.tensor([x is not None for x in vals])
        return v, ok

    _, report = batch_objective(
        column("class_loss")[0], *column("mse"), *column("rank"),
        *column("sp_plus"), *column("sp_minus"), lambda_rank=lambda_rank,
    )
    return report
