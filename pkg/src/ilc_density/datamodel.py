"""Shared domain types for lower-count supervised counting.

Supervision labels are stored already clamped: a category is either absent (0),
within the subitizing range (1..t_tilde-1) or beyond it (``BEYOND``). Raw counts
only live in dataset files and are read back for evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

BEYOND = -1
T_TILDE = 5


def clamp_raw_count(raw_count: int, t_tilde: int = T_TILDE) -> int:
    """Map a raw instance count to its supervision label."""
    raw_count = int(raw_count)
    if raw_count < 0:
        raise ValueError(f"raw count must be non-negative, got {raw_count}")
    return BEYOND if raw_count >= t_tilde else raw_count


@dataclass(frozen=True)
class CountAnnotation:
    image_id: str
    counts: tuple[int, ...]
    t_tilde: int = T_TILDE

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if not self.counts:
            raise ValueError("annotation needs at least one category")
        for c in self.counts:
            if c != BEYOND and not 0 <= c < self.t_tilde:
                raise ValueError(
                    f"{self.image_id}: label {c} is not in 0..{self.t_tilde - 1} or BEYOND"
                )

    @classmethod
    def from_raw(cls, image_id: str, raw_counts: Sequence[int], t_tilde: int = T_TILDE):
        return cls(image_id, tuple(clamp_raw_count(c, t_tilde) for c in raw_counts), t_tilde)

    @property
    def num_categories(self) -> int:
        return len(self.counts)


@dataclass(frozen=True)
class CategoryPartition:
    """Absent / within-range / beyond-range category indices (0-based)."""

    absent: frozenset[int]
    within: frozenset[int]
    beyond: frozenset[int]

    @property
    def present(self) -> frozenset[int]:
        return self.within | self.beyond


def partition_categories(ann: CountAnnotation) -> CategoryPartition:
    absent, within, beyond = set(), set(), set()
    for c, label in enumerate(ann.counts):
        if label == BEYOND:
            beyond.add(c)
        elif label == 0:
            absent.add(c)
        else:
            within.add(c)
    return CategoryPartition(frozenset(absent), frozenset(within), frozenset(beyond))


def labels_tensor(annotations: Sequence[CountAnnotation]) -> torch.Tensor:
    """Stack labels into an (N, C) long tensor (``BEYOND`` kept as -1)."""
    return torch.tensor([a.counts for a in annotations], dtype=torch.long)


@dataclass
class LossReport:
    class_loss: float = 0.0
    sp_plus: float = 0.0
    sp_minus: float = 0.0
    mse: float = 0.0
    rank: float = 0.0
    lambda_rank: float = 0.1
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.class_loss + (self.sp_plus + self.sp_minus) + (
            self.mse + self.lambda_rank * self.rank
        )

    TERMS = ("class_loss", "sp_plus", "sp_minus", "mse", "rank", "total")

    def as_row(self) -> list[float]:
        return [getattr(self, k) for k in self.TERMS]
