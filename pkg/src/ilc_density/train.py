"""Two-stage training.

Stage 1 fits the classifier together with the global count terms; stage 2
adds the spatial terms, with pseudo masks rebuilt every batch from the
current category maps.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .datamodel import BEYOND, T_TILDE, CategoryPartition, CountAnnotation, LossReport, labels_tensor
from .losses import (batch_objective, class_loss, global_mse_loss, rank_loss,
                     spatial_negative_grids, spatial_positive_grids)
from .network import CountingNet, HeadConfig, build_model, load_checkpoint, save_checkpoint
from .peaks import class_confidence, extract_peaks, pseudo_masks

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "stage", "epoch", *LossReport.TERMS, "lambda_rank")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    backbone_lr: float = 1e-4
    head_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    lambda_rank: float = 0.1
    negative_fraction: float = 0.1
    stage1_epochs: int = 10
    stage2_epochs: int = 10
    seed: int = 0
    t_tilde: int = T_TILDE
    use_spatial: bool = True
    flip: bool = False
    lr_step: Optional[int] = None  # epochs between x0.1 decays; None = constant
    grad_clip: Optional[float] = None
    optimizer: str = "sgd"

    def validate(self) -> list[str]:
        errors = []
        for name in ("backbone_lr", "head_lr"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            errors.append("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            errors.append("weight_decay must be >= 0")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.lambda_rank < 0:
            errors.append("lambda_rank must be >= 0")
        if not 0 < self.negative_fraction <= 1:
            errors.append("negative_fraction must be in (0, 1]")
        for name in ("stage1_epochs", "stage2_epochs"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0")
        if self.t_tilde < 2:
            errors.append("t_tilde must be >= 2")
        if self.lr_step is not None and self.lr_step < 1:
            errors.append("lr_step must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            errors.append("optimizer must be 'sgd' or 'adam'")
        if self.grad_clip is not None and self.grad_clip <= 0:
            errors.append("grad_clip must be positive")
        return errors

    @classmethod
    def from_dict(cls, d: dict) -> tuple["TrainConfig", list[str]]:
        known = {f.name: f for f in fields(cls)}
        errors = [f"unknown train key {k!r}" for k in d if k not in known]
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                continue
            default = getattr(cls(), k)
            try:
                if v is None or default is None:
                    kwargs[k] = v
                elif isinstance(default, bool):
                    if not isinstance(v, bool):
                        raise TypeError
                    kwargs[k] = v
                else:
                    kwargs[k] = type(default)(v)
            except (TypeError, ValueError):
                errors.append(f"train key {k!r}: cannot use {v!r}")
        cfg = cls(**kwargs)
        return cfg, errors + cfg.validate()


def sample_negatives(partition: CategoryPartition, fraction: float,
                     rng: np.random.Generator) -> frozenset[int]:
    """Uniform subset of the absent categories of size ceil(fraction * |A|)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    absent = sorted(partition.absent)
    k = math.ceil(fraction * len(absent) - 1e-9)
    if k >= len(absent):
        return frozenset(absent)
    return frozenset(int(i) for i in rng.choice(absent, size=k, replace=False))


@dataclass
class TrainingSet:
    """Images plus clamped labels; the only data a trainer ever sees."""

    images: torch.Tensor  # (N, 3, H, W) float
    annotations: Sequence[CountAnnotation]

    def __post_init__(self):
        self.images = torch.as_tensor(self.images, dtype=torch.float32)
        if not all(isinstance(a, CountAnnotation) for a in self.annotations):
            raise TypeError("training labels must be CountAnnotation instances")
        if len(self.annotations) != len(self.images):
            raise ValueError("images and annotations differ in length")
        self.labels = labels_tensor(self.annotations) if self.annotations else torch.zeros(0, 0, dtype=torch.long)

    def __len__(self):
        return len(self.annotations)

    @classmethod
    def from_dataset(cls, ds) -> "TrainingSet":
        return cls(torch.from_numpy(ds.load_images()), ds.annotations)


@dataclass
class Checkpoint:
    model: CountingNet
    train_config: TrainConfig
    stage: int = 0
    step: int = 0
    optimizer_state: Optional[dict] = None
    diagnostics: dict = field(default_factory=lambda: {"fallback_masks": 0, "empty_peak_maps": 0})

    def save(self, path) -> None:
        save_checkpoint(path, self.model, train_config=asdict(self.train_config),
                        stage=self.stage, step=self.step,
                        optimizer=self.optimizer_state, diagnostics=dict(self.diagnostics))

    @classmethod
    def load(cls, path, num_categories: Optional[int] = None) -> "Checkpoint":
        model, payload = load_checkpoint(path, num_categories)
        tc = TrainConfig(**payload.get("train_config", {}))
        return cls(model, tc, payload.get("stage", 0), payload.get("step", 0),
                   payload.get("optimizer"), dict(payload.get("diagnostics", {})))


def make_optimizer(model: CountingNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    groups = [{"params": list(model.backbone_parameters()), "lr": cfg.backbone_lr},
              {"params": list(model.head_parameters()), "lr": cfg.head_lr}]
    if cfg.optimizer == "adam":
        return torch.optim.Adam(groups, lr=cfg.head_lr, betas=(cfg.momentum, 0.999),
                                weight_decay=cfg.weight_decay)
    return torch.optim.SGD(groups, lr=cfg.head_lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def _partition_from_row(row: torch.Tensor) -> CategoryPartition:
    vals = row.tolist()
    return CategoryPartition(
        frozenset(i for i, v in enumerate(vals) if v == 0),
        frozenset(i for i, v in enumerate(vals) if v > 0),
        frozenset(i for i, v in enumerate(vals) if v == BEYOND),
    )


def compute_batch_loss(model: CountingNet, images: torch.Tensor, labels: torch.Tensor,
                       cfg: TrainConfig, spatial: bool, rng: np.random.Generator,
                       diagnostics: Optional[dict] = None):
    """Forward pass and full objective for one mini-batch.

    Returns ``(total, report, outputs)`` where outputs holds the maps and
    masks (useful for inspecting gradient routing).
    """
    cat_maps, density = model(images)
    radius = model.config.peak_radius
    peaks = extract_peaks(cat_maps, radius)
    scores = class_confidence(peaks)

    absent, within, beyond = labels == 0, labels > 0, labels == BEYOND
    sampled = torch.zeros_like(absent)
    for b in range(labels.shape[0]):
        for c in sample_negatives(_partition_from_row(labels[b]), cfg.negative_fraction, rng):
            sampled[b, c] = True

    counts = density.sum(dim=(-2, -1))
    mse_sel = within | sampled
    terms = dict(
        class_terms=class_loss(scores, ~absent),
        mse_terms=global_mse_loss(counts, labels.clamp(min=0), mse_sel),
        mse_valid=mse_sel.any(dim=-1),
        rank_terms=rank_loss(counts, beyond, cfg.t_tilde),
        rank_valid=beyond.any(dim=-1),
    )
    outputs = {"category_maps": cat_maps, "density": density}
    if spatial:
        pm = pseudo_masks(peaks.detach(), torch.where(within, labels, torch.zeros_like(labels)))
        n_s = within.sum(dim=-1)
        pos = spatial_positive_grids(density, pm.values)
        terms["sp_plus_terms"] = (pos * within).sum(dim=-1) / n_s.clamp(min=1)
        terms["sp_plus_valid"] = n_s > 0
        n_a = sampled.sum(dim=-1)
        neg = spatial_negative_grids(density)
        terms["sp_minus_terms"] = (neg * sampled).sum(dim=-1) / n_a.clamp(min=1)
        terms["sp_minus_valid"] = n_a > 0
        outputs["pseudo_masks"] = pm.values
        if diagnostics is not None:
            diagnostics["fallback_masks"] = diagnostics.get("fallback_masks", 0) + int((pm.fallback & within).sum())
            empty = within & (pm.values.sum(dim=(-2, -1)) == 0)
            diagnostics["empty_peak_maps"] = diagnostics.get("empty_peak_maps", 0) + int(empty.sum())
    total, report = batch_objective(**terms, lambda_rank=cfg.lambda_rank)
    return total, report, outputs


def _fmt(x: float) -> str:
    return repr(float(x))


class _LossLog:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists() or self.path.stat().st_size == 0:
                with open(self.path, "w", newline="") as f:
                    csv.writer(f).writerow(LOG_COLUMNS)

    def write(self, step, stage, epoch, report: LossReport):
        if self.path is None:
            return
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([step, stage, epoch, *map(_fmt, report.as_row()),
                                    _fmt(report.lambda_rank)])


def _run_stage(ckpt: Checkpoint, data: TrainingSet, cfg: TrainConfig, stage: int,
               epochs: int, log_path=None) -> Checkpoint:
    if len(data) == 0:
        raise ValueError("training set is empty")
    if data.labels.shape[1] != ckpt.model.config.num_categories:
        raise ValueError("dataset and model disagree on the number of categories")
    errors = cfg.validate()
    if errors:
        raise ValueError("; ".join(errors))
    model = ckpt.model
    opt = make_optimizer(model, cfg)
    if ckpt.optimizer_state is not None:
        opt.load_state_dict(ckpt.optimizer_state)
        for group, lr in zip(opt.param_groups, (cfg.backbone_lr, cfg.head_lr)):
            group["lr"] = lr
    # rng streams keyed on (seed, stage, starting step) so resumes stay reproducible
    seq = np.random.SeedSequence([cfg.seed, stage, ckpt.step])
    gen = torch.Generator().manual_seed(int(seq.generate_state(1)[0]))
    rng = np.random.default_rng([cfg.seed, stage, ckpt.step])
    spatial = stage == 2 and cfg.use_spatial
    diagnostics = dict(ckpt.diagnostics)
    loss_log = _LossLog(log_path)
    step = ckpt.step
    model.train()
    for epoch in range(epochs):
        if cfg.lr_step and epoch and epoch % cfg.lr_step == 0:
            for group in opt.param_groups:
                group["lr"] *= 0.1
        order = torch.randperm(len(data), generator=gen)
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            x = data.images[idx]
            if cfg.flip:
                flip = torch.rand(len(idx), generator=gen) < 0.5
                x = torch.where(flip[:, None, None, None], x.flip(-1), x)
            total, report, _ = compute_batch_loss(model, x, data.labels[idx], cfg, spatial,
                                                  rng, diagnostics)
            if not math.isfinite(report.total):
                raise NonFiniteLossError(f"non-finite loss at step {step} (stage {stage}): {report}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            step += 1
            loss_log.write(step, stage, epoch, report)
    if diagnostics.get("fallback_masks"):
        log.info("stage %d: %d pseudo masks used the smallest-peak fallback",
                 stage, diagnostics["fallback_masks"])
    return Checkpoint(model, cfg, stage, step, opt.state_dict() if epochs else ckpt.optimizer_state,
                      diagnostics)


def initial_checkpoint(num_categories: int, cfg: TrainConfig,
                       head: Optional[HeadConfig] = None) -> Checkpoint:
    head = head or HeadConfig(num_categories)
    return Checkpoint(build_model(head, seed=cfg.seed), cfg)


def train_stage1(data: TrainingSet, cfg: TrainConfig, start: Optional[Checkpoint] = None,
                 log_path=None) -> Checkpoint:
    """Classification + global count losses only."""
    start = start or initial_checkpoint(data.labels.shape[1], cfg)
    return _run_stage(start, data, cfg, 1, cfg.stage1_epochs, log_path)


def train_stage2(start: Checkpoint, data: TrainingSet, cfg: TrainConfig,
                 log_path=None) -> Checkpoint:
    """Full objective, spatial terms included (unless ablated)."""
    return _run_stage(start, data, cfg, 2, cfg.stage2_epochs, log_path)


def train_all(data: TrainingSet, cfg: TrainConfig, log_path=None,
              head: Optional[HeadConfig] = None) -> tuple[Checkpoint, Checkpoint]:
    s1 = train_stage1(data, cfg, initial_checkpoint(data.labels.shape[1], cfg, head), log_path)
    s1_copy = Checkpoint(_clone(s1.model), cfg, s1.stage, s1.step, s1.optimizer_state, dict(s1.diagnostics))
    s2 = train_stage2(s1, data, cfg, log_path)
    return s1_copy, s2


def _clone(model: CountingNet) -> CountingNet:
    m = CountingNet(model.config)
    m.load_state_dict(model.state_dict())
    return m
