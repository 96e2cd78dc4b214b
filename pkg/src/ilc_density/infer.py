"""Count prediction and density-map dumps.

Density dump (binary, little-endian)::

    magic   4 bytes  b"ILCD"
    version uint32   DUMP_VERSION
    C, H, W uint32 x 3
    payload C*H*W float32, row-major per category

Prediction dump (CSV): ``image_id,category,score,raw_sum,count``.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .network import CountingNet
from .peaks import class_confidence, extract_peaks

MAGIC = b"ILCD"
DUMP_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
PREDICTION_COLUMNS = ("image_id", "category", "score", "raw_sum", "count")


def counts_from(scores, sums) -> np.ndarray:
    """Presence-gated, rounded (half away from zero) and clamped counts."""
    scores = np.asarray(scores, dtype=np.float64)
    sums = np.asarray(sums, dtype=np.float64)
    rounded = np.sign(sums) * np.floor(np.abs(sums) + 0.5)
    return np.where(scores > 0, np.maximum(rounded, 0), 0).astype(np.int64)


@dataclass
class Prediction:
    counts: np.ndarray  # (N, C) int
    density: np.ndarray  # (N, C, h, w) float32
    scores: np.ndarray  # (N, C)
    category_maps: np.ndarray  # (N, C, h, w) float32

    @property
    def raw_sums(self) -> np.ndarray:
        return self.density.astype(np.float64).sum(axis=(-2, -1))


@torch.no_grad()
def predict(images, model: CountingNet, batch_size: int = 64) -> Prediction:
    """Run the network in inference mode on (N, 3, H, W) images."""
    images = torch.as_tensor(images, dtype=torch.float32)
    if images.dim() == 3:
        images = images[None]
    was_training = model.training
    model.eval()
    cats, dens, scores = [], [], []
    try:
        for i in range(0, len(images), batch_size):
            m, d = model(images[i:i + batch_size])
            cats.append(m)
            dens.append(d)
            scores.append(class_confidence(extract_peaks(m, model.config.peak_radius)))
    finally:
        model.train(was_training)
    c = model.config.num_categories
    if not cats:
        empty = np.zeros((0, c, 0, 0), np.float32)
        return Prediction(np.zeros((0, c), np.int64), empty, np.zeros((0, c)), empty)
    density = torch.cat(dens).numpy()
    s = torch.cat(scores).double().numpy()
    pred = Prediction(None, density, s, torch.cat(cats).numpy())
    pred.counts = counts_from(s, pred.raw_sums)
    return pred


def write_predictions(path, image_ids: Sequence[str], categories: Sequence[str],
                      pred: Prediction) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    sums = pred.raw_sums
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(PREDICTION_COLUMNS)
        for i, image_id in enumerate(image_ids):
            for c, name in enumerate(categories):
                w.writerow([image_id, name, repr(float(pred.scores[i, c])),
                            repr(float(sums[i, c])), int(pred.counts[i, c])])


def read_predictions(path, categories: Sequence[str]):
    """Returns ``(image_ids, counts, scores, raw_sums)`` with (N, C) arrays."""
    rows: dict[str, dict] = {}
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            per = rows.setdefault(rec["image_id"], {})
            c = categories.index(rec["category"])
            per[c] = (int(rec["count"]), float(rec["score"]), float(rec["raw_sum"]))
    ids = list(rows)
    shape = (len(ids), len(categories))
    counts, scores, sums = np.zeros(shape, np.int64), np.zeros(shape), np.zeros(shape)
    for i, image_id in enumerate(ids):
        for c, (n, s, r) in rows[image_id].items():
            counts[i, c], scores[i, c], sums[i, c] = n, s, r
    return ids, counts, scores, sums


def export_density(maps: np.ndarray, path) -> None:
    """Write a (C, H, W) map stack in the density-dump format."""
    maps = np.asarray(maps)
    if maps.ndim != 3:
        raise ValueError(f"expected (C, H, W) maps, got shape {maps.shape}")
    c, h, w = maps.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, DUMP_VERSION, c, h, w))
        f.write(np.ascontiguousarray(maps, dtype="<f4").tobytes())


def import_density(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated density dump")
    magic, version, c, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a density dump")
    if version != DUMP_VERSION:
        raise ValueError(f"{path}: density dump version {version}, expected {DUMP_VERSION}")
    payload = data[_HEADER.size:]
    if len(payload) != 4 * c * h * w:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {4 * c * h * w}")
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float32)
