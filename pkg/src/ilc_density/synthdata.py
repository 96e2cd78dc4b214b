"""Synthetic shapes dataset and count-annotation files.

Dataset layout written by :func:`generate`::

    images/<image_id>.png      RGB image
    categories.txt             one category name per line (fixes column order)
    annotations.csv            image_id,path,split,<category...>  (raw counts)
    points.csv                 image_id,category,instance,x,y     (instance centres, pixels)
    masks.jsonl                per-instance masks, mask-archive format
    manifest.json              config, categories and split membership

Only :func:`ingest_counts` feeds the trainer, and it clamps counts to
supervision labels on the way in.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from .datamodel import T_TILDE, CountAnnotation
from .segscore import read_mask_archive, write_mask_archive

SHAPES = ("disc", "square", "triangle")


class AnnotationError(ValueError):
    pass


@dataclass
class SynthConfig:
    num_images: int = 200
    image_size: int = 80
    categories: tuple[str, ...] = SHAPES
    max_count: int = 8
    # weights over counts 0..max_count; None -> P(0)=zero_prob, rest uniform
    count_distribution: Optional[tuple[float, ...]] = None
    zero_prob: float = 0.4
    radius_range: tuple[int, int] = (4, 6)
    occlusion_rate: float = 0.1
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.num_images < 1:
            errors.append("num_images must be >= 1")
        if self.image_size < 8:
            errors.append("image_size must be >= 8")
        if not self.categories:
            errors.append("at least one category is required")
        unknown = [c for c in self.categories if c not in SHAPES]
        if unknown:
            errors.append(f"unknown shape categories {unknown}; choose from {SHAPES}")
        lo, hi = self.radius_range
        if not 1 <= lo <= hi:
            errors.append("radius_range must satisfy 1 <= lo <= hi")
        if 2 * hi + 2 > self.image_size:
            errors.append(f"shapes of radius {hi} do not fit in a {self.image_size}px image")
        if self.max_count < 0:
            errors.append("max_count must be >= 0")
        if not 0 <= self.occlusion_rate < 1:
            errors.append("occlusion_rate must be in [0, 1)")
        if not 0 <= self.test_fraction < 1:
            errors.append("test_fraction must be in [0, 1)")
        if self.count_distribution is not None:
            w = np.asarray(self.count_distribution, dtype=float)
            if len(w) > self.max_count + 1 or (w < 0).any() or w.sum() <= 0:
                errors.append("count_distribution must be non-negative weights over 0..max_count")
        return errors

    def count_weights(self) -> np.ndarray:
        if self.count_distribution is not None:
            w = np.zeros(self.max_count + 1)
            w[: len(self.count_distribution)] = self.count_distribution
        elif self.max_count == 0:
            w = np.ones(1)
        else:
            w = np.full(self.max_count + 1, (1 - self.zero_prob) / self.max_count)
            w[0] = self.zero_prob
        return w / w.sum()


@dataclass
class Instance:
    category: int
    center: tuple[float, float]  # (x, y) pixels
    radius: float
    mask: np.ndarray = field(repr=False)


def _shape_polygon(kind: str, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    if kind == "square":
        pts = [(math.cos(angle + k * math.pi / 2), math.sin(angle + k * math.pi / 2)) for k in range(4)]
        scale = r * 1.0
    else:
        pts = [(math.cos(angle + k * 2 * math.pi / 3), math.sin(angle + k * 2 * math.pi / 3)) for k in range(3)]
        scale = r * 1.15
    return np.array([(cx + scale * x, cy + scale * y) for x, y in pts])


def _render_shape(img, mask, kind, cx, cy, r, angle, color):
    # 4 fractional bits keep sub-pixel placement deterministic
    shift = 4
    if kind == "disc":
        c = (int(round(cx * 16)), int(round(cy * 16)))
        rad = int(round(r * 16))
        cv2.circle(img, c, rad, color, -1, cv2.LINE_8, shift)
        cv2.circle(mask, c, rad, 1, -1, cv2.LINE_8, shift)
    else:
        poly = np.round(_shape_polygon(kind, cx, cy, r, angle) * 16).astype(np.int32)
        cv2.fillPoly(img, [poly], color, cv2.LINE_8, shift)
        cv2.fillPoly(mask, [poly], 1, cv2.LINE_8, shift)


def _place(rng, counts, cfg: SynthConfig, max_tries=400):
    lo, hi = cfg.radius_range
    placed = []
    for cat, n in enumerate(counts):
        for _ in range(n):
            for _ in range(max_tries):
                r = rng.uniform(lo, hi)
                x = rng.uniform(r, cfg.image_size - r)
                y = rng.uniform(r, cfg.image_size - r)
                if all(math.hypot(x - px, y - py) >= (r + pr) * (1 - cfg.occlusion_rate)
                       for _, px, py, pr in placed):
                    placed.append((cat, x, y, r))
                    break
            else:
                return None
    return placed


def render_image(counts: Sequence[int], cfg: SynthConfig, rng: np.random.Generator):
    """Render one image with the requested per-category counts.

    Returns the RGB uint8 image and the list of instances (amodal masks).
    """
    for _ in range(50):
        placed = _place(rng, counts, cfg)
        if placed is not None:
            break
    else:
        raise ValueError(f"could not place {sum(counts)} shapes in a "
                         f"{cfg.image_size}px image; lower max_count or radius")
    s = cfg.image_size
    base = rng.uniform(30, 90, size=3)
    img = np.clip(base + rng.normal(0, 6, size=(s, s, 3)), 0, 255).astype(np.uint8)
    order = rng.permutation(len(placed))
    instances = []
    for k in order:
        cat, x, y, r = placed[k]
        color = tuple(int(v) for v in rng.uniform(140, 255, size=3))
        mask = np.zeros((s, s), np.uint8)
        _render_shape(img, mask, cfg.categories[cat], x, y, r, rng.uniform(0, 2 * math.pi), color)
        instances.append(Instance(cat, (x, y), r, mask.astype(bool)))
    instances.sort(key=lambda inst: (inst.category, inst.center[1], inst.center[0]))
    return img, instances


def generate(out_dir, cfg: SynthConfig) -> dict:
    """Write a full synthetic dataset under ``out_dir``; returns the manifest."""
    errors = cfg.validate()
    if errors:
        raise ValueError("; ".join(errors))
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    weights = cfg.count_weights()
    n_test = int(round(cfg.num_images * cfg.test_fraction))
    n_train = cfg.num_images - n_test
    rows, points, masks = [], [], []
    splits = {"train": [], "test": []}
    for idx in range(cfg.num_images):
        rng = np.random.default_rng([cfg.seed, idx])
        counts = [int(c) for c in rng.choice(len(weights), size=len(cfg.categories), p=weights)]
        img, instances = render_image(counts, cfg, rng)
        image_id = f"img{idx:05d}"
        split = "train" if idx < n_train else "test"
        rel = f"images/{image_id}.png"
        cv2.imwrite(str(out / rel), img[:, :, ::-1])
        rows.append([image_id, rel, split, *counts])
        splits[split].append(image_id)
        per_cat = [0] * len(cfg.categories)
        for inst in instances:
            k = per_cat[inst.category]
            per_cat[inst.category] += 1
            name = cfg.categories[inst.category]
            points.append([image_id, name, k, f"{inst.center[0]:.3f}", f"{inst.center[1]:.3f}"])
            masks.append({"image_id": image_id, "id": f"{image_id}/{name}/{k}",
                          "category": name, "mask": inst.mask})
    (out / "categories.txt").write_text("".join(f"{c}\n" for c in cfg.categories))
    with open(out / "annotations.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "path", "split", *cfg.categories])
        w.writerows(rows)
    with open(out / "points.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "category", "instance", "x", "y"])
        w.writerows(points)
    write_mask_archive(out / "masks.jsonl", masks)
    cfg_dict = asdict(cfg)
    manifest = {
        "num_images": cfg.num_images,
        "image_size": cfg.image_size,
        "categories": list(cfg.categories),
        "splits": splits,
        "config": cfg_dict,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


# -- reading ---------------------------------------------------------------

def read_categories(path) -> list[str]:
    names = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(set(names)) != len(names):
        raise AnnotationError(f"{path}: duplicate category names")
    return names


@dataclass(frozen=True)
class AnnotationRecord:
    annotation: CountAnnotation
    path: str
    split: str


def _read_rows(annotation_file, categories: Sequence[str]):
    path = Path(annotation_file)
    problems, rows, seen = [], [], {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise AnnotationError(f"{path}: empty annotation file") from None
        fixed = ["image_id", "path", "split"]
        if header[:3] != fixed:
            raise AnnotationError(f"{path}:1: header must start with {','.join(fixed)}")
        cols = header[3:]
        unknown = [c for c in cols if c not in categories]
        if unknown:
            raise AnnotationError(f"{path}:1: unknown categories {unknown}")
        missing = [c for c in categories if c not in cols]
        if missing:
            raise AnnotationError(f"{path}:1: missing categories {missing}")
        order = [cols.index(c) for c in categories]
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                problems.append(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
                continue
            image_id = row[0]
            try:
                raw = [int(row[3 + j]) for j in order]
                if any(c < 0 for c in raw):
                    raise ValueError
            except ValueError:
                problems.append(f"line {lineno}: counts must be non-negative integers")
                continue
            if image_id in seen:
                problems.append(f"line {lineno}: duplicate image id {image_id!r} "
                                f"(first on line {seen[image_id]})")
                continue
            seen[image_id] = lineno
            rows.append((image_id, row[1], row[2], raw))
    if problems:
        raise AnnotationError(f"{path}: " + "; ".join(problems))
    return rows


def ingest_counts(annotation_file, categories: Sequence[str],
                  t_tilde: int = T_TILDE) -> list[AnnotationRecord]:
    """Parse an annotation file into clamped supervision labels."""
    return [AnnotationRecord(CountAnnotation.from_raw(i, raw, t_tilde), p, s)
            for i, p, s, raw in _read_rows(annotation_file, categories)]


def read_raw_counts(annotation_file, categories: Sequence[str]) -> dict[str, list[int]]:
    """Unclamped counts, for evaluation only."""
    return {i: raw for i, _, _, raw in _read_rows(annotation_file, categories)}


def read_points(path, categories: Sequence[str]) -> dict[str, list[list[tuple[float, float]]]]:
    """image_id -> per-category list of (x, y) centres in image pixels."""
    out: dict[str, list[list[tuple[float, float]]]] = {}
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            per = out.setdefault(rec["image_id"], [[] for _ in categories])
            per[categories.index(rec["category"])].append((float(rec["x"]), float(rec["y"])))
    return out


class SynthDataset:
    """In-memory view of a dataset directory (images as float CHW in [0, 1])."""

    def __init__(self, root, split: Optional[str] = None):
        self.root = Path(root)
        self.categories = read_categories(self.root / "categories.txt")
        records = ingest_counts(self.root / "annotations.csv", self.categories)
        if split is not None:
            records = [r for r in records if r.split == split]
        self.records = records

    def __len__(self):
        return len(self.records)

    @property
    def annotations(self) -> list[CountAnnotation]:
        return [r.annotation for r in self.records]

    @property
    def image_ids(self) -> list[str]:
        return [r.annotation.image_id for r in self.records]

    def load_images(self) -> np.ndarray:
        imgs = [load_image(self.root / r.path) for r in self.records]
        if not imgs:
            return np.zeros((0, 3, 1, 1), np.float32)
        return np.stack(imgs)

    def raw_counts(self) -> np.ndarray:
        raw = read_raw_counts(self.root / "annotations.csv", self.categories)
        return np.array([raw[i] for i in self.image_ids], dtype=np.int64).reshape(len(self), -1)

    def points(self):
        pts = read_points(self.root / "points.csv", self.categories)
        empty = [[] for _ in self.categories]
        return [pts.get(i, empty) for i in self.image_ids]

    def instance_masks(self):
        return read_mask_archive(self.root / "masks.jsonl")


def load_image(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return np.ascontiguousarray(img[:, :, ::-1].transpose(2, 0, 1), dtype=np.float32) / 255.0


def synth_proposals(instance_records: Sequence[dict], dilate: int = 1) -> list[dict]:
    """Candidate proposals for desk testing built from ground-truth masks:
    every instance, a dilated copy, and the union of every same-category pair
    whose masks touch after dilation (the merged-neighbours failure case)."""
    kernel = np.ones((2 * dilate + 1, 2 * dilate + 1), np.uint8)
    by_img: dict[str, list[dict]] = {}
    for rec in instance_records:
        by_img.setdefault(rec["image_id"], []).append(rec)
    out = []
    for image_id in sorted(by_img):
        recs = by_img[image_id]
        n = 0

        def add(mask):
            nonlocal n
            out.append({"image_id": image_id, "id": f"{image_id}/p{n}", "mask": mask})
            n += 1

        grown = [cv2.dilate(r["mask"].astype(np.uint8), kernel).astype(bool) for r in recs]
        for rec, g in zip(recs, grown):
            add(rec["mask"])
            add(g)
        for i in range(len(recs)):
            for j in range(i + 1, len(recs)):
                if recs[i].get("category") == recs[j].get("category") and (grown[i] & grown[j]).any():
                    add(recs[i]["mask"] | recs[j]["mask"])
    return out
