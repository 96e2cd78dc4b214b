"""Command-line entry point.

Commands: gen-synth, train, predict, evaluate, score-masks.

Settings come from three places, later ones winning: built-in defaults, the
YAML file given with ``--config`` (one section per command, e.g.
``train: {head_lr: 0.001}``, plus an optional top-level ``seed``), and
command-line flags.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import metrics as M
from .datamodel import T_TILDE
from .infer import export_density, import_density, predict, read_predictions, write_predictions
from .network import HeadConfig
from .segscore import (PeakEvidence, Proposal, ScoreWeights, background_mask,
                       fallback_response_map, read_mask_archive, select_masks, top_peaks,
                       write_mask_archive)
from .synthdata import SHAPES, SynthConfig, SynthDataset, generate, load_image, read_categories
from .train import (LOG_COLUMNS, Checkpoint, NonFiniteLossError, TrainConfig, TrainingSet,
                    initial_checkpoint, train_stage1, train_stage2)

log = logging.getLogger("ilc_density")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
HEAD_KEYS = ("backbone", "channel_factor", "peak_radius")
METRICS = ("mrmse", "game", "abo", "map")
DENSITY_SUFFIX, CATEGORY_SUFFIX = ".density.bin", ".category.bin"
BREAKDOWN_COLUMNS = ("image_id", "category", "peak_row", "peak_col", "proposal_id",
                     "response", "contour", "background", "density_penalty", "total")


class UsageError(Exception):
    """Bad flags, config or input files; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config ----------------------------------------------------------------

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except yaml.YAMLError as e:
        raise UsageError(f"config file {path}: {e}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path}: top level must be a mapping")
    return data


def _section(args, name: str) -> dict:
    """Config section for ``name`` with the top-level seed folded in."""
    cfg = _load_config(args.config)
    unknown = [k for k in cfg if k not in ("seed", *COMMANDS)]
    if unknown:
        raise UsageError(f"unknown config sections {unknown}")
    sec = dict(cfg.get(name) or {})
    if "seed" in cfg and "seed" not in sec:
        sec["seed"] = cfg["seed"]
    return sec


def _override(section: dict, args, mapping: dict) -> dict:
    """Apply non-None flags on top of the config section."""
    out = dict(section)
    for flag, key in mapping.items():
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    return out


def _seed_all(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


# -- gen-synth ------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    sec = _override(_section(args, "gen-synth"), args, {
        "images": "num_images", "size": "image_size", "max_count": "max_count",
        "zero_prob": "zero_prob", "occlusion": "occlusion_rate",
        "test_fraction": "test_fraction", "seed": "seed"})
    if args.categories is not None:
        sec["categories"] = [c.strip() for c in args.categories.split(",") if c.strip()]
    known = {f.name for f in fields(SynthConfig)}
    errors = [f"unknown gen-synth key {k!r}" for k in sec if k not in known]
    kw = {k: v for k, v in sec.items() if k in known}
    for k in ("categories", "radius_range", "count_distribution"):
        if kw.get(k) is not None:
            kw[k] = tuple(kw[k])
    cfg = SynthConfig(**kw)
    errors += cfg.validate()
    if errors:
        raise UsageError("\n".join(errors))
    manifest = generate(args.out, cfg)
    ds = SynthDataset(args.out)
    raw = ds.raw_counts()
    print(f"wrote {manifest['num_images']} images to {args.out} "
          f"(train {len(manifest['splits']['train'])}, test {len(manifest['splits']['test'])})")
    for c, name in enumerate(ds.categories):
        col = raw[:, c]
        print(f"  {name}: present in {int((col > 0).sum())} images, "
              f"{int((col >= T_TILDE).sum())} beyond subitizing, {int(col.sum())} instances")
    return EXIT_OK


# -- train ---------------------------------------------------------------

def _train_settings(args) -> tuple[TrainConfig, dict]:
    sec = _override(_section(args, "train"), args, {
        "seed": "seed", "stage1_epochs": "stage1_epochs", "stage2_epochs": "stage2_epochs",
        "batch_size": "batch_size", "head_lr": "head_lr", "backbone_lr": "backbone_lr",
        "optimizer": "optimizer", "lambda_rank": "lambda_rank", "backbone": "backbone"})
    if args.no_spatial:
        sec["use_spatial"] = False
    head = {k: sec.pop(k) for k in HEAD_KEYS if k in sec}
    cfg, errors = TrainConfig.from_dict(sec)
    if head.get("backbone", "tiny") not in ("tiny", "tiny-fine", "resnet18", "resnet34", "resnet50", "resnet101"):
        errors.append(f"unknown backbone {head['backbone']!r}")
    if errors:
        raise UsageError("\n".join(errors))
    return cfg, head


def cmd_train(args) -> int:
    cfg, head_kw = _train_settings(args)
    data_dir = Path(args.data)
    if not (data_dir / "annotations.csv").exists():
        raise UsageError(f"{data_dir} is not a dataset directory (no annotations.csv)")
    ds = SynthDataset(data_dir, args.split)
    if len(ds) == 0:
        raise UsageError(f"no images in split {args.split!r}")
    data = TrainingSet.from_dataset(ds)
    c = len(ds.categories)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.csv"
    resume = args.resume
    if args.stage == "2" and resume is None:
        if not (out / "stage1.pt").exists():
            raise UsageError("stage 2 needs --resume or a stage1.pt in the output directory")
        resume = out / "stage1.pt"
    if resume is not None:
        if not Path(resume).exists():
            raise UsageError(f"checkpoint {resume} not found")
        start = Checkpoint.load(resume, c)
        log.info("resuming from %s at step %d", resume, start.step)
    else:
        try:
            head = HeadConfig(c, **head_kw)
        except (TypeError, ValueError) as e:
            raise UsageError(str(e)) from None
        start = initial_checkpoint(c, cfg, head)
        if log_path.exists():
            log_path.unlink()
    _seed_all(cfg.seed)
    ckpt = start
    if args.stage in ("1", "all"):
        ckpt = train_stage1(data, cfg, ckpt, log_path)
        ckpt.save(out / "stage1.pt")
        print(f"stage 1 done at step {ckpt.step}: {out / 'stage1.pt'}")
    if args.stage in ("2", "all"):
        ckpt = train_stage2(ckpt, data, cfg, log_path)
        ckpt.save(out / "stage2.pt")
        print(f"stage 2 done at step {ckpt.step}: {out / 'stage2.pt'}")
    if ckpt.diagnostics.get("fallback_masks"):
        print(f"pseudo masks with fewer peaks than labelled count: {ckpt.diagnostics['fallback_masks']}")
    (out / "train_config.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True) + "\n")
    return EXIT_OK


# -- predict -------------------------------------------------------------

def _image_list(args) -> tuple[list[str], list[Path], list[str]]:
    """(image ids, image paths, category names)."""
    if args.data is not None:
        ds = SynthDataset(args.data, args.split)
        return ds.image_ids, [ds.root / r.path for r in ds.records], ds.categories
    lst = Path(args.images)
    if not lst.exists():
        raise UsageError(f"image list {lst} not found")
    paths = [Path(ln.strip()) for ln in lst.read_text().splitlines() if ln.strip()]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise UsageError("missing images: " + ", ".join(missing))
    return [p.stem for p in paths], paths, []


def cmd_predict(args) -> int:
    sec = _override(_section(args, "predict"), args, {"seed": "seed", "batch_size": "batch_size"})
    _seed_all(int(sec.get("seed", 0)))
    if (args.data is None) == (args.images is None):
        raise UsageError("give exactly one of --data or --images")
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint {args.checkpoint} not found")
    ids, paths, cats = _image_list(args)
    ckpt = Checkpoint.load(args.checkpoint)
    if args.categories is not None:
        cats = read_categories(args.categories)
    c = ckpt.model.config.num_categories
    if not cats:
        cats = list(SHAPES[:c]) if c <= len(SHAPES) else [f"c{k}" for k in range(c)]
    if len(cats) != c:
        raise UsageError(f"checkpoint has {c} categories, dataset has {len(cats)}")
    if len(set(ids)) != len(ids):
        raise UsageError("duplicate image ids in the image list")
    images = [load_image(p) for p in paths]
    if len({im.shape for im in images}) > 1:
        raise UsageError("images differ in size; predict them in separate runs")
    x = np.stack(images) if images else np.zeros((0, 3, 8, 8), np.float32)
    pred = predict(torch.from_numpy(x), ckpt.model, batch_size=int(sec.get("batch_size", 64)))
    write_predictions(args.out, ids, cats, pred)
    if args.export_density is not None:
        d = Path(args.export_density)
        for i, image_id in enumerate(ids):
            export_density(pred.density[i], d / f"{image_id}{DENSITY_SUFFIX}")
            export_density(pred.category_maps[i], d / f"{image_id}{CATEGORY_SUFFIX}")
    print(f"predicted {len(ids)} images x {c} categories -> {args.out}")
    return EXIT_OK


# -- evaluate ------------------------------------------------------------

def _plot_density(image_path, density, names, image_id, out_dir: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    img = load_image(image_path).transpose(1, 2, 0)
    written = []
    for c, name in enumerate(names):
        fig, (a, b) = plt.subplots(1, 2, figsize=(6, 3))
        a.imshow(img)
        a.set_title(image_id)
        im = b.imshow(density[c], cmap="jet")
        b.set_title(f"{name}: sum {density[c].sum():.2f}")
        for ax in (a, b):
            ax.axis("off")
        fig.colorbar(im, ax=b, fraction=0.046)
        fig.tight_layout()
        path = out_dir / f"density_{image_id}_{name}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


def rmse_by_count(pred: np.ndarray, gt: np.ndarray) -> dict[int, np.ndarray]:
    """Ground-truth count -> per-category RMSE over images with that count (NaN if none)."""
    out = {}
    for k in range(int(gt.max()) + 1 if gt.size else 0):
        sel = gt == k
        with np.errstate(invalid="ignore"):
            out[k] = np.sqrt(np.where(sel, (pred - gt) ** 2, 0).sum(0) / sel.sum(0))
    return out


def _plot_rmse_by_count(table: dict, names, out_dir: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = sorted(table)
    csv_path = out_dir / "rmse_by_count.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["count", *names, "mean"])
        for k in ks:
            row = table[k]
            mean = float(np.nanmean(row)) if np.isfinite(row).any() else float("nan")
            w.writerow([k, *map(repr, map(float, row)), repr(mean)])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for c, name in enumerate(names):
        ax.plot(ks, [table[k][c] for k in ks], marker="o", label=name)
    ax.axvspan(T_TILDE - 0.5, max(ks + [T_TILDE]) + 0.5, color="0.9", label="beyond subitizing")
    ax.set_xlabel("ground-truth count")
    ax.set_ylabel("RMSE")
    ax.legend(fontsize=8)
    fig.tight_layout()
    png = out_dir / "rmse_by_count.png"
    fig.savefig(png, dpi=100)
    plt.close(fig)
    return [png, csv_path]


def cmd_evaluate(args) -> int:
    sec = _override(_section(args, "evaluate"), args, {"seed": "seed", "metrics": "metrics"})
    _seed_all(int(sec.get("seed", 0)))
    wanted = sec.get("metrics", "mrmse")
    wanted = [m.strip() for m in (wanted.split(",") if isinstance(wanted, str) else wanted) if m.strip()]
    errors = [f"unknown metric {m!r}; choose from {', '.join(METRICS)}" for m in wanted if m not in METRICS]
    plots = args.plot or []
    if "game" in wanted and args.density_dir is None:
        errors.append("game needs --density-dir")
    if {"abo", "map"} & set(wanted) and args.masks is None:
        errors.append("abo/map need --masks")
    if "density" in plots and (args.image is None or args.density_dir is None):
        errors.append("--plot density needs --image and --density-dir")
    if not Path(args.predictions).exists():
        errors.append(f"predictions file {args.predictions} not found")
    if errors:
        raise UsageError("\n".join(errors))

    ds = SynthDataset(args.data)
    names = ds.categories
    ids, counts, scores, _ = read_predictions(args.predictions, names)
    index = {i: k for k, i in enumerate(ds.image_ids)}
    unknown = [i for i in ids if i not in index]
    if unknown:
        raise UsageError(f"predictions for images not in the dataset: {unknown[:5]}")
    gt = ds.raw_counts()[[index[i] for i in ids]] if ids else np.zeros((0, len(names)), np.int64)
    rows = []
    if "mrmse" in wanted:
        for v in M.RMSE_VARIANTS:
            m = M.rmse_family(counts, gt, v)
            rows.append(("rmse", v, names, m))
            print(f"m{v}: {m.mean:.4f}")
    if "game" in wanted:
        dens, pts_all = [], ds.points()
        for k, image_id in enumerate(ids):
            d = import_density(Path(args.density_dir) / f"{image_id}{DENSITY_SUFFIX}")
            dens.append(d * (scores[k] > 0)[:, None, None])  # gated-off categories count 0
        scale = load_image(ds.root / ds.records[0].path).shape[-1] / dens[0].shape[-1] if dens else 1.0
        pts = [pts_all[index[i]] for i in ids]
        for level in range(4):
            m = M.game(np.stack(dens), pts, level, scale)
            rows.append(("game", f"game{level}", names, m))
            print(f"GAME({level}): {m.mean:.4f}")
    if {"abo", "map"} & set(wanted):
        keep = set(ids)
        gt_masks = [M.MaskRecord(r["image_id"], names.index(r["category"]), r["mask"])
                    for r in ds.instance_masks() if r["image_id"] in keep]
        pred_masks = [M.MaskRecord(r["image_id"], names.index(r["category"]), r["mask"],
                                   float(r.get("score", 0.0)))
                      for r in read_mask_archive(args.masks)]
        present = [names[c] for c in sorted({g.category for g in gt_masks})]
        if "abo" in wanted:
            m = M.abo(pred_masks, gt_masks)
            rows.append(("abo", "abo", present, m))
            print(f"ABO: {m.mean:.4f}")
        if "map" in wanted:
            for thr in (0.25, 0.5, 0.75):
                m = M.map_r(pred_masks, gt_masks, thr)
                rows.append(("map", f"map{int(thr * 100)}", present, m))
                print(f"mAP@{thr}: {m.mean:.4f}")
    M.write_report(args.report, rows)
    plot_dir = Path(args.plot_dir or Path(args.report).parent)
    plot_dir.mkdir(parents=True, exist_ok=True)
    if "density" in plots:
        if args.image not in index:
            raise UsageError(f"image {args.image!r} not in the dataset")
        d = import_density(Path(args.density_dir) / f"{args.image}{DENSITY_SUFFIX}")
        for p in _plot_density(ds.root / ds.records[index[args.image]].path, d, names, args.image, plot_dir):
            print(f"wrote {p}")
    if "rmse-by-count" in plots:
        for p in _plot_rmse_by_count(rmse_by_count(counts, gt), names, plot_dir):
            print(f"wrote {p}")
    print(f"report: {args.report}")
    return EXIT_OK


# -- score-masks ---------------------------------------------------------

def _read_responses(path):
    """R maps from an ``.npz`` keyed ``<image_id>/<category>/<row>/<col>``."""
    if path is None:
        return {}
    if not Path(path).exists():
        raise UsageError(f"response archive {path} not found")
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


def cmd_score_masks(args) -> int:
    sec = _override(_section(args, "score-masks"), args, {
        "seed": "seed", "alpha": "alpha", "beta": "beta", "gamma": "gamma", "quantile": "quantile"})
    _seed_all(int(sec.get("seed", 0)))
    errors = []
    weights = ScoreWeights(*(float(sec.get(k, 1.0)) for k in ("alpha", "beta", "gamma")))
    if not all(np.isfinite([weights.alpha, weights.beta, weights.gamma])):
        errors.append("alpha, beta and gamma must be finite")
    quantile = float(sec.get("quantile", 0.5))
    if not 0 <= quantile <= 1:
        errors.append("quantile must be in [0, 1]")
    if not Path(args.proposals).exists():
        errors.append(f"proposal file {args.proposals} not found")
    if not Path(args.predictions).exists():
        errors.append(f"predictions file {args.predictions} not found")
    if errors:
        raise UsageError("\n".join(errors))
    names = read_categories(args.categories) if args.categories else list(SHAPES)
    ids, counts, _, _ = read_predictions(args.predictions, names)
    try:
        proposals = read_mask_archive(args.proposals)
    except ValueError as e:
        raise UsageError(str(e)) from None
    by_image: dict[str, list[dict]] = {}
    for rec in proposals:
        by_image.setdefault(rec["image_id"], []).append(rec)
    responses = _read_responses(args.responses)

    out_masks, breakdown_rows, unmatched = [], [], 0
    for k, image_id in enumerate(ids):
        dens_path = Path(args.density_dir) / f"{image_id}{DENSITY_SUFFIX}"
        cat_path = Path(args.density_dir) / f"{image_id}{CATEGORY_SUFFIX}"
        if not dens_path.exists() or not cat_path.exists():
            raise UsageError(f"missing density or category dump for {image_id} in {args.density_dir}")
        density, cat_maps = import_density(dens_path), import_density(cat_path)
        backgrounds = np.stack([background_mask(m, quantile) for m in cat_maps])
        recs = by_image.get(image_id, [])
        props = [Proposal(r["mask"], id=r["id"]) for r in recs]
        peaks = []
        for c in range(len(names)):
            for loc in top_peaks(cat_maps[c], int(counts[k, c]), radius=1):
                key = f"{image_id}/{names[c]}/{loc[0]}/{loc[1]}"
                r = responses.get(key)
                if r is None:
                    r = fallback_response_map(cat_maps[c], loc)
                peaks.append(PeakEvidence(loc, r, c))
        for sel in select_masks(peaks, props, density, backgrounds, weights):
            pk = sel.peak
            if not sel.matched:
                unmatched += 1
                continue
            rec = recs[sel.proposal_index]
            sb = sel.score
            out_masks.append({"image_id": image_id, "id": f"{image_id}/{names[pk.category]}/{len(out_masks)}",
                              "category": names[pk.category], "score": sb.total,
                              "proposal": rec["id"], "peak": list(pk.location), "mask": rec["mask"]})
            breakdown_rows.append([image_id, names[pk.category], pk.location[0], pk.location[1], rec["id"],
                                   *(repr(float(v)) for v in (sb.response, sb.contour, sb.background,
                                                               sb.density_penalty, sb.total))])
    write_mask_archive(args.out, out_masks)
    breakdown = Path(args.breakdown or Path(args.out).with_suffix(".scores.csv"))
    with open(breakdown, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(BREAKDOWN_COLUMNS)
        w.writerows(breakdown_rows)
    dup = len(out_masks) - len({(m["image_id"], m["proposal"]) for m in out_masks})
    print(f"selected {len(out_masks)} masks ({unmatched} peaks unmatched, {dup} duplicate proposals) "
          f"-> {args.out}; scores -> {breakdown}")
    return EXIT_OK


# -- parser --------------------------------------------------------------

COMMANDS = {"gen-synth": cmd_gen_synth, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "score-masks": cmd_score_masks}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ilc-density", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML config file (section per command)")
        sp.add_argument("--seed", type=int, help="random seed (default 0)")

    g = sub.add_parser("gen-synth", help="generate a synthetic shapes dataset",
                       description="Writes images/, annotations.csv, points.csv, masks.jsonl, "
                                   "categories.txt and manifest.json (see ilc_density.synthdata).")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--images", type=int)
    g.add_argument("--size", type=int, help="image side in pixels")
    g.add_argument("--categories", help="comma-separated subset of " + ",".join(SHAPES))
    g.add_argument("--max-count", type=int)
    g.add_argument("--zero-prob", type=float)
    g.add_argument("--occlusion", type=float)
    g.add_argument("--test-fraction", type=float)

    t = sub.add_parser("train", help="train stage 1, stage 2 or both",
                       description="Writes stage1.pt / stage2.pt checkpoints and loss_log.csv "
                                   "(columns: " + ",".join(LOG_COLUMNS) + ") into --out.")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--split", default="train")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--stage", choices=["1", "2", "all"], default="all")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stage1-epochs", type=int)
    t.add_argument("--stage2-epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--head-lr", type=float)
    t.add_argument("--backbone-lr", type=float)
    t.add_argument("--optimizer", choices=["sgd", "adam"])
    t.add_argument("--lambda-rank", type=float)
    t.add_argument("--backbone")
    t.add_argument("--no-spatial", action="store_true", help="drop the spatial loss terms")

    pr = sub.add_parser("predict", help="predict counts (and optionally dump maps)",
                        description="Writes a CSV of image_id,category,score,raw_sum,count. With "
                                    "--export-density also <id>.density.bin and <id>.category.bin "
                                    "(format in ilc_density.infer).")
    common(pr)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", help="dataset directory")
    pr.add_argument("--split", default="test")
    pr.add_argument("--images", help="text file with one image path per line")
    pr.add_argument("--categories", help="categories.txt (defaults to the dataset's)")
    pr.add_argument("--out", required=True)
    pr.add_argument("--export-density", metavar="DIR")
    pr.add_argument("--batch-size", type=int)

    e = sub.add_parser("evaluate", help="compute metrics and figures",
                       description="Report CSV columns: metric,variant,category,value.")
    common(e)
    e.add_argument("--predictions", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metrics", help="comma-separated: " + ",".join(METRICS))
    e.add_argument("--density-dir")
    e.add_argument("--masks", help="mask archive from score-masks")
    e.add_argument("--report", required=True)
    e.add_argument("--plot", action="append", choices=["density", "rmse-by-count"])
    e.add_argument("--image", help="image id for --plot density")
    e.add_argument("--plot-dir")

    s = sub.add_parser("score-masks", help="pick one proposal per peak",
                       description="Writes a mask archive (JSONL, ilc_density.segscore) and a "
                                   "score breakdown CSV: " + ",".join(BREAKDOWN_COLUMNS) + ".")
    common(s)
    s.add_argument("--predictions", required=True)
    s.add_argument("--density-dir", required=True)
    s.add_argument("--proposals", required=True, help="proposal mask archive")
    s.add_argument("--responses", help=".npz of peak response maps")
    s.add_argument("--categories")
    s.add_argument("--out", required=True)
    s.add_argument("--breakdown")
    s.add_argument("--alpha", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--quantile", type=float, help="background quantile of the category map")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, OSError, ValueError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
