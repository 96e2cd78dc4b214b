import csv
import json

import numpy as np
import pytest

from ilc_density.cli import main
from ilc_density.infer import import_density
from ilc_density.segscore import read_mask_archive, write_mask_archive
from ilc_density.synthdata import SynthDataset, synth_proposals

TINY = "train: {optimizer: adam, backbone_lr: 0.001, head_lr: 0.001, stage1_epochs: 1, stage2_epochs: 1, batch_size: 8}\n"


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synth", "--out", str(root / "ds"), "--images", "24", "--size", "48", "--seed", "7"]) == 0
    (root / "tiny.yaml").write_text(TINY)
    assert main(["train", "--config", str(root / "tiny.yaml"), "--data", str(root / "ds"),
                 "--out", str(root / "run"), "--stage", "all"]) == 0
    assert main(["predict", "--checkpoint", str(root / "run" / "stage2.pt"), "--data", str(root / "ds"),
                 "--out", str(root / "pred.csv"), "--export-density", str(root / "dumps")]) == 0
    return root


def test_gen_synth_manifest(tmp_path):
    out = tmp_path / "new" / "ds"
    assert main(["gen-synth", "--out", str(out), "--images", "200", "--size", "64", "--seed", "7"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["num_images"] == 200 and len(man["splits"]["train"]) + len(man["splits"]["test"]) == 200


def test_gen_synth_invalid_size(tmp_path, capsys):
    assert main(["gen-synth", "--out", str(tmp_path), "--size", "4"]) == 1
    assert "image_size" in capsys.readouterr().err


def test_bad_flag_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["train", "--nope"])
    assert e.value.code == 1


def test_train_outputs(work):
    assert (work / "run" / "stage1.pt").exists() and (work / "run" / "stage2.pt").exists()
    rows = list(csv.reader(open(work / "run" / "loss_log.csv")))
    assert rows[0][:3] == ["step", "stage", "epoch"] and {r[1] for r in rows[1:]} == {"1", "2"}


def test_config_errors_listed(work, capsys):
    bad = work / "bad.yaml"
    bad.write_text("train: {head_lr: -1, batch_size: 0, colour: red}\n")
    assert main(["train", "--config", str(bad), "--data", str(work / "ds"), "--out", str(work / "x")]) == 1
    err = capsys.readouterr().err
    assert "head_lr" in err and "batch_size" in err and "colour" in err


def test_flags_override_config(work):
    out = work / "override"
    assert main(["train", "--config", str(work / "tiny.yaml"), "--data", str(work / "ds"), "--out", str(out),
                 "--stage", "1", "--stage1-epochs", "2", "--seed", "3"]) == 0
    cfg = json.loads((out / "train_config.json").read_text())
    assert cfg["stage1_epochs"] == 2 and cfg["seed"] == 3 and cfg["optimizer"] == "adam"


def test_resume_continues_step(work):
    out = work / "resume"
    args = ["train", "--config", str(work / "tiny.yaml"), "--data", str(work / "ds"), "--out", str(out)]
    assert main(args + ["--stage", "1"]) == 0
    n1 = len(list(csv.reader(open(out / "loss_log.csv"))))
    assert main(args + ["--stage", "2"]) == 0
    rows = list(csv.reader(open(out / "loss_log.csv")))
    steps = [int(r[0]) for r in rows[1:]]
    assert len(rows) > n1 and steps == list(range(1, len(steps) + 1))


def test_nan_exit_code(work):
    assert main(["train", "--data", str(work / "ds"), "--out", str(work / "nan"), "--stage", "1",
                 "--optimizer", "sgd", "--head-lr", "1e6", "--backbone-lr", "1e6",
                 "--stage1-epochs", "3", "--batch-size", "8"]) == 2


def test_predict_dump(work):
    ds = SynthDataset(work / "ds", "test")
    rows = list(csv.DictReader(open(work / "pred.csv")))
    assert len(rows) == 3 * len(ds)
    assert all(int(r["count"]) >= 0 for r in rows)
    d = import_density(work / "dumps" / f"{ds.image_ids[0]}.density.bin")
    assert d.shape == (3, 12, 12)
    raw = [float(r["raw_sum"]) for r in rows if r["image_id"] == ds.image_ids[0]]
    np.testing.assert_allclose(d.astype(np.float64).sum(axis=(1, 2)), raw, rtol=1e-12)


def test_predict_single_and_empty(work, tmp_path):
    one = tmp_path / "one.txt"
    one.write_text(str(work / "ds" / "images" / "img00000.png") + "\n")
    assert main(["predict", "--checkpoint", str(work / "run" / "stage2.pt"), "--images", str(one),
                 "--out", str(tmp_path / "one.csv")]) == 0
    assert len((tmp_path / "one.csv").read_text().splitlines()) == 4
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert main(["predict", "--checkpoint", str(work / "run" / "stage2.pt"), "--images", str(empty),
                 "--out", str(tmp_path / "e.csv")]) == 0
    assert (tmp_path / "e.csv").read_text().strip() == "image_id,category,score,raw_sum,count"
    assert not (tmp_path / "dumps").exists()


def test_evaluate_sections_and_plots(work):
    ev = work / "ev"
    image = SynthDataset(work / "ds", "test").image_ids[0]
    assert main(["evaluate", "--predictions", str(work / "pred.csv"), "--data", str(work / "ds"),
                 "--metrics", "mrmse,game", "--density-dir", str(work / "dumps"),
                 "--report", str(ev / "report.csv"), "--plot", "density", "--image", image,
                 "--plot", "rmse-by-count"]) == 0
    metrics = {r["metric"] for r in csv.DictReader(open(ev / "report.csv"))}
    assert metrics == {"rmse", "game"}
    for name in ("disc", "square", "triangle"):
        assert (ev / f"density_{image}_{name}.png").stat().st_size > 0
    assert (ev / "rmse_by_count.png").exists() and (ev / "rmse_by_count.csv").exists()


def test_evaluate_unknown_metric(work):
    assert main(["evaluate", "--predictions", str(work / "pred.csv"), "--data", str(work / "ds"),
                 "--metrics", "mrmse,accuracy", "--report", str(work / "r.csv")]) == 1


def test_score_masks(work):
    ds = SynthDataset(work / "ds")
    write_mask_archive(work / "props.jsonl", synth_proposals(ds.instance_masks()))
    common = ["score-masks", "--predictions", str(work / "pred.csv"), "--density-dir", str(work / "dumps"),
              "--proposals", str(work / "props.jsonl")]
    assert main(common + ["--out", str(work / "m.jsonl")]) == 0
    assert main(common + ["--out", str(work / "m0.jsonl"), "--gamma", "0"]) == 0
    header = (work / "m.scores.csv").read_text().splitlines()[0]
    assert header == "image_id,category,peak_row,peak_col,proposal_id,response,contour,background,density_penalty,total"
    read_mask_archive(work / "m.jsonl")
    assert main(["evaluate", "--predictions", str(work / "pred.csv"), "--data", str(work / "ds"),
                 "--metrics", "abo,map", "--masks", str(work / "m.jsonl"), "--report", str(work / "seg.csv")]) == 0


def test_score_masks_missing_proposals(work, capsys):
    assert main(["score-masks", "--predictions", str(work / "pred.csv"), "--density-dir", str(work / "dumps"),
                 "--proposals", str(work / "missing.jsonl"), "--out", str(work / "m.jsonl")]) == 1
    assert "missing.jsonl" in capsys.readouterr().err
