import filecmp
import json
import os

import numpy as np
import pytest

from voxmamba.checkpoint import save_checkpoint
from voxmamba.cli import apply_overrides, main
from voxmamba.network import ModelConfig, build_model
from voxmamba.volumes import ClassTable, LabelMap, Volume, write_volume

TINY = {"model": {"channel_schedule": [4, 4, 8, 8], "n_bottleneck_blocks": 1, "patch_size": 8, "state_dim": 4,
                  "gn_groups": 2},
        "train": {"epochs": 2, "patches_per_axis": 1, "accumulation_count": 1}}


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen-synth", "--out", str(d), "--count", "2", "--size", "12", "--classes", "4", "--seed", "3"]) == 0
    return d


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture(scope="module")
def trained(synth, config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", config, "--data", str(synth), "--out", str(out)]) == 0
    return out


def biased_checkpoint(path, favour, n_classes=4, patch=8):
    """A checkpoint whose head always prefers class ``favour``."""
    m = build_model(ModelConfig.desk_scale(channel_schedule=[4, 4, 8, 8], n_bottleneck_blocks=1, patch_size=patch,
                                           state_dim=4, gn_groups=2, n_classes=n_classes))
    m.head.weight.data[...] = 0
    m.head.bias.data[...] = 0
    m.head.bias.data[favour] = 10.0
    table = ClassTable.generic(n_classes, (n_classes - 2, n_classes - 1) if n_classes >= 4 else None)
    save_checkpoint(m, str(path), extra={"class_table": table.to_json()})


# -- gen-synth --------------------------------------------------------------------

def test_gen_synth_outputs(synth, tmp_path):
    names = sorted(os.listdir(synth))
    assert names == ["manifest.json", "scan_000.vol", "scan_000_labels.vol", "scan_001.vol", "scan_001_labels.vol"]
    again = tmp_path / "again"
    main(["gen-synth", "--out", str(again), "--count", "2", "--size", "12", "--classes", "4", "--seed", "3"])
    for n in names:
        assert filecmp.cmp(synth / n, again / n, shallow=False)


def test_gen_synth_48_six_classes(tmp_path):
    assert main(["gen-synth", "--out", str(tmp_path), "--count", "4", "--size", "48", "--classes", "6"]) == 0
    assert len([n for n in os.listdir(tmp_path) if n.endswith(".vol")]) == 8
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["class_table"]) == 6 and len(manifest["scans"]) == 4


def test_gen_synth_rejects_one_class(tmp_path):
    assert main(["gen-synth", "--out", str(tmp_path), "--classes", "1"]) == 2


# -- train ---------------------------------------------------------------------------

def test_train_outputs_and_log(trained):
    names = set(os.listdir(trained))
    assert {"epoch_000.ckpt", "epoch_001.ckpt", "model.ckpt", "train_log.jsonl"} <= names
    lines = (trained / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 4  # 2 scans x 1 patch x 2 epochs, one step per patch
    assert [json.loads(x)["step"] for x in lines] == [0, 1, 2, 3]


def test_train_resume(synth, config, tmp_path, trained):
    out = tmp_path / "r"
    one = json.loads(json.dumps(TINY))
    one["train"]["epochs"] = 1
    cfg1 = tmp_path / "one.json"
    cfg1.write_text(json.dumps(one))
    assert main(["train", "--config", str(cfg1), "--data", str(synth), "--out", str(out)]) == 0
    assert main(["train", "--config", config, "--data", str(synth), "--out", str(out), "--resume"]) == 0
    assert (out / "train_log.jsonl").read_text() == (trained / "train_log.jsonl").read_text()
    assert filecmp.cmp(out / "model.ckpt", trained / "model.ckpt", shallow=False)


def test_train_config_errors(synth, tmp_path):
    base = ["train", "--data", str(synth), "--out", str(tmp_path / "o")]
    assert main(base + ["--set", "train.lr_max=-1"]) == 2
    assert main(base + ["--set", "train.bogus=1"]) == 2
    assert main(base + ["--set", "model.channel_schedule=[3,4,5,6]"]) == 2
    assert main(base + ["--set", "model.n_classes=9"]) == 2
    assert main(base + ["--set", "extra.x=1"]) == 2
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(synth, config, tmp_path):
    argv = ["train", "--config", config, "--data", str(synth), "--out", str(tmp_path / "d"),
            "--set", "train.lr_max=1e30", "--set", "train.lr_min=1e29", "--set", "train.weight_decay=0"]
    assert main(argv) == 3


def test_overrides():
    doc = apply_overrides({"train": {"epochs": 3}}, ["train.epochs=5", "model.name=abc", "train.x.y=[1,2]"])
    assert doc == {"train": {"epochs": 5, "x": {"y": [1, 2]}}, "model": {"name": "abc"}}
    with pytest.raises(ValueError):
        apply_overrides({}, ["novalue"])


# -- segment ------------------------------------------------------------------------------

def test_segment_rerun_and_threads_identical(trained, synth, tmp_path):
    args = ["segment", "--model", str(trained / "model.ckpt"), "--input", str(synth / "scan_000.vol")]
    assert main(args + ["--output", str(tmp_path / "a.vol"), "--stride", "4"]) == 0
    assert main(args + ["--output", str(tmp_path / "b.vol"), "--stride", "4", "--threads", "4"]) == 0
    assert filecmp.cmp(tmp_path / "a.vol", tmp_path / "b.vol", shallow=False)


def test_segment_nifti_mirrors_input(trained, tmp_path):
    v = Volume(np.random.default_rng(0).random((12, 12, 12)))
    write_volume(str(tmp_path / "in.nii"), v)
    model = str(trained / "model.ckpt")
    assert main(["segment", "--model", model, "--input", str(tmp_path / "in.nii"),
                 "--output", str(tmp_path / "out.nii")]) == 0
    assert (tmp_path / "out.nii").read_bytes()[344:347] == b"n+1"
    assert main(["segment", "--model", model, "--input", str(tmp_path / "in.nii"),
                 "--output", str(tmp_path / "out.vol")]) == 2


def test_segment_error_codes(trained, synth, tmp_path):
    model = str(trained / "model.ckpt")
    small = tmp_path / "small.vol"
    write_volume(str(small), Volume(np.zeros((4, 12, 12))))
    assert main(["segment", "--model", model, "--input", str(small), "--output", str(tmp_path / "o.vol")]) == 5
    assert main(["segment", "--model", model, "--input", str(tmp_path / "nope.vol"),
                 "--output", str(tmp_path / "o.vol")]) == 4
    bad = tmp_path / "bad.ckpt"
    raw = bytearray((trained / "model.ckpt").read_bytes())
    raw[200] ^= 1
    bad.write_bytes(bytes(raw))
    assert main(["segment", "--model", str(bad), "--input", str(synth / "scan_000.vol"),
                 "--output", str(tmp_path / "o.vol")]) == 4
    table5 = tmp_path / "t5.json"
    ClassTable.generic(5).save(str(table5))
    assert main(["segment", "--model", model, "--input", str(synth / "scan_000.vol"), "--classes", str(table5),
                 "--output", str(tmp_path / "o.vol")]) == 5
    assert main(["segment", "--model", model, "--input", str(synth / "scan_000.vol"), "--stride", "0",
                 "--output", str(tmp_path / "o.vol")]) == 2


def test_segment_hippocampus(synth, tmp_path):
    stage1 = tmp_path / "s1.ckpt"
    biased_checkpoint(stage1, favour=3)  # everything predicted as the right hippocampus class
    hip = tmp_path / "hip.ckpt"
    biased_checkpoint(hip, favour=1, n_classes=3)
    out = tmp_path / "seg.vol"
    vol = tmp_path / "v.vol"
    write_volume(str(vol), Volume(np.random.default_rng(0).random((8, 8, 8))))
    assert main(["segment", "--model", str(stage1), "--input", str(vol), "--output", str(out),
                 "--hippocampus", str(hip)]) == 0
    assert (tmp_path / "seg_hippocampus.vol").exists()


def test_segment_missing_hippocampus_exit_6(synth, tmp_path):
    stage1 = tmp_path / "s1.ckpt"
    biased_checkpoint(stage1, favour=0)  # background only
    hip = tmp_path / "hip.ckpt"
    biased_checkpoint(hip, favour=1, n_classes=3)
    assert main(["segment", "--model", str(stage1), "--input", str(synth / "scan_000.vol"),
                 "--output", str(tmp_path / "o.vol"), "--hippocampus", str(hip)]) == 6


# -- evaluate ---------------------------------------------------------------------------------

def test_evaluate_identity_and_summary(synth, tmp_path, capsys):
    labels = [str(synth / "scan_000_labels.vol"), str(synth / "scan_001_labels.vol")]
    out = tmp_path / "m.csv"
    assert main(["evaluate", "--pred", *labels, "--truth", *labels, "--classes", str(synth / "manifest.json"),
                 "--out-csv", str(out), "--paired-summary"]) == 0
    rows = out.read_text().splitlines()[1:]
    assert rows and all(r.split(",")[4] == "1.0" for r in rows)
    printed = capsys.readouterr().out.splitlines()
    assert printed[0] == "dataset,model,DSC,VS,ASSD" and printed[1].startswith("dataset,model_a,1.00000")
    assert json.loads((tmp_path / "m.json").read_text())["summary"]["dsc"]["mean"] == 1.0


def test_evaluate_missing_class_and_wilcoxon(synth, tmp_path):
    table = ClassTable.generic(4, (2, 3))
    truth = np.zeros((6, 6, 6), int)
    truth[:2] = 1
    truth[4:, 4:] = 2
    tpaths, apaths, bpaths = [], [], []
    rng = np.random.default_rng(0)
    for i in range(6):
        pa = truth.copy()
        pa[rng.random(truth.shape) < 0.1] = 1
        pb = truth.copy()
        pb[rng.random(truth.shape) < 0.3] = 1
        pb[4:, 4:] = 0  # class 2 missing in model B
        for name, arr, lst in (("t", truth, tpaths), ("a", pa, apaths), ("b", pb, bpaths)):
            path = tmp_path / f"{name}{i}.vol"
            write_volume(str(path), LabelMap(arr, table))
            lst.append(str(path))
    cls = tmp_path / "classes.json"
    table.save(str(cls))
    assert main(["evaluate", "--pred", *apaths, "--truth", *tpaths, "--pred-b", *bpaths, "--classes", str(cls),
                 "--out-csv", str(tmp_path / "e.csv"), "--paired-summary"]) == 0
    doc = json.loads((tmp_path / "e.json").read_text())
    assert doc["wilcoxon"]["dsc"]["method"] == "exact" and 0 < doc["wilcoxon"]["dsc"]["p"] <= 1
    assert len(doc["table"]) == 2
    main(["evaluate", "--pred", *bpaths, "--truth", *tpaths, "--classes", str(cls),
          "--out-csv", str(tmp_path / "b.csv")])
    b_rows = [r.split(",") for r in (tmp_path / "b.csv").read_text().splitlines()[1:]]
    assert all(r[6] == "" for r in b_rows if r[1] == "2")
    assert json.loads((tmp_path / "b.json").read_text())["subjects"]["b0.vol"]["missing"]["2"] == "prediction"


def test_evaluate_mismatch_exit_5(synth, tmp_path):
    table = ClassTable.generic(4, (2, 3))
    write_volume(str(tmp_path / "x.vol"), LabelMap(np.zeros((5, 5, 5), int), table))
    assert main(["evaluate", "--pred", str(tmp_path / "x.vol"), "--truth", str(synth / "scan_000_labels.vol"),
                 "--classes", str(synth / "manifest.json"), "--out-csv", str(tmp_path / "m.csv")]) == 5


# -- paths and info ---------------------------------------------------------------------------

def test_paths_command(tmp_path, capsys):
    assert main(["paths", "--dims", "3,4,5", "--verify"]) == 0
    out = capsys.readouterr().out
    assert "distinct_count: 48" in out and "bijective: True" in out and "continuous: True" in out
    assert main(["paths", "--dims", "1,1,1", "--verify"]) == 0
    assert "distinct_count: 1" in capsys.readouterr().out
    assert main(["paths", "--dims", "2,2,3", "--dump", str(tmp_path / "p.csv")]) == 0
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 1 + 48 * 12
    for bad in ("0,2,2", "2,2", "a,b,c"):
        assert main(["paths", "--dims", bad]) == 2


def test_info_checkpoint(trained, tmp_path, capsys):
    assert main(["info", "--model", str(trained / "model.ckpt")]) == 0
    out = capsys.readouterr().out
    assert "parameters: " in out and "bottleneck_kind: vss3d" in out and "orientations: 0" in out
    bad = tmp_path / "bad.ckpt"
    raw = bytearray((trained / "model.ckpt").read_bytes())
    raw[-1] ^= 0xFF
    bad.write_bytes(bytes(raw))
    assert main(["info", "--model", str(bad)]) == 4
    assert "digest" in capsys.readouterr().err


def test_info_full_scale_compare(capsys):
    assert main(["info", "--set", "preset=\"full\"", "--compare"]) == 0
    out = capsys.readouterr().out
    assert "orientations: 0,1,2,3,4,5,0,1,2" in out and "parameters: 149998944" in out
    red = float(out.split("vss3d_vs_tri_oriented_reduction: ")[1].split()[0])
    assert 0.15 <= red <= 0.25


def test_usage_errors():
    assert main([]) == 2
    assert main(["segment"]) == 2


def test_train_resume_uses_stored_settings(synth, tmp_path):
    out = tmp_path / "r"
    base = ["train", "--data", str(synth), "--out", str(out)]
    tiny = ["--set", 'model.channel_schedule=[4,4,8,8]', "--set", "model.n_bottleneck_blocks=1",
            "--set", "model.patch_size=8", "--set", "model.state_dim=4", "--set", "model.gn_groups=2"]
    assert main(base + tiny + ["--set", "train.epochs=1", "--set", "train.lr_max=3e-3"]) == 0
    # bare resume keeps lr_max and the finished epoch count: nothing more to run
    assert main(base + ["--resume"]) == 0
    assert sorted(p.name for p in out.glob("epoch_*.ckpt")) == ["epoch_000.ckpt"]
    assert main(base + ["--resume", "--set", "train.epochs=2"]) == 0
    log = [json.loads(x) for x in (out / "train_log.jsonl").read_text().splitlines()]
    assert {r["epoch"] for r in log} == {0, 1} and log[0]["lr"] == pytest.approx(3e-3)
    assert main(base + ["--resume", "--set", "train.lr_max=1e-2", "--set", "train.epochs=3"]) == 2
