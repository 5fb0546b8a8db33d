import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from twostream.cli import build_parser, main
from twostream.tensor import load_tensor

TRAIN_FLAGS = ["--arch", "vgg-tiny", "--T", "2", "--L", "3", "--tau", "1,2", "--test-tau", "1",
               "--batch", "8", "--lr", "1e-2"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--seed", "3", "--per-class", "4,2,25", "--frames", "10",
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def run(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    t0 = time.time()
    code = main(["train", "--data", str(data), "--out", str(out), "--fusion", "conv",
                 "--at", "relu3", "--epochs", "2", "--quiet"] + TRAIN_FLAGS)
    assert code == 0
    assert time.time() - t0 < 300
    return out


def test_gen_data_outputs(data):
    m = json.loads((data / "manifest.json").read_text())
    assert m["classes"] == 4 and len(m["videos"]) == 4 * (4 + 2 + 25)
    assert (data / "gen-data.manifest.json").is_file()


def test_gen_data_same_seed_same_digest(data, tmp_path):
    assert main(["gen-data", "--seed", "3", "--per-class", "4,2,25", "--frames", "10",
                 "--out", str(tmp_path)]) == 0
    a = json.loads((data / "manifest.json").read_text())["digest"]
    b = json.loads((tmp_path / "manifest.json").read_text())["digest"]
    assert a == b


def test_train_artifacts(run):
    for name in ("train.manifest.json", "history.csv", "results.csv", "history.png",
                 "spatial.arch", "temporal.arch"):
        assert (run / name).is_file(), name
    rows = list(csv.DictReader((run / "history.csv").open()))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert set(rows[0]) == {"epoch", "lr", "train_loss", "val_acc"}
    m = json.loads((run / "train.manifest.json").read_text())
    assert m["subcommand"] == "train" and m["seed"] == 0
    assert set(m["hashes"]) == {"dataset", "spatial_arch", "temporal_arch"}


def test_eval_untrained_near_chance(data, run, tmp_path):
    assert main(["eval", "--data", str(data), "--run", str(run), "--out", str(tmp_path),
                 "--untrained"]) == 0
    rows = dict(csv.reader((tmp_path / "eval.csv").open()))
    assert abs(float(rows["overall"]) - 0.25) <= 0.05
    preds = load_tensor(tmp_path / "predictions.tns")
    assert preds.shape == (100, 1, 4)
    assert (tmp_path / "confusion.png").is_file()


def test_eval_trained_with_flips(data, run, tmp_path):
    assert main(["eval", "--data", str(data), "--run", str(run), "--out", str(tmp_path),
                 "--clips", "2", "--flips"]) == 0
    assert load_tensor(tmp_path / "predictions.tns").shape == (100, 4, 4)


def test_ablate_two_specs(data, tmp_path):
    code = main(["ablate", "--data", str(data), "--out", str(tmp_path), "--epochs", "1",
                 "--no-pretrain", "--spec", "sum@softmax", "--spec", "conv@relu3/3d-pool"]
                + TRAIN_FLAGS)
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "ablation.csv").open()))
    assert [r["name"] for r in rows] == ["sum@softmax", "conv@relu3/3d-pool"]
    assert (tmp_path / "ablation.png").is_file()


def test_ablate_bad_spec_rejected_before_training(data, tmp_path):
    assert main(["ablate", "--data", str(data), "--out", str(tmp_path),
                 "--spec", "conv@relu9"] + TRAIN_FLAGS) == 2


def test_paramcount_single(tmp_path, capsys):
    assert main(["paramcount", "--fusion", "conv", "--at", "relu5", "--classes", "101",
                 "--temporal-channels", "20", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "14" in out
    assert (tmp_path / "paramcount.csv").read_text().startswith("layer,name,params")


def test_paramcount_sweep_emits_all_rows(tmp_path, capsys):
    assert main(["paramcount", "--sweep", "table2", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "paramcount-table2.csv").open()))
    assert len(rows) == 6
    assert (tmp_path / "paramcount-table2.png").is_file()


def test_paramcount_trivial_net(tmp_path, capsys):
    arch = tmp_path / "one.arch"
    arch.write_text("name = one\ninput_size = 1\nclasses = 3\nspatial_channels = 4\n"
                    "temporal_channels = 4\n[fc]\ntype = fc\nunits = classes\n")
    assert main(["paramcount", "--arch", str(arch), "--out", str(tmp_path)]) == 0
    rows = list(csv.reader((tmp_path / "paramcount.csv").open()))
    # two towers of one 4 -> 3 fc layer each
    assert ["total", "", str(2 * (4 * 3 + 3))] in rows


def test_malformed_arch_exit_2_with_line(tmp_path, capsys):
    arch = tmp_path / "bad.arch"
    arch.write_text("name = x\ninput_size = 4\nclasses = 2\nspatial_channels = 3\n"
                    "temporal_channels = 2\n[c]\ntype = conv\nkernel = 3\n")
    assert main(["paramcount", "--arch", str(arch), "--out", str(tmp_path)]) == 2
    assert f"{arch}:6:" in capsys.readouterr().err


def test_gradcheck_single_op(tmp_path, capsys):
    assert main(["gradcheck", "--ops", "conv2d", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1 and out[0].startswith("PASS") and "conv2d" in out[0]


def test_gradcheck_negative_control_fails(tmp_path, capsys):
    assert main(["gradcheck", "--ops", "fc", "--negative-control", "--out", str(tmp_path)]) == 2
    out = capsys.readouterr().out
    assert "FAIL  wrong-gradient" in out


def test_unknown_flag_is_usage_error(capsys):
    assert main(["gradcheck", "--opz", "all"]) == 1
    assert "unrecognized" in capsys.readouterr().err


def test_unknown_op_is_usage_error():
    assert main(["gradcheck", "--ops", "nope"]) == 1


def test_no_subcommand_is_usage_error(capsys):
    assert main([]) == 1


def test_missing_data_dir(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]
                + TRAIN_FLAGS) == 2


def test_incompatible_arch_and_data_rejected(data, tmp_path, capsys):
    code = main(["train", "--data", str(data), "--out", str(tmp_path), "--arch", "vgg-tiny",
                 "--L", "2", "--T", "2", "--tau", "1"])
    assert code == 2
    assert "channels" in capsys.readouterr().err
    code = main(["train", "--data", str(data), "--out", str(tmp_path), "--arch", "vgg-tiny",
                 "--L", "3", "--T", "5", "--tau", "1,3"])
    assert code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_training_exit_3(data, tmp_path, capsys):
    code = main(["train", "--data", str(data), "--out", str(tmp_path), "--epochs", "3",
                 "--quiet", "--lr", "1e300"] + TRAIN_FLAGS[:-2])
    assert code == 3
    assert "diverged" in capsys.readouterr().err


def test_every_subcommand_help_lists_its_flags():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "twostream", "gradcheck", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "--negative-control" in res.stdout
