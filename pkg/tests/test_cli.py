import csv
import json

import pytest

from mca.cli import main

SMALL_TRAIN = ["--epochs", "5", "--batch-size", "32", "--k-s", "5", "--k-p", "5",
               "--gamma-r", "20", "--gamma-h", "6"]


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen", "--c", "3", "--seed", "7", "--n-img", "40", "--words-per-cluster", "15",
                 "--d", "16", "--misalignment", "0.2", "-o", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--images", str(data_dir / "images.mcae"),
                 "--words", str(data_dir / "words.mcae"),
                 "--taxonomy", str(data_dir / "taxonomy.tsv"), "-o", str(out)] + SMALL_TRAIN)
    assert code == 0
    return out


def test_gen_outputs(data_dir):
    for name in ("images.mcae", "images.meta.json", "words.mcae", "taxonomy.tsv", "truth.json",
                 "manifest.json", "metrics.csv"):
        assert (data_dir / name).exists(), name
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["command"] == "gen" and manifest["config"]["seed"] == 7


def test_train_outputs(run_dir):
    for name in ("manifest.json", "train_log.csv", "metrics.csv", "params.mcap",
                 "checkpoints/epoch_005.mcap", "checkpoints/state.npz", "loss_curve.png",
                 "vocab_curve.png", "vocab_curve.csv", "words.csv", "stage_report.csv"):
        assert (run_dir / name).exists(), name
    metrics = dict(read_csv(run_dir / "metrics.csv")[1:])
    assert {"train_ACC", "holdout_ACC", "holdout_NMI", "holdout_ARI", "final_loss"} <= set(metrics)
    assert read_csv(run_dir / "train_log.csv")[0] == ["step", "l_I", "l_ia", "l_pa", "l_sa", "l_total"]


def test_manifest_echoes_resolved_config(run_dir):
    manifest = json.loads((run_dir / "manifest.json").read_text())
    cfg = manifest["config"]
    assert cfg["epochs"] == 5 and cfg["k_s"] == 5 and cfg["tau_ia"] == 0.05
    assert manifest["runtime"] == {"workers": 1}
    assert len(manifest["inputs"]["images"]["sha256"]) == 64


def test_config_file_then_flags(data_dir, tmp_path):
    conf = tmp_path / "c.txt"
    conf.write_text("epochs = 2\nbatch-size = 16  # comment\nk_s = 3\n")
    out = tmp_path / "run"
    code = main(["train", "--images", str(data_dir / "images.mcae"),
                 "--words", str(data_dir / "words.mcae"), "--taxonomy", str(data_dir / "taxonomy.tsv"),
                 "--config", str(conf), "--k-s", "4", "--k-p", "4", "--gamma-r", "20",
                 "--gamma-h", "6", "-o", str(out)])
    assert code == 0
    cfg = json.loads((out / "manifest.json").read_text())["config"]
    assert (cfg["epochs"], cfg["batch_size"], cfg["k_s"]) == (2, 16, 4)


def test_eval_run_holdout(data_dir, run_dir, tmp_path):
    code = main(["eval", "--images", str(data_dir / "images.mcae"), "--run", str(run_dir),
                 "--split", "holdout", "-o", str(tmp_path)])
    assert code == 0
    rows = read_csv(tmp_path / "assignments.csv")
    assert rows[0] == ["id", "cluster"] and len(rows) == 1 + 30
    train_metrics = dict(read_csv(run_dir / "metrics.csv")[1:])
    eval_metrics = dict(read_csv(tmp_path / "metrics.csv")[1:])
    assert float(eval_metrics["ACC"]) == pytest.approx(float(train_metrics["holdout_ACC"]))


def test_audit(data_dir, run_dir, tmp_path, capsys):
    code = main(["audit", "--images", str(data_dir / "images.mcae"),
                 "--checkpoint", str(run_dir / "params.mcap"), "--space", str(run_dir / "space.mcae"),
                 "--k-s", "5", "-o", str(tmp_path)])
    assert code == 0
    assert "unidentified constant" in capsys.readouterr().out
    names = [r[0] for r in read_csv(tmp_path / "audit.csv")[1:]]
    assert {"mu_i", "k_i_prime", "c_tilde_1", "margin"} <= set(names)


def test_bench(data_dir, tmp_path):
    code = main(["bench", "--images", str(data_dir / "images.mcae"),
                 "--words", str(data_dir / "words.mcae"), "--taxonomy", str(data_dir / "taxonomy.tsv"),
                 "-o", str(tmp_path), "--repeats", "2"] + SMALL_TRAIN)
    assert code == 0
    rows = read_csv(tmp_path / "bench.csv")
    assert rows[0] == ["method", "seed", "epoch", "acc"] and len(rows) == 1 + 2 * 3 * 6
    assert (tmp_path / "bench.png").stat().st_size > 0


def test_build_space(data_dir, tmp_path):
    code = main(["build-space", "--images", str(data_dir / "images.mcae"),
                 "--words", str(data_dir / "words.mcae"), "--taxonomy", str(data_dir / "taxonomy.tsv"),
                 "--gamma-r", "20", "--gamma-h", "6", "-o", str(tmp_path)])
    assert code == 0
    curve = [int(r[1]) for r in read_csv(tmp_path / "vocab_curve.csv")[1:]]
    assert all(a >= b for a, b in zip(curve, curve[1:]))
    assert (tmp_path / "space.mcae").exists()


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--no-such-flag", "1"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_input_is_data_error(tmp_path):
    assert main(["train", "--images", str(tmp_path / "missing.mcae"), "--space",
                 str(tmp_path / "x.mcae"), "-o", str(tmp_path / "r")]) == 2


def test_bad_config_value_is_data_error(data_dir, tmp_path):
    conf = tmp_path / "c.txt"
    conf.write_text("epochs = many\n")
    assert main(["train", "--images", str(data_dir / "images.mcae"), "--config", str(conf),
                 "-o", str(tmp_path / "r")]) == 2


def test_train_without_space_source_is_usage_error(data_dir, tmp_path):
    assert main(["train", "--images", str(data_dir / "images.mcae"), "-o", str(tmp_path)]) == 1


def test_gen_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--seed", "3", "--n-img", "10", "--d", "8", "-o", str(tmp_path / name)]) == 0
    for f in ("images.mcae", "words.mcae", "taxonomy.tsv", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
