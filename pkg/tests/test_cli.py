import json

import pytest

from intlearn.cli import main
from intlearn.data import DATA_DIR_ENV
from intlearn.train import MetricsLog, load_checkpoint
from tests.helpers import write_mnist_like


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-data")
    write_mnist_like(root / "mnist", n_train=300, n_test=60, seed=2)
    return root


def train(data_dir, out, *extra):
    return main(["train", "--preset", "MLP1", "--dataset", "mnist", "--data-dir", str(data_dir),
                 "--epochs", "1", "--limit", "256", "--out", str(out), *extra])


def test_train_smoke_writes_checkpoint_and_log(data_dir, tmp_path, capsys):
    assert train(data_dir, tmp_path / "run", "--seed", "3") == 0
    assert (tmp_path / "run" / "checkpoint.ntrd").exists()
    records = MetricsLog.read(tmp_path / "run" / "metrics.jsonl")
    header = records[0]["config"]
    assert header["preset"] == "MLP1" and header["limit"] == 256 and header["seed"] == 3
    assert (header["gamma_inv"], header["eta_fw"], header["eta_lr"], header["p_l"]) == (
        512, 12000, 3000, 0)
    assert len(records) == 2
    out = capsys.readouterr().out
    assert f"final test accuracy: {records[-1]['test_acc_bp']} bp" in out


def test_eval_matches_final_log_line(data_dir, tmp_path, capsys):
    assert train(data_dir, tmp_path / "run", "--set", "gamma_inv=64") == 0
    final = MetricsLog.read(tmp_path / "run" / "metrics.jsonl")[-1]["test_acc_bp"]
    capsys.readouterr()
    assert main(["eval", str(tmp_path / "run" / "checkpoint.ntrd")]) == 0
    assert f"test accuracy: {final} bp" in capsys.readouterr().out


def test_config_file_and_overrides(data_dir, tmp_path):
    cfg = {"preset": "MLP1", "dataset": "mnist", "data_dir": str(data_dir), "epochs": 1,
           "limit": 128, "gamma_inv": 1024, "out": str(tmp_path / "from-file")}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(path), "--seed", "7"]) == 0
    header = MetricsLog.read(tmp_path / "from-file" / "metrics.jsonl")[0]["config"]
    assert header["gamma_inv"] == 1024 and header["seed"] == 7 and header["limit"] == 128
    _, _, saved = load_checkpoint(tmp_path / "from-file" / "checkpoint.ntrd")
    assert saved.gamma_inv == 1024


def test_env_var_data_dir(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv(DATA_DIR_ENV, str(data_dir))
    assert main(["train", "--epochs", "0", "--limit", "64", "--out", str(tmp_path / "o")]) == 0


def test_unknown_preset_exits_2(tmp_path, capsys):
    assert main(["train", "--preset", "ResNet", "--out", str(tmp_path)]) == 2
    assert "unknown preset" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"preset": "MLP1", "learning_rate": 3}))
    assert main(["train", "--config", str(path)]) == 2
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2


def test_missing_data_exits_2(tmp_path):
    assert main(["train", "--data-dir", str(tmp_path), "--out", str(tmp_path / "o")]) == 2


def test_eval_missing_or_corrupt_checkpoint_exits_2(tmp_path):
    assert main(["eval", str(tmp_path / "missing.ntrd")]) == 2
    (tmp_path / "bad.ntrd").write_bytes(b"NTRD" + b"\x00" * 20)
    assert main(["eval", str(tmp_path / "bad.ntrd")]) == 2


def test_eval_wrong_dataset_shape(data_dir, tmp_path, capsys):
    assert train(data_dir, tmp_path / "run") == 0
    cifar = tmp_path / "cifar"
    cifar.mkdir()
    from tests.helpers import write_cifar_batch
    write_cifar_batch(cifar / "test_batch.bin", 4)
    rc = main(["eval", str(tmp_path / "run" / "checkpoint.ntrd"), "--dataset", "cifar10",
               "--data-dir", str(cifar)])
    assert rc == 2
    assert "do not match" in capsys.readouterr().err


def test_inspect_config_reports_scaling_factors(tmp_path, capsys):
    assert main(["inspect", "--preset", "VGG8B", "--dataset", "cifar10"]) == 0
    out = capsys.readouterr().out
    assert "7 blocks" in out and "SF=294912" in out
    assert "analytical bounds only" in out
    path = tmp_path / "mlp.json"
    path.write_text(json.dumps({"preset": "MLP1"}))
    assert main(["inspect", str(path)]) == 0
    out = capsys.readouterr().out
    assert "SF=200704" in out and "SF=25600" in out


def test_inspect_checkpoint_shows_observed_bits(data_dir, tmp_path, capsys):
    assert train(data_dir, tmp_path / "run") == 0
    capsys.readouterr()
    assert main(["inspect", str(tmp_path / "run" / "checkpoint.ntrd")]) == 0
    out = capsys.readouterr().out
    assert "observed bits" in out and "z=" in out


def test_preprocess_reports_stats(data_dir, tmp_path, capsys):
    out = tmp_path / "stats.json"
    assert main(["preprocess", "--data-dir", str(data_dir), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["train"]["samples"] == 300 and abs(report["train"]["mean"]) <= 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert main([]) == 2
