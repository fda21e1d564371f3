"""
Command-line tests driven through main(argv).
"""

import json

import numpy as np
import pytest

from tdasep.audio_io import read_wav, write_wav
from tdasep.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from tdasep.config import RESOLVED_CONFIG_NAME
from tdasep.datagen import MANIFEST_NAME


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = main(["simulate", "--out", str(out), "--train", "2", "--val", "1", "--test", "2",
                 "--duration", "0.25", "--seed", "1"])
    assert code == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained_dir(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--preset", "tiny", "--manifest", str(dataset_dir / MANIFEST_NAME), "--out", str(out),
                 "--set", "train.max_epochs=1", "--set", "train.prefetch=1"])
    assert code == EXIT_OK
    return out


def test_simulate_writes_manifest(dataset_dir):
    assert (dataset_dir / MANIFEST_NAME).exists()
    assert (dataset_dir / RESOLVED_CONFIG_NAME).exists()
    assert len(list((dataset_dir / "test").glob("*_mix.wav"))) == 2


def test_usage_errors(tmp_path):
    assert main(["simulate", "--recipe", "wsj0_style", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["train", "--manifest", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["profile", "--ablate", "no_everything"]) == EXIT_USAGE
    assert main(["profile", "--set", "model.heads=5"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_profile_default(capsys):
    assert main(["profile"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "params (M)" in out and "2.635" in out


def test_profile_ablation_json(capsys, tmp_path):
    assert main(["profile", "--ablate", "no_ga,no_la", "--json", "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert 0.48 < report["params_m"] < 0.5
    assert (tmp_path / "report.json").exists() and (tmp_path / "report.txt").exists()
    assert "ablations = no_ga,no_la" in (tmp_path / RESOLVED_CONFIG_NAME).read_text()


def test_profile_grid(capsys):
    assert main(["profile", "--preset", "desk", "--grid"]) == EXIT_OK
    assert "no_ga,no_la" in capsys.readouterr().out


def test_gradcheck_layers(capsys):
    assert main(["gradcheck", "--scale", "layers"]) == EXIT_OK
    assert "passed" in capsys.readouterr().out


@pytest.mark.parametrize("mode", ["oracle", "mixture"])
def test_eval_reference_estimates(dataset_dir, tmp_path, capsys, mode):
    code = main(["eval", "--manifest", str(dataset_dir / MANIFEST_NAME), "--estimates", mode,
                 "--out", str(tmp_path), "--per-example", "--json"])
    assert code == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert len(report["examples"]) == 2
    assert (report["si_snri_db"] == 0.0) == (mode == "mixture")
    assert (tmp_path / "per_example.csv").exists()


def test_eval_model_needs_checkpoint(dataset_dir):
    assert main(["eval", "--manifest", str(dataset_dir / MANIFEST_NAME)]) == EXIT_USAGE


def test_eval_per_example_needs_out(dataset_dir, caplog):
    code = main(["eval", "--manifest", str(dataset_dir / MANIFEST_NAME), "--estimates", "oracle",
                 "--per-example"])
    assert code == EXIT_USAGE
    assert "needs --out" in caplog.text


def test_train_writes_checkpoints(trained_dir):
    assert (trained_dir / "best.json").exists() and (trained_dir / "last.bin").exists()
    assert (trained_dir / "BEST").read_text().strip() == "best"
    assert (trained_dir / "train_log.csv").exists()
    assert "preset = tiny" in (trained_dir / RESOLVED_CONFIG_NAME).read_text()


def test_separate_single_file(trained_dir, tmp_path):
    wave = (0.1 * np.random.default_rng(0).standard_normal(3001)).astype(np.float32)
    write_wav(tmp_path / "mix.wav", wave, 16000)
    out = tmp_path / "sep"
    assert main(["separate", "--checkpoint", str(trained_dir), "--input", str(tmp_path / "mix.wav"),
                 "--out", str(out)]) == EXIT_OK
    for name in ("spk1.wav", "spk2.wav"):
        estimate, rate = read_wav(out / name)
        assert rate == 16000 and estimate.shape == (3001,)


def test_separate_manifest_split(trained_dir, dataset_dir, tmp_path):
    assert main(["separate", "--checkpoint", str(trained_dir / "best"), "--manifest",
                 str(dataset_dir / MANIFEST_NAME), "--split", "test", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "00000" / "spk2.wav").exists()
    assert (tmp_path / "00001" / "spk1.wav").exists()


def test_separate_rate_mismatch(trained_dir, tmp_path):
    write_wav(tmp_path / "mix8k.wav", np.zeros(1600, dtype=np.float32), 8000)
    assert main(["separate", "--checkpoint", str(trained_dir), "--input", str(tmp_path / "mix8k.wav"),
                 "--out", str(tmp_path / "sep")]) == EXIT_FAILURE


def test_eval_trained_model(trained_dir, dataset_dir, capsys):
    assert main(["eval", "--checkpoint", str(trained_dir), "--manifest", str(dataset_dir / MANIFEST_NAME),
                 "--split", "val"]) == EXIT_OK
    assert "SI-SNRi (dB)" in capsys.readouterr().out


def test_train_resume(dataset_dir, tmp_path, capsys):
    args = ["train", "--preset", "tiny", "--manifest", str(dataset_dir / MANIFEST_NAME), "--out", str(tmp_path),
            "--seed", "3"]
    assert main(args + ["--set", "train.max_epochs=1"]) == EXIT_OK
    assert main(args + ["--set", "train.max_epochs=2", "--resume"]) == EXIT_OK
    assert "epochs run: 2" in capsys.readouterr().out
    assert len((tmp_path / "train_log.csv").read_text().strip().splitlines()) == 3
