"""
End-to-end runs at desk scale: learning on synthetic mixtures and RTF scaling.

Both are marked slow (hours of CPU for the learning run); select them with
`pytest -m slow`.
"""

import pytest

from tdasep.checkpoint import CheckpointStore
from tdasep.config import ModelConfig, TrainConfig, split_seeds
from tdasep.datagen import InMemoryDataset
from tdasep.evaluation import cpu_rtf, evaluate_dataset
from tdasep.presets import ModelPresets, apply_ablations
from tdasep.tdanet import TDANet
from tdasep.training import train_loop

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def desk_data():
    return InMemoryDataset.generate("lrs2_2mix_style", (200, 40, 40), seed=0, duration_s=1.0)


@pytest.fixture(scope="module")
def desk_config():
    return ModelConfig.create(**ModelPresets.get("desk"))


def _train_and_score(config, dataset, out_dir):
    seeds = split_seeds(0)
    model = TDANet(config, seed=seeds["init"], dropout_seed=seeds["dropout"])
    train_loop(model, dataset, TrainConfig.create(max_epochs=60, seed=seeds["data"]), out_dir)
    best = CheckpointStore(out_dir).load("best").build_model()
    return evaluate_dataset(dataset.split("test"), "model", best).si_snri_db


def test_desk_scale_learning(desk_data, desk_config, tmp_path):
    full = _train_and_score(desk_config, desk_data, tmp_path / "full")
    control = _train_and_score(apply_ablations(desk_config, "no_ga,no_la"), desk_data, tmp_path / "control")
    assert full >= 5.0
    assert full - control >= 1.0


def test_rtf_scales_with_unfolds(desk_config):
    timings = {}
    for unfolds in (2, 4, 8):
        model = TDANet(desk_config.with_updates(unfolds=unfolds))
        timings[unfolds] = cpu_rtf(model, n_tracks=10, repeats=5, warmup=2).mean_s
    # the fixed encoder/decoder cost cancels in the differences
    ratio = (timings[8] - timings[4]) / (timings[4] - timings[2])
    assert 1.4 <= ratio <= 2.6
