"""
Objective, optimizer, schedule and training-loop tests.
"""

import itertools
import logging

import numpy as np
import pytest

from tdasep.checkpoint import CheckpointStore
from tdasep.config import TrainConfig
from tdasep.datagen import InMemoryDataset, make_example
from tdasep.errors import ConfigError, InputError, NonFiniteError
from tdasep.numerics import Tensor
from tdasep.tdanet import TDANet
from tdasep.training import (
    Adam,
    AdamState,
    BoundedPrefetcher,
    PlateauSchedule,
    adam_step,
    best_permutation,
    clip_grads,
    grad_norm,
    pit_loss,
    pit_si_snr,
    si_snr,
    si_snr_matrix,
    si_snr_terms,
    train_loop,
    train_step,
)


# SI-SNR

def test_si_snr_zero_db_example():
    assert abs(si_snr(np.array([1.0, 1.0]), np.array([1.0, 0.0]), mean_subtract=False)) < 1e-6


def test_si_snr_is_scale_invariant(rng):
    target = rng.standard_normal(800)
    estimate = target + 0.3 * rng.standard_normal(800)
    base = si_snr(estimate, target)
    assert np.isclose(si_snr(7.5 * estimate, target), base, atol=1e-9)
    assert np.isclose(si_snr(estimate, 0.01 * target), base, atol=1e-9)


def test_si_snr_clamps_and_handles_silence(rng):
    target = rng.standard_normal(400)
    assert si_snr(target, target) == 60.0
    assert si_snr(np.zeros(400), target) == -60.0
    assert si_snr(target, target, clamp_db=30.0) == 30.0
    with pytest.raises(InputError):
        si_snr(target, np.zeros(400))
    with pytest.raises(InputError):
        si_snr(target, np.ones(400))
    with pytest.raises(InputError):
        si_snr(target[:10], target)


def test_si_snr_tensor_path_matches_numpy(float64, rng):
    target = rng.standard_normal(500)
    estimate = target + rng.standard_normal(500)
    value = si_snr(Tensor(estimate, requires_grad=True), target)
    assert isinstance(value, Tensor)
    assert np.isclose(value.item(), si_snr(estimate, target), atol=1e-9)


def test_si_snr_energy_decomposition():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        target = rng.standard_normal(512)
        target /= np.linalg.norm(target)
        estimate = rng.standard_normal(512)
        estimate /= np.linalg.norm(estimate)
        terms = si_snr_terms(estimate, target)
        centered = estimate - estimate.mean()
        total = np.dot(centered, centered)
        parts = np.dot(terms.target_proj, terms.target_proj) + np.dot(terms.noise, terms.noise)
        assert np.allclose(terms.target_proj + terms.noise, centered, rtol=0, atol=1e-12)
        worst = max(worst, abs(total - parts) / total)
    assert worst < 1e-9


@pytest.mark.parametrize("mean_subtract", [True, False])
def test_si_snr_constant_estimate_agrees_across_paths(float64, rng, mean_subtract):
    target = rng.standard_normal(256)
    estimate = np.full(256, 0.3) if mean_subtract else np.zeros(256)
    tensor_value = si_snr(Tensor(estimate, requires_grad=True), target, mean_subtract=mean_subtract)
    assert si_snr(estimate, target, mean_subtract=mean_subtract) == -60.0
    assert tensor_value.item() == -60.0


def test_silent_estimates_still_backpropagate(float64, rng):
    targets = rng.standard_normal((2, 128))
    estimates = Tensor(np.full((2, 128), 0.25), requires_grad=True)
    loss, _ = pit_loss(estimates, targets)
    assert loss.item() == 60.0
    loss.backward()
    assert np.array_equal(estimates.grad, np.zeros((2, 128)))


def test_si_snr_gradient_is_orthogonal_to_estimate(float64, rng):
    target = rng.standard_normal(200)
    estimate = Tensor(target + 0.5 * rng.standard_normal(200), requires_grad=True)
    si_snr(estimate, target).backward()
    # rescaling the estimate leaves SI-SNR unchanged
    bound = 1e-8 * np.linalg.norm(estimate.grad) * np.linalg.norm(estimate.data)
    assert abs(np.dot(estimate.grad, estimate.data)) < bound


# PIT

def _oracle(estimates, targets):
    scores = si_snr_matrix(estimates, targets)
    count = len(estimates)
    return max(np.mean([scores[i, p[i]] for i in range(count)]) for p in itertools.permutations(range(count)))


@pytest.mark.parametrize("speakers", [2, 3, 4])
def test_pit_matches_exhaustive_search(speakers):
    rng = np.random.default_rng(speakers)
    for _ in range(100 // speakers):
        targets = rng.standard_normal((speakers, 64))
        estimates = rng.standard_normal((speakers, 64))
        score, perm = pit_si_snr(estimates, targets)
        assert np.isclose(score, _oracle(estimates, targets))
        assert sorted(perm) == list(range(speakers))


def test_pit_recovers_a_shuffled_order(rng):
    targets = rng.standard_normal((3, 300))
    order = [2, 0, 1]
    estimates = targets[order] + 0.05 * rng.standard_normal((3, 300))
    _, perm = pit_si_snr(estimates, targets)
    assert list(perm) == order


def test_pit_ties_pick_identity():
    perm, score = best_permutation(np.zeros((3, 3)))
    assert perm == (0, 1, 2)
    assert score == 0.0


def test_pit_speaker_limit():
    with pytest.raises(ConfigError):
        best_permutation(np.zeros((5, 5)))


def test_pit_loss_is_negative_best_score(float64, rng):
    targets = rng.standard_normal((2, 256))
    estimates = Tensor(targets[::-1] + 0.2 * rng.standard_normal((2, 256)), requires_grad=True)
    loss, perm = pit_loss(estimates, targets)
    score, expected = pit_si_snr(estimates.data, targets)
    assert perm == expected == (1, 0)
    assert np.isclose(loss.item(), -score, atol=1e-9)
    loss.backward()
    assert estimates.grad.shape == (2, 256)
    with pytest.raises(InputError):
        pit_loss(estimates, targets[:, :100])


# optimizer

def test_adam_first_step_moves_by_lr(float64):
    p = Tensor([1.0, -2.0, 0.5], requires_grad=True)
    p.grad = np.array([0.3, -4.0, 1e-3])
    state = AdamState()
    adam_step([("p", p)], state, lr=0.01)
    assert state.step == 1
    assert np.allclose(p.data, [0.99, -1.99, 0.49], atol=1e-7)


def test_adam_rejects_non_finite_gradients(float64):
    p = Tensor([1.0, 2.0], requires_grad=True)
    p.grad = np.array([np.nan, 1.0])
    state = AdamState()
    with pytest.raises(NonFiniteError, match="'p'"):
        adam_step([("p", p)], state, lr=0.01)
    assert np.array_equal(p.data, [1.0, 2.0])
    assert state.step == 0 and not state.m


def test_clip_grads_caps_global_norm(float64, caplog):
    a = Tensor(np.zeros(3), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    a.grad = np.full(3, 20.0)
    b.grad = np.full(4, -15.0)
    named = [("a", a), ("b", b)]
    with caplog.at_level(logging.WARNING, logger="TDANet-Desk"):
        factor = clip_grads(named, 5.0)
    assert factor < 1.0
    assert "Clipped gradient norm" in caplog.text
    assert np.isclose(grad_norm(named), 5.0)
    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="TDANet-Desk"):
        assert np.isclose(clip_grads(named, 5.0), 1.0)
    assert not caplog.records


def test_plateau_schedule_halves_then_stops():
    schedule = PlateauSchedule(1e-3, halve_patience=15, stop_patience=30)
    assert schedule.step(1.0)
    for epoch in range(1, 30):
        assert not schedule.step(1.0)
        assert not schedule.stopped
        if epoch == 14:
            assert schedule.lr == 1e-3
    assert schedule.lr == 5e-4
    schedule.step(1.0)
    assert schedule.stopped
    assert schedule.halvings == 1 and schedule.lr == 5e-4


def test_plateau_schedule_round_trips():
    schedule = PlateauSchedule(1e-3)
    schedule.step(2.0)
    schedule.step(3.0)
    restored = PlateauSchedule.from_dict(schedule.to_dict(), 15, 30)
    assert restored == schedule


# data pipeline

def test_prefetcher_preserves_order():
    items = ["a", "b", "c", "d"]
    with BoundedPrefetcher(items, [3, 1, 2, 0], maxsize=2) as prefetcher:
        assert list(prefetcher) == ["d", "b", "c", "a"]


def test_prefetcher_surfaces_loader_errors():
    def load(item):
        if item == 2:
            raise ValueError("bad example")
        return item

    with BoundedPrefetcher([0, 1, 2, 3], range(4), maxsize=1, load=load) as prefetcher:
        seen = []
        with pytest.raises(ValueError, match="bad example"):
            for item in prefetcher:
                seen.append(item)
    assert seen == [0, 1]


# training loop

@pytest.fixture
def tiny_dataset():
    return InMemoryDataset.generate("lrs2_2mix_style", (3, 2, 0), seed=0, duration_s=0.2)


def test_train_loop_writes_checkpoints_and_log(tiny_config, tiny_dataset, output_dir):
    model = TDANet(tiny_config, seed=0)
    result = train_loop(model, tiny_dataset, TrainConfig.create(max_epochs=2, prefetch=2), output_dir)
    assert result.epochs_run == 2
    assert list(result.history["epoch"]) == [1, 2]
    assert np.all(np.isfinite(result.history["val_loss"]))
    assert np.isclose(result.best_val_loss, result.history["val_loss"].min())
    store = CheckpointStore(output_dir)
    assert store.exists("best") and store.exists("last")
    assert store.best() == "best"
    last = store.load("last")
    assert last.extra["epoch"] == 2
    assert any(name.startswith("adam.m/") for name in last.arrays)


def test_train_loop_resumes(tiny_config, tiny_dataset, output_dir):
    train_loop(TDANet(tiny_config, seed=0), tiny_dataset, TrainConfig.create(max_epochs=1), output_dir)
    resumed = train_loop(TDANet(tiny_config, seed=0), tiny_dataset, TrainConfig.create(max_epochs=2),
                         output_dir, resume=True)
    assert list(resumed.history["epoch"]) == [1, 2]
    assert resumed.epochs_run == 2
    assert CheckpointStore(output_dir).load("last").extra["adam_step"] == 6


def test_resume_with_dropout_matches_an_uninterrupted_run(tiny_config, tiny_dataset, tmp_path):
    config = tiny_config.with_updates(dropout=0.2)
    train_loop(TDANet(config, seed=0), tiny_dataset, TrainConfig.create(max_epochs=2), tmp_path / "straight")
    train_loop(TDANet(config, seed=0), tiny_dataset, TrainConfig.create(max_epochs=1), tmp_path / "split")
    train_loop(TDANet(config, seed=0), tiny_dataset, TrainConfig.create(max_epochs=2), tmp_path / "split",
               resume=True)
    straight = CheckpointStore(tmp_path / "straight").load("last")
    split = CheckpointStore(tmp_path / "split").load("last")
    assert straight.extra["dropout_rng"] == split.extra["dropout_rng"]
    for name, values in straight.model_arrays().items():
        assert np.array_equal(values, split.model_arrays()[name]), name


def test_resume_without_last_checkpoint_starts_a_fresh_log(tiny_config, tiny_dataset, output_dir):
    (output_dir / "train_log.csv").write_text("epoch,train_loss,val_loss,lr,wall_time_s\n7,1.0,1.0,0.001,3.0\n")
    result = train_loop(TDANet(tiny_config, seed=0), tiny_dataset, TrainConfig.create(max_epochs=1), output_dir,
                        resume=True)
    assert list(result.history["epoch"]) == [1]


def test_train_loop_needs_validation_data(tiny_config, output_dir):
    dataset = InMemoryDataset.generate("lrs2_2mix_style", (2, 0, 0), seed=0, duration_s=0.2)
    with pytest.raises(ConfigError):
        train_loop(TDANet(tiny_config), dataset, TrainConfig.create(max_epochs=1), output_dir)


def test_memorizing_one_example_lowers_the_loss(tiny_config):
    example = make_example("lrs2_2mix_style", seed=3, duration_s=0.1)
    model = TDANet(tiny_config, seed=0)
    optimizer = Adam(model.params, lr=1e-3)
    config = TrainConfig.create()
    losses = [train_step(model, optimizer, [example], config) for _ in range(50)]
    assert losses[-1] < losses[0]
