"""
Permutation-invariant SI-SNR objective, Adam, gradient clipping, the plateau
learning-rate schedule and the training loop.
"""

import itertools
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .checkpoint import CheckpointStore
from .config import RunConfig, TrainConfig
from .errors import ConfigError, InputError, NonFiniteError
from .logger_config import logger
from .numerics import Tensor
from .tdanet import ParamStore, TDANet, inference_mode

CLAMP_DB = 60.0
PROJECTION_EPS = 1e-8
RATIO_EPS = 1e-20
SILENCE_RTOL = 1e-10
MAX_PIT_SPEAKERS = 4
LOG_COLUMNS = ["epoch", "train_loss", "val_loss", "lr", "wall_time_s"]
_DB_PER_NEPER = 10.0 / math.log(10.0)


@dataclass
class SISNRTerms:
    """estimate = target_proj + noise; value in dB (clamped)."""

    target_proj: np.ndarray
    noise: np.ndarray
    value: float


def _center(x: np.ndarray) -> np.ndarray:
    return x - x.mean(axis=-1, keepdims=True)


def _prepare(values: np.ndarray, mean_subtract: bool) -> Tuple[np.ndarray, bool]:
    """Float64 (optionally centered) copy and whether it carries no signal."""
    raw = np.asarray(values, dtype=np.float64).reshape(-1)
    prepared = _center(raw) if mean_subtract else raw
    energy = float(np.dot(prepared, prepared))
    return prepared, energy <= SILENCE_RTOL * float(np.dot(raw, raw))


def _projection_denominator(energy: float) -> float:
    return energy if energy >= PROJECTION_EPS else PROJECTION_EPS


def si_snr_terms(estimate: np.ndarray, target: np.ndarray, mean_subtract: bool = True,
                 clamp_db: float = CLAMP_DB) -> SISNRTerms:
    """Float64 decomposition of `estimate` against `target`."""
    est, est_silent = _prepare(estimate, mean_subtract)
    tgt, tgt_silent = _prepare(target, mean_subtract)
    if est.shape != tgt.shape:
        raise InputError(f"estimate and target lengths differ ({est.size} vs {tgt.size})")
    if tgt_silent:
        raise InputError("si_snr target is identically zero")
    energy = _projection_denominator(float(np.dot(tgt, tgt)))
    proj = (np.dot(est, tgt) / energy) * tgt
    noise = est - proj
    if est_silent:
        return SISNRTerms(proj, noise, -clamp_db)
    ratio = (np.dot(proj, proj) + RATIO_EPS) / (np.dot(noise, noise) + RATIO_EPS)
    value = float(np.clip(10.0 * np.log10(ratio), -clamp_db, clamp_db))
    return SISNRTerms(proj, noise, value)


def si_snr(estimate: Union[Tensor, np.ndarray], target: Union[Tensor, np.ndarray], mean_subtract: bool = True,
           clamp_db: float = CLAMP_DB) -> Union[Tensor, float]:
    """
    Scale-invariant SNR in dB, clamped to +-clamp_db.

    A Tensor estimate yields a differentiable scalar Tensor; arrays yield a
    float computed in float64. Both paths treat an estimate that is silent
    after mean removal as the -clamp_db floor.
    """
    if not isinstance(estimate, Tensor):
        return si_snr_terms(estimate, target, mean_subtract, clamp_db).value

    tgt_values = target.data if isinstance(target, Tensor) else np.asarray(target)
    est = estimate.reshape(-1)
    if est.shape[0] != tgt_values.size:
        raise InputError(f"estimate and target lengths differ ({est.shape[0]} vs {tgt_values.size})")
    centered, tgt_silent = _prepare(tgt_values, mean_subtract)
    if tgt_silent:
        raise InputError("si_snr target is identically zero")
    _, est_silent = _prepare(est.data, mean_subtract)
    if est_silent:
        # stays on the tape so backward yields zero gradients
        return (est * 0.0).sum() - clamp_db
    if mean_subtract:
        est = est - est.mean()
    tgt = Tensor(centered, dtype=estimate.dtype)
    energy = Tensor(_projection_denominator(float(np.dot(centered, centered))), dtype=estimate.dtype)
    scale = (est * tgt).sum() / energy
    proj = tgt * scale
    noise = est - proj
    ratio = ((proj * proj).sum() + RATIO_EPS) / ((noise * noise).sum() + RATIO_EPS)
    return (ratio.log() * _DB_PER_NEPER).clip(-clamp_db, clamp_db)


def si_snr_matrix(estimates: np.ndarray, targets: np.ndarray, mean_subtract: bool = True,
                  clamp_db: float = CLAMP_DB) -> np.ndarray:
    """scores[i, j] = si_snr(estimates[i], targets[j])."""
    estimates, targets = np.atleast_2d(estimates), np.atleast_2d(targets)
    return np.array([[si_snr_terms(e, t, mean_subtract, clamp_db).value for t in targets] for e in estimates])


def best_permutation(scores: np.ndarray) -> Tuple[Tuple[int, ...], float]:
    """
    Permutation maximizing the mean matched score.

    perm[i] is the target index paired with estimate i. Ties keep the first
    permutation in lexicographic order (the identity comes first).
    """
    count = scores.shape[0]
    if count > MAX_PIT_SPEAKERS:
        raise ConfigError(f"exhaustive PIT supports at most {MAX_PIT_SPEAKERS} speakers, got {count}")
    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(count)):
        score = float(np.mean(scores[np.arange(count), perm]))
        if score > best_score:
            best, best_score = perm, score
    return best, best_score


def _check_pairs(estimates_shape: Tuple[int, ...], targets_shape: Tuple[int, ...]) -> None:
    if len(estimates_shape) != 2 or estimates_shape != targets_shape:
        raise InputError(f"estimates {estimates_shape} and targets {targets_shape} must both be C x T")


def pit_loss(estimates: Tensor, targets: Union[Tensor, np.ndarray], mean_subtract: bool = True,
             clamp_db: float = CLAMP_DB) -> Tuple[Tensor, Tuple[int, ...]]:
    """
    min over permutations of mean_i(-si_snr(est_i, target_perm(i))).

    The permutation is chosen on detached float64 scores; the loss is then
    rebuilt differentiably on the selected pairs only.
    """
    target_values = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    _check_pairs(estimates.shape, target_values.shape)
    scores = si_snr_matrix(estimates.data, target_values, mean_subtract, clamp_db)
    perm, _ = best_permutation(scores)
    total = None
    for i, j in enumerate(perm):
        term = si_snr(estimates[i], target_values[j], mean_subtract, clamp_db)
        total = term if total is None else total + term
    return total * (-1.0 / len(perm)), perm


def pit_si_snr(estimates: np.ndarray, targets: np.ndarray, mean_subtract: bool = True,
               clamp_db: float = CLAMP_DB) -> Tuple[float, Tuple[int, ...]]:
    """Numpy PIT: (best mean SI-SNR, permutation)."""
    estimates, targets = np.atleast_2d(estimates), np.atleast_2d(targets)
    _check_pairs(estimates.shape, targets.shape)
    perm, score = best_permutation(si_snr_matrix(estimates, targets, mean_subtract, clamp_db))
    return score, perm


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def _named(params: Union[ParamStore, Iterable[Tuple[str, Tensor]]]) -> List[Tuple[str, Tensor]]:
    return params.items() if isinstance(params, ParamStore) else list(params)


def adam_step(params: Union[ParamStore, Iterable[Tuple[str, Tensor]]], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """
    One bias-corrected Adam update of every parameter that has a gradient.

    Gradients are checked before anything moves; a NaN/Inf raises
    NonFiniteError naming the parameter and leaves params and state untouched.
    """
    named = [(name, p) for name, p in _named(params) if p.grad is not None]
    for name, p in named:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"gradient of '{name}' is not finite", op="adam_step")
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, p in named:
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if state.m[name].shape != p.shape:
            raise ConfigError(f"optimizer state for '{name}' has shape {state.m[name].shape}, param {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * p.grad * p.grad
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        p.data -= update.astype(p.dtype, copy=False)


class Adam:
    """Adam over a ParamStore; state is checkpointable as adam.m/<name>, adam.v/<name>."""

    def __init__(self, params: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    @classmethod
    def from_config(cls, params: ParamStore, config: TrainConfig) -> "Adam":
        return cls(params, config.lr, config.beta1, config.beta2, config.adam_eps)

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params.items():
            p.zero_grad()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"adam.m/{name}": m for name, m in self.state.m.items()}
        arrays.update({f"adam.v/{name}": v for name, v in self.state.v.items()})
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], step: int) -> None:
        self.state = AdamState(step=step)
        for key, values in arrays.items():
            if key.startswith("adam.m/"):
                self.state.m[key[len("adam.m/"):]] = values.copy()
            elif key.startswith("adam.v/"):
                self.state.v[key[len("adam.v/"):]] = values.copy()


def grad_norm(params: Union[ParamStore, Iterable[Tuple[str, Tensor]]]) -> float:
    total = 0.0
    for _, p in _named(params):
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_grads(params: Union[ParamStore, Iterable[Tuple[str, Tensor]]], max_l2: float = 5.0) -> float:
    """Scale all gradients so their global L2 norm is at most `max_l2`; returns the factor."""
    named = _named(params)
    norm = grad_norm(named)
    if not norm > max_l2:
        return 1.0
    factor = max_l2 / norm
    for _, p in named:
        if p.grad is not None:
            p.grad *= factor
    logger.warning(f"Clipped gradient norm {norm:.3f} -> {max_l2}")
    return factor


@dataclass
class PlateauSchedule:
    """
    Halve the learning rate after every `halve_patience` consecutive
    non-improving epochs; stop after `stop_patience`. Only a strictly lower
    validation loss counts as an improvement.
    """

    lr: float
    halve_patience: int = 15
    stop_patience: int = 30
    best: float = math.inf
    since_best: int = 0
    halvings: int = 0
    stopped: bool = False

    def step(self, val_loss: float) -> bool:
        """Record one epoch; returns True when it set a new best."""
        if val_loss < self.best:
            self.best = val_loss
            self.since_best = 0
            return True
        self.since_best += 1
        if self.since_best >= self.stop_patience:
            self.stopped = True
            logger.info(f"Early stop: no improvement for {self.since_best} epochs (best {self.best:.4f})")
        elif self.since_best % self.halve_patience == 0:
            self.lr /= 2.0
            self.halvings += 1
            logger.info(f"No improvement for {self.since_best} epochs; lr halved to {self.lr:.3g}")
        return False

    def to_dict(self) -> Dict[str, Any]:
        return {"lr": self.lr, "best": self.best, "since_best": self.since_best, "halvings": self.halvings,
                "stopped": self.stopped}

    @classmethod
    def from_dict(cls, values: Dict[str, Any], halve_patience: int, stop_patience: int) -> "PlateauSchedule":
        return cls(values["lr"], halve_patience, stop_patience, float(values["best"]), int(values["since_best"]),
                   int(values["halvings"]), bool(values["stopped"]))


_DONE = object()


class BoundedPrefetcher:
    """
    Background loader feeding a bounded FIFO queue.

    The loader thread blocks while the queue is full; the consumer iterates
    in order. Loader exceptions are re-raised in the consumer.
    """

    def __init__(self, items: Sequence[Any], order: Iterable[int], maxsize: int = 4,
                 load: Optional[Callable[[Any], Any]] = None):
        self.items = items
        self.order = list(order)
        self.load = load or (lambda item: item)
        self.queue: "queue.Queue" = queue.Queue(maxsize=maxsize)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="prefetch", daemon=True)

    def _put(self, value: Any) -> bool:
        while not self._stop.is_set():
            try:
                self.queue.put(value, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self) -> None:
        try:
            for index in self.order:
                if not self._put(self.load(self.items[index])):
                    return
        except Exception as e:  # surfaced to the consumer
            self._put(e)
            return
        self._put(_DONE)

    def __enter__(self) -> "BoundedPrefetcher":
        self._thread.start()
        return self

    def __iter__(self) -> Iterator[Any]:
        while True:
            value = self.queue.get()
            if value is _DONE:
                return
            if isinstance(value, Exception):
                raise value
            yield value

    def __exit__(self, *exc) -> None:
        self._stop.set()
        self._thread.join(timeout=5.0)


def example_loss(model: TDANet, example, config: TrainConfig) -> Tuple[Tensor, Tuple[int, ...]]:
    mixture = Tensor(np.asarray(example.mixture).reshape(1, -1), dtype=model.encoder.conv.weight.dtype)
    estimates = model(mixture)
    return pit_loss(estimates, np.asarray(example.sources), config.mean_subtract, config.clamp_db)


def train_step(model: TDANet, optimizer: Adam, batch: Sequence[Any], config: TrainConfig) -> float:
    """Accumulate the mean PIT loss of `batch`, clip and update; returns the batch loss."""
    optimizer.zero_grad()
    total = 0.0
    for example in batch:
        loss, _ = example_loss(model, example, config)
        (loss * (1.0 / len(batch))).backward()
        total += loss.item()
    clip_grads(optimizer.params, config.grad_clip_l2)
    optimizer.step()
    return total / len(batch)


def validation_loss(model: TDANet, examples: Sequence[Any], config: TrainConfig) -> float:
    losses = []
    with inference_mode(model):
        for example in examples:
            loss, _ = example_loss(model, example, config)
            losses.append(loss.item())
    return float(np.mean(losses))


@dataclass
class TrainResult:
    history: pd.DataFrame
    best_val_loss: float
    epochs_run: int
    stopped_early: bool
    checkpoint_dir: Path


def _batches(items: Iterable[Any], size: int) -> Iterator[List[Any]]:
    batch: List[Any] = []
    for item in items:
        batch.append(item)
        if len(batch) == size:
            yield batch
            batch = []
    if batch:
        yield batch


def train_loop(model: TDANet, dataset, config: TrainConfig, out_dir: Union[str, Path],
               resume: bool = False, run_config: Optional[RunConfig] = None) -> TrainResult:
    """
    Train until `max_epochs` or the plateau schedule stops.

    Args:
        model: Network to train (its ParamStore is updated in place)
        dataset: Object with `split(name)` returning the "train" and "val" examples
        config: Optimizer, schedule and loss settings
        out_dir: Receives `train_log.csv`, the `best`/`last` checkpoints and the BEST marker
        resume: Continue from `out_dir/last` (params, Adam moments, lr, counters, epoch, dropout stream)
        run_config: Stored in checkpoints for provenance

    Returns:
        TrainResult with the per-epoch history
    """
    train_set, val_set = dataset.split("train"), dataset.split("val")
    if len(train_set) == 0:
        raise ConfigError("training split is empty")
    if len(val_set) == 0:
        raise ConfigError("validation split is empty")

    out_dir = Path(out_dir)
    store = CheckpointStore(out_dir)
    log_path = out_dir / "train_log.csv"
    params = model.params
    optimizer = Adam.from_config(params, config)
    schedule = PlateauSchedule(config.lr, config.lr_halve_patience, config.early_stop_patience)
    start_epoch = 1

    if resume and store.exists("last"):
        last = store.load("last")
        params.load_arrays(last.model_arrays())
        optimizer.load_state_arrays(last.arrays, last.extra["adam_step"])
        schedule = PlateauSchedule.from_dict(last.extra["schedule"], config.lr_halve_patience,
                                             config.early_stop_patience)
        if "dropout_rng" in last.extra:
            model.dropout_rng.bit_generator.state = last.extra["dropout_rng"]
        start_epoch = int(last.extra["epoch"]) + 1
        logger.info(f"Resuming from epoch {start_epoch} (lr {schedule.lr:.3g}, best {schedule.best:.4f})")
    elif log_path.exists():
        if resume:
            logger.warning(f"No 'last' checkpoint in {out_dir}; starting fresh and discarding {log_path.name}")
        log_path.unlink()

    provenance = run_config.model_dump() if run_config is not None else None
    start_time = time.perf_counter()
    epoch = start_epoch - 1
    last_epoch = epoch if schedule.stopped else config.max_epochs
    for epoch in range(start_epoch, last_epoch + 1):
        model.train()
        optimizer.lr = schedule.lr
        epoch_lr = schedule.lr
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        losses: List[float] = []
        with BoundedPrefetcher(train_set, order, config.prefetch) as examples:
            progress = tqdm(_batches(examples, config.batch_size), total=-(-len(order) // config.batch_size),
                            desc=f"epoch {epoch}", leave=False, disable=None)
            for batch in progress:
                try:
                    losses.append(train_step(model, optimizer, batch, config))
                except NonFiniteError as e:
                    logger.warning(f"Epoch {epoch} aborted: {e}")
                    break
                progress.set_postfix(loss=f"{losses[-1]:.3f}")

        val_loss = validation_loss(model, val_set, config)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        improved = schedule.step(val_loss)
        extra = {"epoch": epoch, "adam_step": optimizer.state.step, "schedule": schedule.to_dict(),
                 "train_loss": train_loss, "val_loss": val_loss, "run_config": provenance,
                 "dropout_rng": model.dropout_rng.bit_generator.state}
        if improved:
            store.save("best", params.arrays(), model.config, model.seed, extra)
            store.mark_best("best")
        store.save("last", {**params.arrays(), **optimizer.state_arrays()}, model.config, model.seed, extra)

        row = pd.DataFrame([[epoch, train_loss, val_loss, epoch_lr, time.perf_counter() - start_time]],
                           columns=LOG_COLUMNS)
        row.to_csv(log_path, mode="a", header=not log_path.exists(), index=False)
        logger.info(f"Epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f} lr {epoch_lr:.3g}"
                    f"{' (best)' if improved else ''}")
        if schedule.stopped:
            break

    history = pd.read_csv(log_path) if log_path.exists() else pd.DataFrame(columns=LOG_COLUMNS)
    return TrainResult(history, schedule.best, epoch, schedule.stopped, out_dir)
