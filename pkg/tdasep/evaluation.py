"""
Separation quality (SI-SNRi, simplified SDRi), static complexity and the
single-threaded CPU real-time-factor benchmark.

Metrics are PIT-aligned per example: the pairing that maximizes the metric
is chosen first, then improvements are taken against the unprocessed mixture
on that pairing.
"""

import json
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from threadpoolctl import threadpool_limits
from tqdm import tqdm

from .checkpoint import config_hash
from .config import ModelConfig
from .errors import ConfigError, InputError
from .logger_config import logger
from .numerics import Tensor, get_default_dtype, no_grad
from .presets import AblationPresets, apply_ablations
from .tdanet import TDANet, count_macs, count_params, inference_mode, mac_breakdown, param_breakdown
from .training import CLAMP_DB, RATIO_EPS, best_permutation, si_snr_matrix

SDR_LABEL = "SDRi(simplified)"
ALIGNMENT = "per-example PIT"
ESTIMATE_MODES = ("model", "oracle", "mixture")
RTF_REPEATS = 100
RTF_PARITY_REPEATS = 1000
RTF_TRACKS = 10


def sdr(estimate: np.ndarray, target: np.ndarray, scale_align: bool = True, clamp_db: float = CLAMP_DB) -> float:
    """
    10*log10(||target||^2 / ||estimate - target||^2), clamped.

    No allowed-distortion filter is applied. With `scale_align` (the default)
    the target is first rescaled by the least-squares gain onto the estimate,
    so the score does not depend on the estimate's overall gain.
    """
    est = np.asarray(estimate, dtype=np.float64).reshape(-1)
    tgt = np.asarray(target, dtype=np.float64).reshape(-1)
    if est.shape != tgt.shape:
        raise InputError(f"estimate and target lengths differ ({est.size} vs {tgt.size})")
    energy = float(np.dot(tgt, tgt))
    if energy == 0.0:
        raise InputError("sdr target is identically zero")
    if scale_align:
        tgt = tgt * (np.dot(est, tgt) / energy)
        energy = float(np.dot(tgt, tgt))
        if energy == 0.0:
            return -clamp_db
    err = est - tgt
    ratio = (energy + RATIO_EPS) / (float(np.dot(err, err)) + RATIO_EPS)
    return float(np.clip(10.0 * np.log10(ratio), -clamp_db, clamp_db))


def sdr_matrix(estimates: np.ndarray, targets: np.ndarray, clamp_db: float = CLAMP_DB) -> np.ndarray:
    return np.array([[sdr(e, t, scale_align=True, clamp_db=clamp_db) for t in targets] for e in estimates])


def _pairs(estimates: np.ndarray, targets: np.ndarray, mixture: np.ndarray) -> Tuple[np.ndarray, np.ndarray,
                                                                                     np.ndarray]:
    estimates = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    mixture = np.asarray(mixture, dtype=np.float64).reshape(-1)
    if estimates.shape != targets.shape or targets.shape[1] != mixture.size:
        raise InputError(f"estimates {estimates.shape}, targets {targets.shape} and mixture ({mixture.size},) "
                         "must agree (C x T, C x T, T)")
    return estimates, targets, mixture


def _improvement(scores: np.ndarray, baseline: np.ndarray) -> Tuple[float, Tuple[int, ...]]:
    perm, _ = best_permutation(scores)
    gains = [scores[i, j] - baseline[j] for i, j in enumerate(perm)]
    return float(np.mean(gains)), perm


def si_snri(estimates: np.ndarray, targets: np.ndarray, mixture: np.ndarray, mean_subtract: bool = True,
            clamp_db: float = CLAMP_DB) -> float:
    """mean_i[si_snr(est_i, tgt_perm(i)) - si_snr(mixture, tgt_perm(i))] on the PIT-optimal pairing."""
    return si_snri_aligned(estimates, targets, mixture, mean_subtract, clamp_db)[0]


def si_snri_aligned(estimates: np.ndarray, targets: np.ndarray, mixture: np.ndarray, mean_subtract: bool = True,
                    clamp_db: float = CLAMP_DB) -> Tuple[float, Tuple[int, ...]]:
    estimates, targets, mixture = _pairs(estimates, targets, mixture)
    scores = si_snr_matrix(estimates, targets, mean_subtract, clamp_db)
    baseline = si_snr_matrix(mixture[None, :], targets, mean_subtract, clamp_db)[0]
    return _improvement(scores, baseline)


def sdri(estimates: np.ndarray, targets: np.ndarray, mixture: np.ndarray, clamp_db: float = CLAMP_DB) -> float:
    """Simplified SDR improvement over the mixture, PIT-aligned."""
    estimates, targets, mixture = _pairs(estimates, targets, mixture)
    scores = sdr_matrix(estimates, targets, clamp_db)
    baseline = sdr_matrix(mixture[None, :], targets, clamp_db)[0]
    return _improvement(scores, baseline)[0]


class ExampleMetrics(BaseModel):
    index: int
    seed: Optional[int] = None
    si_snri_db: float
    sdri_db: float
    permutation: List[int]


class RTFResult(BaseModel):
    """Seconds of processing per second of audio, single-threaded."""

    mean_s: float
    std_s: float
    repeats: int
    warmup: int
    tracks: int
    track_seconds: float
    threads: int = 1


class MetricsReport(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    config_hash: Optional[str] = None
    params_m: Optional[float] = None
    macs_g_per_s: Optional[float] = None
    si_snri_db: Optional[float] = None
    sdri_db: Optional[float] = None
    sdr_label: str = SDR_LABEL
    alignment: str = ALIGNMENT
    estimates: Optional[str] = None
    examples: List[ExampleMetrics] = []
    param_breakdown: Dict[str, int] = {}
    mac_breakdown: Dict[str, int] = {}
    rtf: Optional[RTFResult] = None
    environment: Dict[str, Any] = {}

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True, indent=2) + "\n"

    def per_example_frame(self) -> pd.DataFrame:
        columns = ["index", "seed", "si_snri_db", "sdri_db", "permutation"]
        rows = [{**e.model_dump(), "permutation": " ".join(map(str, e.permutation))} for e in self.examples]
        return pd.DataFrame(rows, columns=columns)

    def to_text(self) -> str:
        rows: List[Tuple[str, str]] = []
        if self.params_m is not None:
            rows.append(("params (M)", f"{self.params_m:.3f}"))
        if self.macs_g_per_s is not None:
            rows.append(("MACs (G/s)", f"{self.macs_g_per_s:.3f}"))
        if self.si_snri_db is not None:
            rows.append(("SI-SNRi (dB)", f"{self.si_snri_db:.3f}"))
        if self.sdri_db is not None:
            rows.append((f"{self.sdr_label} (dB)", f"{self.sdri_db:.3f}"))
        if self.examples:
            rows.append(("examples", str(len(self.examples))))
            rows.append(("alignment", self.alignment))
        if self.estimates:
            rows.append(("estimates", self.estimates))
        if self.rtf is not None:
            rows.append(("CPU RTF (s)", f"{self.rtf.mean_s:.4f} +- {self.rtf.std_s:.4f}"))
            rows.append(("RTF protocol", f"{self.rtf.tracks} x {self.rtf.track_seconds:g} s, "
                                         f"{self.rtf.repeats} repeats, {self.rtf.threads} thread"))
        if self.config_hash:
            rows.append(("config hash", self.config_hash[:16]))
        for key in sorted(self.environment):
            rows.append((key, str(self.environment[key])))
        lines = _aligned(rows)
        if self.param_breakdown:
            lines += ["", "component                 params          MACs/s"]
            for name, count in self.param_breakdown.items():
                lines.append(f"{name:<24}{count:>8,}{self.mac_breakdown.get(name, 0):>16,}")
        return "\n".join(lines) + "\n"


def _aligned(rows: Sequence[Tuple[str, str]]) -> List[str]:
    width = max((len(key) for key, _ in rows), default=0)
    return [f"{key:<{width}}  {value}" for key, value in rows]


def environment(threads: Optional[int] = None) -> Dict[str, Any]:
    return {
        "host": platform.node(),
        "machine": platform.machine(),
        "numpy": np.__version__,
        "precision": np.dtype(get_default_dtype()).name,
        "threads": threads if threads is not None else int(os.getenv("TDANET_THREADS", "0")) or "default",
    }


def profile(config: ModelConfig, seconds: float = 1.0, breakdown: bool = False) -> MetricsReport:
    """Static parameter and MAC counts; no model is built."""
    report = MetricsReport(
        config_hash=config_hash(config),
        params_m=count_params(config) / 1e6,
        macs_g_per_s=count_macs(config, seconds) / 1e9 / seconds,
        environment=environment(),
    )
    if breakdown:
        report.param_breakdown = dict(param_breakdown(config))
        report.mac_breakdown = dict(mac_breakdown(config, seconds))
    return report


def ablation_grid(base: ModelConfig, seconds: float = 1.0) -> pd.DataFrame:
    """Static params/MACs of the base config under every ablation preset."""
    variants: List[Tuple[str, ModelConfig]] = [("full", base)]
    variants += [(name, apply_ablations(base, name)) for name in AblationPresets.names()]
    variants.append(("no_ga,no_la", apply_ablations(base, "no_ga,no_la")))
    rows = []
    for name, config in variants:
        rows.append({"variant": name, "params_m": count_params(config) / 1e6,
                     "macs_g_per_s": count_macs(config, seconds) / 1e9 / seconds})
    return pd.DataFrame(rows, columns=["variant", "params_m", "macs_g_per_s"])


def cpu_rtf(model: TDANet, n_tracks: int = RTF_TRACKS, repeats: int = RTF_REPEATS, warmup: int = 3,
            track_seconds: float = 1.0, seed: int = 0) -> RTFResult:
    """
    Real-time factor: mean over repeats of (wall time for n_tracks tracks) / n_tracks / track_seconds.

    BLAS/OpenMP pools are limited to one thread and the model runs without a
    tape for the whole measurement. Track synthesis happens before timing.
    """
    if repeats < 1 or n_tracks < 1:
        raise ConfigError("cpu_rtf needs at least one repeat and one track")
    samples = int(round(track_seconds * model.config.sample_rate))
    rng = np.random.default_rng(seed)
    dtype = model.encoder.conv.weight.dtype
    tracks = [Tensor((0.1 * rng.standard_normal((1, samples))).astype(dtype)) for _ in range(n_tracks)]

    timings = []
    with threadpool_limits(limits=1), inference_mode(model):
        for _ in range(warmup):
            for track in tracks:
                model.forward(track)
        for _ in tqdm(range(repeats), desc="rtf", leave=False, disable=None):
            start = time.perf_counter()
            for track in tracks:
                model.forward(track)
            timings.append((time.perf_counter() - start) / n_tracks / track_seconds)
    result = RTFResult(mean_s=float(np.mean(timings)), std_s=float(np.std(timings)), repeats=repeats,
                       warmup=warmup, tracks=n_tracks, track_seconds=track_seconds)
    logger.info(f"CPU RTF {result.mean_s:.4f} +- {result.std_s:.4f} s over {repeats} repeats")
    return result


Estimator = Callable[[Any], np.ndarray]


def _estimator(mode: str, model: Optional[TDANet]) -> Estimator:
    if mode == "oracle":
        return lambda example: np.asarray(example.sources)
    if mode == "mixture":
        return lambda example: np.repeat(np.asarray(example.mixture).reshape(1, -1), example.sources.shape[0], 0)
    if mode != "model":
        raise ConfigError(f"Unknown estimates mode '{mode}'. Expected one of {', '.join(ESTIMATE_MODES)}")
    if model is None:
        raise ConfigError("estimates mode 'model' needs a model")

    def run(example) -> np.ndarray:
        if example.sample_rate != model.config.sample_rate:
            raise InputError(f"example is {example.sample_rate} Hz but the model expects "
                             f"{model.config.sample_rate} Hz")
        with no_grad():
            return model.forward(np.asarray(example.mixture)).data

    return run


def evaluate_dataset(examples: Sequence[Any], estimates: str = "model", model: Optional[TDANet] = None,
                     workers: Optional[int] = None, mean_subtract: bool = True,
                     clamp_db: float = CLAMP_DB) -> MetricsReport:
    """
    Per-example SI-SNRi/SDRi aggregated into a MetricsReport.

    Args:
        examples: MixtureExample sequence (e.g. a dataset split)
        estimates: "model", "oracle" (targets as estimates) or "mixture" (passthrough)
        model: Network for "model" mode
        workers: Threads across examples (default $TDANET_THREADS or 4)
        mean_subtract: SI-SNR zero-mean convention
        clamp_db: Metric clamp shared with training
    """
    if len(examples) == 0:
        raise InputError("nothing to evaluate: the split is empty")
    estimate = _estimator(estimates, model)

    def score(index: int) -> ExampleMetrics:
        example = examples[index]
        predicted = estimate(example)
        improvement, perm = si_snri_aligned(predicted, example.sources, example.mixture, mean_subtract, clamp_db)
        return ExampleMetrics(index=index, seed=getattr(example, "seed", None), si_snri_db=improvement,
                              sdri_db=sdri(predicted, example.sources, example.mixture, clamp_db),
                              permutation=list(perm))

    workers = workers or int(os.getenv("TDANET_THREADS", "4"))
    with inference_mode(model) if model is not None else nullcontext(), \
            ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(tqdm(pool.map(score, range(len(examples))), total=len(examples), desc="eval",
                         leave=False, disable=None))

    report = MetricsReport(
        si_snri_db=float(np.mean([r.si_snri_db for r in rows])),
        sdri_db=float(np.mean([r.sdri_db for r in rows])),
        estimates=estimates,
        examples=rows,
        environment=environment(workers),
    )
    if model is not None:
        report.config_hash = config_hash(model.config)
        report.params_m = count_params(model.config) / 1e6
        report.macs_g_per_s = count_macs(model.config) / 1e9
    logger.info(f"Evaluated {len(rows)} examples ({estimates}): SI-SNRi {report.si_snri_db:.3f} dB, "
                f"{SDR_LABEL} {report.sdri_db:.3f} dB")
    return report
