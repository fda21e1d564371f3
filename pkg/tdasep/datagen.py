"""
Synthetic sources, SNR-controlled mixing and dataset simulation.

Every example owns a seed derived from the dataset seed, so a manifest plus
its seed determine all audio bytes. Recipes:

    lrs2_2mix_style   two sources, SNR U[-5, 5] dB, 2 s
    wham_style        as above plus band-limited noise at speech/noise SNR U[-6, 3] dB
    libri2mix_style   sources at RMS U[-33, -25] dBFS, noise at U[-38, -30] dBFS, 3 s
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import signal
from tqdm import tqdm

from .audio_io import read_wav, write_wav
from .errors import ConfigError, InputError
from .logger_config import logger

SAMPLE_RATE = 16000
MIN_DURATION_S = 0.1
PEAK = 0.9
SOURCE_KINDS = ("harmonic_voice", "chirp", "noise_burst")
SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ["mixture", "src1", "src2", "noise", "snr_db", "split", "seed"]
MANIFEST_NAME = "manifest.csv"

__all__ = [
    "MixtureExample", "DatasetManifest", "Recipe", "RECIPES", "SeparationDataset", "InMemoryDataset",
    "synth_source", "draw_voice_params", "estimate_f0", "mix_at_snr", "make_example", "simulate_dataset",
    "read_wav", "write_wav",
]


@dataclass(frozen=True)
class Recipe:
    name: str
    duration_s: float
    snr_range: Tuple[float, float] = (-5.0, 5.0)
    noise_snr_range: Optional[Tuple[float, float]] = None
    source_dbfs: Optional[Tuple[float, float]] = None
    noise_dbfs: Optional[Tuple[float, float]] = None
    note: str = ""


RECIPES: Dict[str, Recipe] = {
    "lrs2_2mix_style": Recipe("lrs2_2mix_style", 2.0, note="two sources mixed at SNR U[-5, 5] dB on full-utterance energy"),
    "wham_style": Recipe("wham_style", 2.0, noise_snr_range=(-6.0, 3.0),
                         note="speaker SNR U[-5, 5] dB; band-limited noise at speech/noise SNR U[-6, 3] dB"),
    "libri2mix_style": Recipe("libri2mix_style", 3.0, source_dbfs=(-33.0, -25.0), noise_dbfs=(-38.0, -30.0),
                              note="loudness approximated by RMS dBFS in place of LUFS; "
                                   "sources U[-33, -25], noise U[-38, -30]"),
}


def get_recipe(name: str) -> Recipe:
    if name not in RECIPES:
        raise ConfigError(f"Unknown recipe '{name}'. Available: {', '.join(RECIPES)}")
    return RECIPES[name]


@dataclass
class MixtureExample:
    """Mixture y, sources (C x T), optional noise and provenance."""

    mixture: np.ndarray
    sources: np.ndarray
    noise: Optional[np.ndarray]
    snr_db: float
    sample_rate: int
    seed: int
    recipe: str = ""
    gain: float = 1.0
    noise_snr_db: Optional[float] = None

    def __post_init__(self):
        self.sources = np.atleast_2d(self.sources)
        if self.sources.shape[0] < 2:
            raise InputError(f"a mixture needs at least 2 sources, got {self.sources.shape[0]}")
        lengths = {self.mixture.shape[-1], self.sources.shape[1]}
        if self.noise is not None:
            lengths.add(self.noise.shape[-1])
        if len(lengths) != 1:
            raise InputError(f"mixture, sources and noise lengths differ: {sorted(lengths)}")

    @property
    def num_speakers(self) -> int:
        return self.sources.shape[0]

    @property
    def duration_s(self) -> float:
        return self.mixture.shape[-1] / self.sample_rate


@dataclass(frozen=True)
class VoiceParams:
    f0: float
    amplitudes: Tuple[float, ...]
    phases: Tuple[float, ...]

    @property
    def harmonics(self) -> int:
        return len(self.amplitudes)


def _voice_params(rng: np.random.Generator) -> VoiceParams:
    f0 = float(rng.uniform(80.0, 300.0))
    count = int(rng.integers(3, 9))
    amplitudes = tuple(float(a) / k for k, a in enumerate(rng.uniform(0.5, 1.0, count), start=1))
    phases = tuple(float(p) for p in rng.uniform(0.0, 2 * np.pi, count))
    return VoiceParams(f0, amplitudes, phases)


def draw_voice_params(seed: int) -> VoiceParams:
    """The harmonic parameters synth_source("harmonic_voice", ..., seed) uses."""
    return _voice_params(np.random.default_rng(seed))


def _slow_envelope(rng: np.random.Generator, samples: int, sample_rate: int, rate_hz: float = 4.0) -> np.ndarray:
    points = max(2, int(samples / sample_rate * rate_hz) + 2)
    knots = rng.uniform(0.2, 1.0, points)
    return np.interp(np.linspace(0, points - 1, samples), np.arange(points), knots)


def _peak_normalize(wave: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(wave))
    return wave * (PEAK / peak) if peak > 0 else wave


def synth_source(kind: str, duration_s: float, seed: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """
    Deterministic synthetic source peak-normalized to 0.9.

    Args:
        kind: harmonic_voice (3-8 harmonics of f0 in [80, 300] Hz under a slow
            envelope), chirp (swept sine) or noise_burst (gated band-pass noise)
        duration_s: Length in seconds (>= 0.1)
        seed: Source seed
        sample_rate: Hz

    Returns:
        float32 waveform
    """
    if duration_s < MIN_DURATION_S:
        raise InputError(f"source duration {duration_s} s is below the {MIN_DURATION_S} s minimum")
    if kind not in SOURCE_KINDS:
        raise ConfigError(f"Unknown source kind '{kind}'. Expected one of {', '.join(SOURCE_KINDS)}")
    rng = np.random.default_rng(seed)
    samples = int(round(duration_s * sample_rate))
    t = np.arange(samples) / sample_rate

    if kind == "harmonic_voice":
        params = _voice_params(rng)
        wave = np.zeros(samples)
        for k, (amplitude, phase) in enumerate(zip(params.amplitudes, params.phases), start=1):
            wave += amplitude * np.sin(2 * np.pi * k * params.f0 * t + phase)
        wave *= _slow_envelope(rng, samples, sample_rate)
    elif kind == "chirp":
        f_start = rng.uniform(100.0, 400.0)
        f_end = rng.uniform(800.0, 3000.0)
        method = ("linear", "logarithmic", "quadratic")[int(rng.integers(3))]
        wave = signal.chirp(t, f0=f_start, t1=t[-1], f1=f_end, method=method)
        wave *= _slow_envelope(rng, samples, sample_rate)
    else:
        low = rng.uniform(200.0, 800.0)
        high = rng.uniform(1500.0, 4000.0)
        sos = signal.butter(4, [low, high], btype="bandpass", fs=sample_rate, output="sos")
        wave = signal.sosfilt(sos, rng.standard_normal(samples))
        gate = (_slow_envelope(rng, samples, sample_rate, rate_hz=3.0) > 0.5).astype(np.float64)
        window = max(1, sample_rate // 200)
        wave *= np.convolve(gate, np.ones(window) / window, mode="same")
    return _peak_normalize(wave).astype(np.float32)


def _band_noise(rng: np.random.Generator, samples: int, sample_rate: int) -> np.ndarray:
    sos = signal.butter(4, [100.0, 6000.0], btype="bandpass", fs=sample_rate, output="sos")
    return _peak_normalize(signal.sosfilt(sos, rng.standard_normal(samples))).astype(np.float32)


def estimate_f0(wave: np.ndarray, sample_rate: int = SAMPLE_RATE, fmin: float = 60.0, fmax: float = 400.0) -> float:
    """
    Pitch estimate from the biased autocorrelation.

    The shortest-lag peak within 85% of the largest one is taken (guards
    against octave errors), then refined by parabolic interpolation.
    """
    x = np.asarray(wave, dtype=np.float64)
    x = x - x.mean()
    corr = signal.correlate(x, x, mode="full", method="fft")[x.size - 1:]
    lo, hi = max(1, int(sample_rate / fmax)), min(int(sample_rate / fmin), x.size - 2)
    if hi <= lo:
        raise InputError(f"signal of {x.size} samples is too short for pitch estimation")
    segment = corr[lo:hi + 1]
    peaks, _ = signal.find_peaks(segment, height=0.85 * segment.max())
    lag = lo + int(peaks[0] if peaks.size else np.argmax(segment))
    left, centre, right = corr[lag - 1], corr[lag], corr[lag + 1]
    denom = left - 2 * centre + right
    shift = 0.5 * (left - right) / denom if denom != 0 else 0.0
    return float(sample_rate / (lag + shift))


def _energy(x: np.ndarray) -> float:
    return float(np.sum(np.square(x, dtype=np.float64)))


def mix_at_snr(s1: np.ndarray, s2: np.ndarray, snr_db: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Scale s2 so 10*log10(||s1||^2 / ||g*s2||^2) == snr_db and mix.

    Returns:
        Tuple of (mixture, s1, scaled s2), all float32; mixture == s1 + scaled s2
    """
    s1 = np.asarray(s1, dtype=np.float32)
    s2 = np.asarray(s2, dtype=np.float32)
    if s1.shape != s2.shape:
        raise InputError(f"sources differ in length ({s1.shape} vs {s2.shape})")
    e1, e2 = _energy(s1), _energy(s2)
    if e1 == 0.0 or e2 == 0.0:
        raise InputError("cannot mix a zero-energy source")
    scale = np.sqrt(e1 / (e2 * 10.0 ** (snr_db / 10.0)))
    scaled = (s2.astype(np.float64) * scale).astype(np.float32)
    return s1 + scaled, s1, scaled


def _scale_to_snr(reference: np.ndarray, other: np.ndarray, snr_db: float) -> np.ndarray:
    scale = np.sqrt(_energy(reference) / (_energy(other) * 10.0 ** (snr_db / 10.0)))
    return (other.astype(np.float64) * scale).astype(np.float32)


def _scale_to_dbfs(wave: np.ndarray, dbfs: float) -> np.ndarray:
    rms = np.sqrt(_energy(wave) / wave.size)
    return (wave.astype(np.float64) * (10.0 ** (dbfs / 20.0) / rms)).astype(np.float32)


def make_example(recipe: Union[str, Recipe], seed: int, duration_s: Optional[float] = None,
                 sample_rate: int = SAMPLE_RATE, kinds: Sequence[str] = ("harmonic_voice", "harmonic_voice")
                 ) -> MixtureExample:
    """Build one MixtureExample in memory."""
    recipe = get_recipe(recipe) if isinstance(recipe, str) else recipe
    duration_s = duration_s or recipe.duration_s
    children = np.random.SeedSequence(seed).spawn(len(kinds) + 2)
    draw = np.random.default_rng(children[-1])
    sources = [synth_source(kind, duration_s, int(child.generate_state(1)[0]), sample_rate)
               for kind, child in zip(kinds, children)]
    noise = None
    noise_snr = None

    if recipe.source_dbfs is not None:
        sources = [_scale_to_dbfs(s, draw.uniform(*recipe.source_dbfs)) for s in sources]
        snr_db = 10.0 * np.log10(_energy(sources[0]) / _energy(sources[1]))
    else:
        snr_db = float(draw.uniform(*recipe.snr_range))
        _, first, second = mix_at_snr(sources[0], sources[1], snr_db)
        sources[0], sources[1] = first, second
        for i in range(2, len(sources)):
            sources[i] = _scale_to_snr(sources[0], sources[i], float(draw.uniform(*recipe.snr_range)))

    if recipe.noise_snr_range is not None or recipe.noise_dbfs is not None:
        raw_noise = _band_noise(np.random.default_rng(children[-2]), sources[0].size, sample_rate)
        if recipe.noise_dbfs is not None:
            noise = _scale_to_dbfs(raw_noise, draw.uniform(*recipe.noise_dbfs))
            noise_snr = 10.0 * np.log10(_energy(sum(sources)) / _energy(noise))
        else:
            noise_snr = float(draw.uniform(*recipe.noise_snr_range))
            noise = _scale_to_snr(sum(s.astype(np.float64) for s in sources), raw_noise, noise_snr)

    stacked = np.stack(sources)
    mixture = _mix(stacked, noise)
    gain = 1.0
    peak = float(np.max(np.abs(mixture)))
    if peak > 1.0:
        gain = PEAK / peak
        stacked = (stacked.astype(np.float64) * gain).astype(np.float32)
        noise = (noise.astype(np.float64) * gain).astype(np.float32) if noise is not None else None
        mixture = _mix(stacked, noise)
        logger.debug(f"Example seed={seed}: mixture peak {peak:.3f} rescaled by {gain:.4f}")
    return MixtureExample(mixture, stacked, noise, float(snr_db), sample_rate, seed, recipe.name, gain, noise_snr)


def _mix(sources: np.ndarray, noise: Optional[np.ndarray]) -> np.ndarray:
    mixture = sources[0].copy()
    for source in sources[1:]:
        mixture = mixture + source
    if noise is not None:
        mixture = mixture + noise
    return mixture


def row_seeds(seed: int, count: int) -> List[int]:
    """Distinct per-example seeds spawned from one dataset seed."""
    seeds = [int(child.generate_state(1, dtype=np.uint64)[0]) for child in np.random.SeedSequence(seed).spawn(count)]
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"seed collision while spawning {count} example seeds from {seed}")
    return seeds


def _split_plan(counts: Union[Mapping[str, int], Sequence[int]]) -> List[str]:
    if not isinstance(counts, Mapping):
        counts = dict(zip(SPLITS, counts))
    plan = []
    for split in SPLITS:
        count = int(counts.get(split, 0))
        if count < 0:
            raise ConfigError(f"negative count for split '{split}'")
        plan.extend([split] * count)
    unknown = set(counts) - set(SPLITS)
    if unknown:
        raise ConfigError(f"unknown splits {sorted(unknown)}; expected {', '.join(SPLITS)}")
    return plan


@dataclass
class DatasetManifest:
    """Rows (mixture, src1, src2, noise, snr_db, split, seed) relative to `root`, plus recipe metadata."""

    rows: pd.DataFrame
    root: Path
    recipe: str
    seed: int
    sample_rate: int = SAMPLE_RATE
    duration_s: Optional[float] = None
    note: str = ""

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def split(self, name: str) -> pd.DataFrame:
        return self.rows[self.rows["split"] == name].reset_index(drop=True)

    def counts(self) -> Dict[str, int]:
        return {split: int((self.rows["split"] == split).sum()) for split in SPLITS}

    def save(self, path: Optional[Path] = None) -> Path:
        path = Path(path or self.path)
        header = [f"# recipe: {self.recipe}", f"# seed: {self.seed}", f"# sample_rate: {self.sample_rate}",
                  f"# duration_s: {self.duration_s if self.duration_s is not None else 'none'}"]
        if self.note:
            header.append(f"# note: {self.note}")
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write("\n".join(header) + "\n")
            self.rows.to_csv(f, index=False, na_rep="", lineterminator="\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        meta: Dict[str, str] = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.startswith("#"):
                    break
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
        rows = pd.read_csv(path, comment="#", keep_default_na=False, dtype={"noise": str, "split": str})
        missing = [c for c in MANIFEST_COLUMNS if c not in rows.columns]
        if missing:
            raise ConfigError(f"{path}: manifest is missing columns {missing}")
        duration = meta.get("duration_s", "none")
        return cls(rows, path.parent, meta.get("recipe", "external"), int(meta.get("seed", 0)),
                   int(meta.get("sample_rate", SAMPLE_RATE)), None if duration == "none" else float(duration),
                   meta.get("note", ""))


def _write_example(job: Tuple[int, str, int], recipe: Recipe, root: Path, duration_s: float,
                   sample_rate: int, codec: str) -> Dict[str, object]:
    index, split, seed = job
    example = make_example(recipe, seed, duration_s, sample_rate)
    stem = f"{split}/{index:05d}"
    paths = {"mixture": f"{stem}_mix.wav", "src1": f"{stem}_s1.wav", "src2": f"{stem}_s2.wav",
             "noise": f"{stem}_noise.wav" if example.noise is not None else ""}
    write_wav(root / paths["mixture"], example.mixture, sample_rate, codec)
    write_wav(root / paths["src1"], example.sources[0], sample_rate, codec)
    write_wav(root / paths["src2"], example.sources[1], sample_rate, codec)
    if example.noise is not None:
        write_wav(root / paths["noise"], example.noise, sample_rate, codec)
    return {**paths, "snr_db": example.snr_db, "split": split, "seed": seed}


def simulate_dataset(recipe: str, counts: Union[Mapping[str, int], Sequence[int]], out_dir: Union[str, Path],
                     seed: int = 0, duration_s: Optional[float] = None, sample_rate: int = SAMPLE_RATE,
                     workers: Optional[int] = None, codec: str = "float32") -> DatasetManifest:
    """
    Generate WAVs plus `manifest.csv` under `out_dir`.

    Args:
        recipe: lrs2_2mix_style, wham_style or libri2mix_style
        counts: Examples per split, {"train": n, ...} or (train, val, test)
        out_dir: Output directory (created)
        seed: Dataset seed; fully determines every byte written
        duration_s: Override of the recipe's utterance length
        sample_rate: Hz
        workers: Generation threads (default $TDANET_THREADS or 4)
        codec: WAV codec, float32 or pcm16

    Returns:
        The written DatasetManifest
    """
    spec = get_recipe(recipe)
    duration_s = duration_s or spec.duration_s
    plan = _split_plan(counts)
    root = Path(out_dir)
    for split in set(plan):
        (root / split).mkdir(parents=True, exist_ok=True)
    jobs = [(i, split, s) for i, (split, s) in enumerate(zip(plan, row_seeds(seed, len(plan))))]
    workers = workers or int(os.getenv("TDANET_THREADS", "4"))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(tqdm(pool.map(lambda job: _write_example(job, spec, root, duration_s, sample_rate, codec),
                                     jobs), total=len(jobs), desc=f"simulate {recipe}", disable=None))

    rows = pd.DataFrame(results, columns=MANIFEST_COLUMNS)
    manifest = DatasetManifest(rows, root, recipe, seed, sample_rate, duration_s, spec.note)
    manifest.save()
    logger.info(f"Simulated {len(rows)} {recipe} examples into {root} ({manifest.counts()})")
    return manifest


def _fit_length(wave: np.ndarray, samples: Optional[int]) -> np.ndarray:
    if samples is None or wave.size == samples:
        return wave
    if wave.size > samples:
        return wave[:samples]
    return np.pad(wave, (0, samples - wave.size))


class _SplitView(Sequence):
    def __init__(self, dataset: "SeparationDataset", rows: pd.DataFrame):
        self.dataset = dataset
        self.rows = rows

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, index: int) -> MixtureExample:
        return self.dataset.load_row(self.rows.iloc[index])


class SeparationDataset:
    """
    Manifest-backed dataset with lazily loaded examples.

    With `duration_s` set (ingestion mode) every signal is truncated or
    zero-padded to that length and the mixture is rebuilt from the fitted
    sources and noise, so mixture identity still holds.
    """

    def __init__(self, manifest: Union[str, Path, DatasetManifest], duration_s: Optional[float] = None,
                 sample_rate: Optional[int] = None):
        self.manifest = manifest if isinstance(manifest, DatasetManifest) else DatasetManifest.load(manifest)
        self.sample_rate = sample_rate or self.manifest.sample_rate
        self.duration_s = duration_s
        self.samples = int(round(duration_s * self.sample_rate)) if duration_s else None
        if duration_s:
            logger.info(f"Ingestion: signals fitted to {duration_s} s ({self.samples} samples)")

    def _read(self, relative: str) -> np.ndarray:
        wave, rate = read_wav(self.manifest.root / relative)
        if rate != self.sample_rate:
            raise InputError(f"{relative}: {rate} Hz does not match the dataset rate {self.sample_rate} Hz")
        return _fit_length(wave, self.samples)

    def load_row(self, row: pd.Series) -> MixtureExample:
        sources = np.stack([self._read(row["src1"]), self._read(row["src2"])])
        noise = self._read(row["noise"]) if row["noise"] else None
        mixture = self._read(row["mixture"]) if self.samples is None else _mix(sources, noise)
        return MixtureExample(mixture, sources, noise, float(row["snr_db"]), self.sample_rate, int(row["seed"]),
                              self.manifest.recipe)

    def split(self, name: str) -> _SplitView:
        return _SplitView(self, self.manifest.split(name))

    def __len__(self) -> int:
        return len(self.manifest.rows)


@dataclass
class InMemoryDataset:
    """Examples held in memory, keyed by split."""

    splits: Dict[str, List[MixtureExample]] = field(default_factory=dict)

    def split(self, name: str) -> List[MixtureExample]:
        return self.splits.get(name, [])

    @classmethod
    def generate(cls, recipe: str, counts: Union[Mapping[str, int], Sequence[int]], seed: int = 0,
                 duration_s: Optional[float] = None, sample_rate: int = SAMPLE_RATE) -> "InMemoryDataset":
        plan = _split_plan(counts)
        splits: Dict[str, List[MixtureExample]] = {}
        for split, example_seed in zip(plan, row_seeds(seed, len(plan))):
            splits.setdefault(split, []).append(make_example(recipe, example_seed, duration_s, sample_rate))
        return cls(splits)
