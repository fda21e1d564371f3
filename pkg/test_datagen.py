"""
Synthetic sources, mixing, dataset simulation and WAV I/O.
"""

import numpy as np
import pytest
from scipy.io import wavfile

from tdasep.audio_io import get_audio_duration, inspect_wav, read_wav, write_wav
from tdasep.datagen import (
    MANIFEST_NAME,
    DatasetManifest,
    InMemoryDataset,
    MixtureExample,
    SeparationDataset,
    draw_voice_params,
    estimate_f0,
    make_example,
    mix_at_snr,
    row_seeds,
    simulate_dataset,
    synth_source,
)
from tdasep.errors import ConfigError, InputError, WavFormatError


def snr_db(a, b):
    a, b = a.astype(np.float64), b.astype(np.float64)
    return 10.0 * np.log10(np.sum(a * a) / np.sum(b * b))


# sources

@pytest.mark.parametrize("kind", ["harmonic_voice", "chirp", "noise_burst"])
def test_synth_source_is_deterministic_and_normalized(kind):
    a = synth_source(kind, 0.5, seed=3)
    b = synth_source(kind, 0.5, seed=3)
    assert a.dtype == np.float32 and a.shape == (8000,)
    assert np.array_equal(a, b)
    assert np.isclose(np.max(np.abs(a)), 0.9, atol=1e-6)
    assert not np.array_equal(a, synth_source(kind, 0.5, seed=4))


def test_synth_source_kinds_differ():
    waves = [synth_source(kind, 0.5, seed=0) for kind in ("harmonic_voice", "chirp", "noise_burst")]
    assert not np.array_equal(waves[0], waves[1])
    assert not np.array_equal(waves[1], waves[2])


def test_synth_source_rejects_bad_requests():
    with pytest.raises(InputError):
        synth_source("chirp", 0.05, seed=0)
    with pytest.raises(ConfigError):
        synth_source("whistle", 1.0, seed=0)


@pytest.mark.parametrize("seed", range(6))
def test_harmonic_voice_pitch_is_recoverable(seed):
    wave = synth_source("harmonic_voice", 0.5, seed=seed)
    f0 = draw_voice_params(seed).f0
    assert 80.0 <= f0 <= 300.0
    assert abs(estimate_f0(wave) - f0) / f0 < 0.02


def test_voice_params_ranges():
    params = draw_voice_params(11)
    assert 3 <= params.harmonics <= 8
    assert len(params.phases) == params.harmonics


# mixing

def test_mix_at_snr_hits_target(rng):
    s1 = rng.standard_normal(4000).astype(np.float32)
    s2 = 3.0 * rng.standard_normal(4000).astype(np.float32)
    for target in (-5.0, 0.0, 2.5):
        mixture, first, scaled = mix_at_snr(s1, s2, target)
        assert abs(snr_db(first, scaled) - target) < 1e-4
        assert np.array_equal(mixture, first + scaled)
        assert mixture.dtype == np.float32


def test_mix_at_snr_errors(rng):
    s1 = rng.standard_normal(100)
    with pytest.raises(InputError):
        mix_at_snr(s1, np.zeros(100), 0.0)
    with pytest.raises(InputError):
        mix_at_snr(s1, s1[:50], 0.0)


def test_lrs2_style_example():
    example = make_example("lrs2_2mix_style", seed=5, duration_s=0.5)
    assert example.noise is None
    assert example.num_speakers == 2 and example.duration_s == 0.5
    assert -5.0 <= example.snr_db <= 5.0
    assert abs(snr_db(example.sources[0], example.sources[1]) - example.snr_db) < 1e-4
    assert np.array_equal(example.mixture, example.sources[0] + example.sources[1])
    assert np.max(np.abs(example.mixture)) <= 1.0


def test_wham_style_example_adds_noise():
    example = make_example("wham_style", seed=5, duration_s=0.5)
    assert example.noise is not None
    assert -6.0 <= example.noise_snr_db <= 3.0
    assert np.array_equal(example.mixture, (example.sources[0] + example.sources[1]) + example.noise)


def test_libri2mix_style_levels():
    for seed in range(4):
        example = make_example("libri2mix_style", seed=seed, duration_s=0.5)
        assert example.noise is not None
        if example.gain == 1.0:
            for source in example.sources:
                level = 20.0 * np.log10(np.sqrt(np.mean(source.astype(np.float64) ** 2)))
                assert -33.001 <= level <= -24.999


def test_make_example_is_reproducible():
    a = make_example("wham_style", seed=9, duration_s=0.3)
    b = make_example("wham_style", seed=9, duration_s=0.3)
    assert np.array_equal(a.mixture, b.mixture)
    assert a.snr_db == b.snr_db


def test_mixture_example_validation():
    with pytest.raises(InputError):
        MixtureExample(np.zeros(10), np.zeros((1, 10)), None, 0.0, 16000, 0)
    with pytest.raises(InputError):
        MixtureExample(np.zeros(10), np.zeros((2, 12)), None, 0.0, 16000, 0)


def test_unknown_recipe():
    with pytest.raises(ConfigError):
        make_example("wsj0_style", seed=0)


def test_row_seeds_are_distinct():
    seeds = row_seeds(0, 500)
    assert len(set(seeds)) == 500
    assert seeds == row_seeds(0, 500)


# simulation

@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    manifest = simulate_dataset("lrs2_2mix_style", (20, 5, 3), root / "a", seed=7, duration_s=0.5, workers=2)
    return manifest, root


def test_simulate_writes_every_row(simulated):
    manifest, _ = simulated
    assert len(manifest.rows) == 28
    assert manifest.counts() == {"train": 20, "val": 5, "test": 3}
    wavs = list(manifest.root.rglob("*.wav"))
    assert len(wavs) == 28 * 3
    assert manifest.rows["seed"].nunique() == 28
    assert manifest.rows["snr_db"].between(-5.0, 5.0).all()
    assert (manifest.rows["noise"] == "").all()


def test_simulate_is_byte_identical(simulated):
    manifest, root = simulated
    again = simulate_dataset("lrs2_2mix_style", (20, 5, 3), root / "b", seed=7, duration_s=0.5, workers=3)
    assert (root / "a" / MANIFEST_NAME).read_bytes() == (root / "b" / MANIFEST_NAME).read_bytes()
    for relative in manifest.rows["mixture"]:
        assert (root / "a" / relative).read_bytes() == (root / "b" / relative).read_bytes()
    assert again.counts() == manifest.counts()


def test_manifest_load(simulated):
    manifest, root = simulated
    loaded = DatasetManifest.load(root / "a" / MANIFEST_NAME)
    assert loaded.recipe == "lrs2_2mix_style"
    assert loaded.seed == 7
    assert loaded.duration_s == 0.5
    assert loaded.counts() == manifest.counts()
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(root / "missing.csv")


def test_dataset_rows_keep_mixture_identity(simulated):
    _, root = simulated
    test_split = SeparationDataset(root / "a" / MANIFEST_NAME).split("test")
    assert len(test_split) == 3
    for example in test_split:
        assert example.mixture.shape == (8000,)
        assert np.array_equal(example.mixture, example.sources[0] + example.sources[1])


@pytest.mark.parametrize("seconds,samples", [(0.3, 4800), (0.7, 11200)])
def test_ingestion_fits_lengths(simulated, seconds, samples):
    _, root = simulated
    example = SeparationDataset(root / "a" / MANIFEST_NAME, duration_s=seconds).split("val")[0]
    assert example.sources.shape == (2, samples)
    assert np.array_equal(example.mixture, example.sources[0] + example.sources[1])
    if samples > 8000:
        assert not np.any(example.sources[:, 8000:])


def test_dataset_rate_mismatch(simulated):
    _, root = simulated
    dataset = SeparationDataset(root / "a" / MANIFEST_NAME, sample_rate=8000)
    with pytest.raises(InputError):
        dataset.split("train")[0]


def test_in_memory_dataset_matches_counts():
    dataset = InMemoryDataset.generate("wham_style", {"train": 2, "val": 1}, seed=1, duration_s=0.2)
    assert len(dataset.split("train")) == 2
    assert len(dataset.split("val")) == 1
    assert dataset.split("test") == []


# WAV I/O

def test_float32_wav_is_bit_exact(tmp_path, rng):
    wave = rng.uniform(-1, 1, 1000).astype(np.float32)
    write_wav(tmp_path / "x.wav", wave, 16000)
    back, rate = read_wav(tmp_path / "x.wav")
    assert rate == 16000
    assert back.dtype == np.float32
    assert np.array_equal(back, wave)
    assert get_audio_duration(tmp_path / "x.wav") == 1000 / 16000


def test_pcm16_wav_quantization(tmp_path, rng):
    wave = rng.uniform(-0.99, 0.99, 1000)
    write_wav(tmp_path / "x.wav", wave, 8000, codec="pcm16")
    assert inspect_wav(tmp_path / "x.wav").codec == "pcm16"
    back, rate = read_wav(tmp_path / "x.wav")
    assert rate == 8000
    assert np.max(np.abs(back - wave)) <= 2.0 ** -15


def test_truncated_wav(tmp_path):
    path = write_wav(tmp_path / "x.wav", np.zeros(100, dtype=np.float32), 16000)
    path.write_bytes(path.read_bytes()[:-40])
    with pytest.raises(WavFormatError, match="data"):
        read_wav(path)


def test_unsupported_wavs(tmp_path):
    wavfile.write(str(tmp_path / "stereo.wav"), 16000, np.zeros((100, 2), dtype=np.int16))
    wavfile.write(str(tmp_path / "int32.wav"), 16000, np.zeros(100, dtype=np.int32))
    (tmp_path / "junk.wav").write_bytes(b"not a wave file at all")
    for name in ("stereo.wav", "int32.wav", "junk.wav"):
        with pytest.raises(WavFormatError):
            read_wav(tmp_path / name)


def test_missing_wav(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_wav(tmp_path / "absent.wav")
