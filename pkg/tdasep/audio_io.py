"""
Mono RIFF/WAVE input and output (PCM 16-bit or IEEE float 32-bit).

Files are pre-scanned chunk by chunk so a malformed or unsupported file is
reported with the offending chunk; decoding itself goes through
scipy.io.wavfile.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from scipy.io import wavfile

from .errors import WavFormatError
from .logger_config import logger

PCM_SCALE = 32768.0
_FORMAT_PCM = 1
_FORMAT_FLOAT = 3
_FORMAT_EXTENSIBLE = 0xFFFE
_SUPPORTED = {(_FORMAT_PCM, 16): "pcm16", (_FORMAT_FLOAT, 32): "float32"}


@dataclass(frozen=True)
class WavInfo:
    codec: str
    channels: int
    sample_rate: int
    bits: int
    frames: int

    @property
    def duration(self) -> float:
        return self.frames / self.sample_rate


def inspect_wav(path: Union[str, Path]) -> WavInfo:
    """
    Walk the RIFF chunks and validate them without decoding samples.

    Raises:
        FileNotFoundError: path does not exist
        WavFormatError: malformed/truncated header, multichannel or unsupported codec
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"audio file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 12:
        raise WavFormatError(str(path), "RIFF", f"truncated header ({len(raw)} bytes)")
    riff, _, wave = struct.unpack("<4sI4s", raw[:12])
    if riff != b"RIFF" or wave != b"WAVE":
        raise WavFormatError(str(path), "RIFF", "not a RIFF/WAVE file")

    fmt = None
    data_size = None
    offset = 12
    while offset + 8 <= len(raw):
        chunk_id, size = struct.unpack("<4sI", raw[offset:offset + 8])
        body = raw[offset + 8:offset + 8 + size]
        name = chunk_id.decode("ascii", errors="replace")
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(str(path), name, f"needs 16 bytes, has {len(body)}")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _FORMAT_EXTENSIBLE:
                if len(body) < 26:
                    raise WavFormatError(str(path), name, "extensible format without sub-format")
                fmt = (struct.unpack("<H", body[24:26])[0],) + fmt[1:]
        elif chunk_id == b"data":
            if len(body) < size:
                raise WavFormatError(str(path), name, f"declares {size} bytes but only {len(body)} present")
            data_size = size
        offset += 8 + size + (size & 1)

    if fmt is None:
        raise WavFormatError(str(path), "fmt ", "chunk missing")
    format_tag, channels, sample_rate, _, _, bits = fmt
    if (format_tag, bits) not in _SUPPORTED:
        raise WavFormatError(str(path), "fmt ", f"unsupported codec (format tag {format_tag}, {bits} bits); "
                                                "expected PCM 16-bit or IEEE float 32-bit")
    if channels != 1:
        raise WavFormatError(str(path), "fmt ", f"{channels} channels; only mono is supported")
    if data_size is None:
        raise WavFormatError(str(path), "data", "chunk missing")
    return WavInfo(_SUPPORTED[(format_tag, bits)], channels, sample_rate, bits, data_size // (bits // 8))


def read_wav(path: Union[str, Path]) -> Tuple[np.ndarray, int]:
    """
    Read a mono WAV file.

    Returns:
        Tuple of (float32 samples, sample_rate); PCM is scaled by 1/32768
    """
    info = inspect_wav(path)
    sample_rate, samples = wavfile.read(str(path))
    if info.codec == "pcm16":
        samples = samples.astype(np.float32) / np.float32(PCM_SCALE)
    else:
        samples = np.asarray(samples, dtype=np.float32)
    logger.debug(f"Read {path}: {info.codec}, {sample_rate} Hz, {samples.size} samples")
    return samples, int(sample_rate)


def write_wav(path: Union[str, Path], wave: np.ndarray, sample_rate: int, codec: str = "float32") -> Path:
    """
    Write a mono WAV file.

    Args:
        path: Destination
        wave: 1-D samples (nominally in [-1, 1])
        sample_rate: Hz
        codec: "float32" (bit-exact) or "pcm16" (round(x * 32768), saturated)

    Returns:
        The written path
    """
    path = Path(path)
    wave = np.asarray(wave).reshape(-1)
    if codec == "float32":
        payload = wave.astype(np.float32)
    elif codec == "pcm16":
        payload = np.clip(np.round(wave.astype(np.float64) * PCM_SCALE), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"Unknown codec '{codec}'. Expected 'float32' or 'pcm16'")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        wavfile.write(str(path), int(sample_rate), payload)
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        raise OSError(f"failed to write audio file {path}: {e}") from e
    return path


def get_audio_duration(path: Union[str, Path]) -> float:
    """Duration in seconds, read from the header only."""
    return inspect_wav(path).duration
