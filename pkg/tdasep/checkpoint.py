"""
Checkpoint persistence.

A checkpoint `<stem>` is a pair of sibling files: `<stem>.json`, a manifest
listing tensor names, shapes, precision and byte offsets together with the
config snapshot, its hash and the creation seed, and `<stem>.bin`, the raw
little-endian arrays in manifest order. Round trips are bit-exact.
"""

import hashlib
import json
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .config import ModelConfig
from .errors import CheckpointError
from .logger_config import logger

FORMAT_VERSION = 1
BEST_MARKER = "BEST"


def config_hash(config: ModelConfig) -> str:
    """SHA-256 of the canonical JSON form of a config."""
    canonical = json.dumps(config.model_dump(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    arrays: "OrderedDict[str, np.ndarray]"
    config: ModelConfig
    seed: Optional[int]
    config_hash: str
    extra: Dict[str, Any] = field(default_factory=dict)

    def model_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Arrays that belong to the model (optimizer state excluded)."""
        return OrderedDict((k, v) for k, v in self.arrays.items() if not k.startswith("adam."))

    def build_model(self):
        from .tdanet import TDANet

        model = TDANet(self.config, seed=self.seed or 0)
        model.params.load_arrays(self.model_arrays())
        return model


def _paths(stem: Union[str, Path]) -> Tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def save_checkpoint(stem: Union[str, Path], arrays: Mapping[str, np.ndarray], config: ModelConfig,
                    seed: Optional[int] = None, extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write `<stem>.json` + `<stem>.bin`.

    Args:
        stem: Path without suffix
        arrays: Ordered name -> array mapping (e.g. ParamStore.arrays())
        config: Model config snapshot
        seed: Creation seed
        extra: JSON-serializable metadata (epoch, lr, schedule counters, ...)

    Returns:
        Manifest path
    """
    manifest_path, bin_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, array in arrays.items():
        array = np.asarray(array)
        little = array.astype(array.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(little).tobytes()
        entries.append({"name": name, "shape": list(array.shape), "dtype": array.dtype.name,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "config": config.model_dump(),
        "config_hash": config_hash(config),
        "tensors": entries,
        "total_bytes": offset,
        "extra": extra or {},
    }
    _atomic_write(bin_path, b"".join(chunks))
    _atomic_write(manifest_path, json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))
    logger.debug(f"Saved checkpoint {manifest_path} ({len(entries)} tensors, {offset} bytes)")
    return manifest_path


def load_checkpoint(stem: Union[str, Path]) -> Checkpoint:
    manifest_path, bin_path = _paths(stem)
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    if not bin_path.exists():
        raise FileNotFoundError(f"checkpoint payload not found: {bin_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{manifest_path}: unreadable manifest: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{manifest_path}: unsupported format version {manifest.get('format_version')}")
    payload = bin_path.read_bytes()
    if len(payload) != manifest["total_bytes"]:
        raise CheckpointError(f"{bin_path}: expected {manifest['total_bytes']} bytes, found {len(payload)}")

    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        values = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"])
        arrays[entry["name"]] = values.reshape(entry["shape"]).astype(np.dtype(entry["dtype"]), copy=True)

    config = ModelConfig.create(**manifest["config"])
    if config_hash(config) != manifest["config_hash"]:
        raise CheckpointError(f"{manifest_path}: config hash mismatch")
    logger.debug(f"Loaded checkpoint {manifest_path}")
    return Checkpoint(arrays, config, manifest.get("seed"), manifest["config_hash"], manifest.get("extra", {}))


class CheckpointStore:
    """Named checkpoints in one directory plus a marker naming the best one"""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        logger.debug(f"Checkpoint store at {self.directory}")

    def stem(self, name: str) -> Path:
        return self.directory / name

    def exists(self, name: str) -> bool:
        manifest, payload = _paths(self.stem(name))
        return manifest.exists() and payload.exists()

    def save(self, name: str, arrays: Mapping[str, np.ndarray], config: ModelConfig,
             seed: Optional[int] = None, extra: Optional[Dict[str, Any]] = None) -> Path:
        return save_checkpoint(self.stem(name), arrays, config, seed, extra)

    def load(self, name: str) -> Checkpoint:
        return load_checkpoint(self.stem(name))

    def mark_best(self, name: str) -> None:
        _atomic_write(self.directory / BEST_MARKER, (name + "\n").encode("utf-8"))

    def best(self) -> Optional[str]:
        marker = self.directory / BEST_MARKER
        if not marker.exists():
            return None
        return marker.read_text(encoding="utf-8").strip() or None

    def get_stats(self) -> Dict[str, Any]:
        payloads = list(self.directory.glob("*.bin"))
        total = sum(p.stat().st_size for p in payloads)
        return {
            "checkpoint_count": len(payloads),
            "total_size_bytes": total,
            "best": self.best(),
            "directory": str(self.directory),
        }
