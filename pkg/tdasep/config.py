"""
Configuration schema, key-value config files and seed splitting.

Config file format (UTF-8): one `key = value` per line, `#` starts a comment,
dotted keys address sections (`model.channels = 64`, `train.lr = 0.001`,
`seed = 3`). Precedence: defaults < preset < file < command-line overrides.
"""

from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .errors import ConfigError
from .logger_config import logger

RESOLVED_CONFIG_NAME = "resolved_config.txt"
SEED_PURPOSES = ("init", "data", "dropout")


class _Schema(BaseModel):
    model_config = ConfigDict(extra="forbid")

    @classmethod
    def create(cls, **values: Any):
        """Validate `values`, reporting every problem as a ConfigError."""
        try:
            return cls(**values)
        except ValidationError as e:
            problems = "; ".join(
                f"{'.'.join(str(p) for p in err['loc']) or cls.__name__}: {err['msg']}" for err in e.errors()
            )
            raise ConfigError(f"invalid {cls.__name__}: {problems}") from None

    def with_updates(self, **changes: Any):
        return type(self).create(**{**self.model_dump(), **changes})


class ModelConfig(_Schema):
    """Every architecture hyperparameter, including the ablation switches."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    sample_rate: int = 16000
    win_ms: float = 4.0
    stride_ms: Optional[float] = None
    channels: int = 512
    bottleneck: int = 158
    depth: int = 4
    unfolds: int = 16
    heads: int = 8
    speakers: int = 2
    dropout: float = 0.1
    use_ga: bool = True
    use_la: bool = True
    use_transformer: bool = True
    use_mhsa: bool = True
    use_ffn: bool = True
    use_topdown_projection: bool = True
    use_positional: bool = True
    ga_input: Literal["fused_G", "top_F"] = "fused_G"
    fusion: Literal["sum", "concat"] = "sum"
    gln_eps: float = 1e-8
    pos_max_len: int = 8192

    @property
    def win_samples(self) -> int:
        return int(round(self.win_ms * self.sample_rate / 1000.0))

    @property
    def stride_samples(self) -> int:
        if self.stride_ms is None:
            return self.win_samples // 4
        return int(round(self.stride_ms * self.sample_rate / 1000.0))

    @property
    def ladder_factor(self) -> int:
        return 2 ** self.depth

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        exact = self.win_ms * self.sample_rate / 1000.0
        if abs(exact - round(exact)) > 1e-9 or self.win_samples <= 0:
            raise ValueError(f"win_ms={self.win_ms} is not a whole number of samples at {self.sample_rate} Hz")
        if self.win_samples % 4:
            raise ValueError(f"window of {self.win_samples} samples is not divisible by 4")
        if self.stride_samples < 1 or self.stride_samples > self.win_samples:
            raise ValueError(f"stride of {self.stride_samples} samples must lie in [1, {self.win_samples}]")
        if self.channels < 2 or self.channels % 2:
            raise ValueError(f"channels must be even and >= 2, got {self.channels}")
        if self.heads < 1 or self.channels % self.heads:
            raise ValueError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if self.bottleneck < 1:
            raise ValueError(f"bottleneck must be >= 1, got {self.bottleneck}")
        if self.depth < 1:
            raise ValueError(f"depth S must be >= 1, got {self.depth}")
        if self.unfolds < 1:
            raise ValueError(f"unfolds B must be >= 1, got {self.unfolds}")
        if self.speakers < 2:
            raise ValueError(f"speakers C must be >= 2, got {self.speakers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.gln_eps <= 0:
            raise ValueError(f"gln_eps must be positive, got {self.gln_eps}")
        return self


class TrainConfig(_Schema):
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_halve_patience: int = 15
    early_stop_patience: int = 30
    grad_clip_l2: float = 5.0
    batch_size: int = 1
    max_epochs: int = 200
    seed: int = 0
    mean_subtract: bool = True
    clamp_db: float = 60.0
    prefetch: int = 4

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.lr_halve_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patiences must be positive")
        if self.grad_clip_l2 <= 0:
            raise ValueError(f"grad_clip_l2 must be positive, got {self.grad_clip_l2}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.prefetch < 1:
            raise ValueError("batch_size, max_epochs and prefetch must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"Adam betas must be in [0, 1), got ({self.beta1}, {self.beta2})")
        return self


class RunConfig(_Schema):
    """Merged view: model + training + paths + root seed."""

    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    seed: int = 0
    preset: Optional[str] = None
    ablations: List[str] = []
    manifest: Optional[str] = None
    out_dir: Optional[str] = None
    checkpoint: Optional[str] = None


def _parse_value(raw: str) -> Any:
    text = raw.strip()
    lowered = text.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    if lowered in ("none", "null", ""):
        return None
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if "," in text:
        return [part.strip() for part in text.split(",") if part.strip()]
    return text


def _assign(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"key '{dotted}' descends into non-section '{part}'")
        node = child
    node[parts[-1]] = value


def parse_kv_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """Parse key-value config text into a nested dict."""
    tree: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"{source}, line {lineno}: expected 'key = value'\n  {line.strip()}")
        key, raw = content.split("=", 1)
        key = key.strip()
        if not key or " " in key:
            raise ConfigError(f"{source}, line {lineno}: bad key '{key}'\n  {line.strip()}")
        _assign(tree, key, _parse_value(raw))
    return tree


def validate_config_text(text: str) -> Tuple[bool, Optional[str]]:
    """
    Check config text against the schema without building anything.

    Returns:
        Tuple of (is_valid, error_message)
    """
    try:
        RunConfig.create(**_merge({}, parse_kv_text(text)))
        return True, None
    except ConfigError as e:
        return False, str(e)


def parse_overrides(pairs: Iterable[str]) -> Dict[str, Any]:
    """Turn `--set key=value` strings into a nested dict."""
    tree: Dict[str, Any] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override '{pair}' must look like key=value")
        key, raw = pair.split("=", 1)
        _assign(tree, key.strip(), _parse_value(raw))
    return tree


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: Optional[Union[str, Path]] = None, preset: Optional[str] = None,
                    ablations: Optional[List[str]] = None, overrides: Iterable[str] = (),
                    **fields: Any) -> RunConfig:
    """
    Resolve a RunConfig from its layers.

    Args:
        path: Optional key-value config file
        preset: Named model preset (see presets.ModelPresets)
        ablations: Named ablations applied on top of the preset
        overrides: `key=value` strings, highest precedence
        **fields: Top-level fields (paths, seed) set by the caller before overrides

    Returns:
        Validated RunConfig
    """
    from .presets import AblationPresets, ModelPresets

    tree: Dict[str, Any] = {}
    preset = preset or None
    if preset:
        tree = _merge(tree, {"model": ModelPresets.get(preset), "preset": preset})
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        file_tree = parse_kv_text(path.read_text(encoding="utf-8"), source=str(path))
        file_preset = file_tree.pop("preset", None)
        if file_preset and not preset:
            tree = _merge(tree, {"model": ModelPresets.get(file_preset), "preset": file_preset})
        tree = _merge(tree, file_tree)
    names = tree.pop("ablations", None) or []
    if isinstance(names, str):
        names = [names]
    names += [name for name in ablations or [] if name not in names]
    if names:
        tree = _merge(tree, {"model": AblationPresets.combine(names), "ablations": names})
    tree = _merge(tree, {k: v for k, v in fields.items() if v is not None})
    tree = _merge(tree, parse_overrides(overrides))
    run = RunConfig.create(**tree)
    logger.debug(f"Resolved config: preset={run.preset} ablations={run.ablations} seed={run.seed}")
    return run


def _flatten(values: Dict[str, Any], prefix: str = "") -> List[Tuple[str, Any]]:
    items: List[Tuple[str, Any]] = []
    for key, value in values.items():
        if isinstance(value, dict):
            items.extend(_flatten(value, f"{prefix}{key}."))
        else:
            items.append((prefix + key, value))
    return items


def _render_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value) if value else "none"
    return str(value)


def render_config(run: RunConfig) -> str:
    lines = ["# resolved configuration; re-run with --config on this file to reproduce"]
    lines += [f"{key} = {_render_value(value)}" for key, value in _flatten(run.model_dump())]
    return "\n".join(lines) + "\n"


def write_resolved_config(out_dir: Union[str, Path], run: RunConfig) -> Path:
    """Echo the fully resolved config into `out_dir`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_NAME
    path.write_text(render_config(run), encoding="utf-8")
    logger.debug(f"Wrote {path}")
    return path


def split_seeds(root_seed: int) -> Dict[str, int]:
    """Derive independent per-purpose seeds (init, data, dropout) from one root seed."""
    children = np.random.SeedSequence(root_seed).spawn(len(SEED_PURPOSES))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(SEED_PURPOSES, children)}
