"""
Preset library for model scales and ablation switches.
"""

from typing import Any, Dict, Iterable, List

from .errors import ConfigError


class ModelPresets:
    """Named model scales"""

    @staticmethod
    def get_presets() -> Dict[str, Dict[str, Any]]:
        """Model-config overrides per preset name"""
        return {
            # N=512, S=4, B=16, 8 heads, L=4 ms
            "base": {},
            "large": {"win_ms": 2.0, "stride_ms": 0.5},
            "desk": {"channels": 64, "bottleneck": 32, "depth": 3, "unfolds": 4, "heads": 4},
            "tiny": {"channels": 16, "bottleneck": 8, "depth": 2, "unfolds": 2, "heads": 2, "dropout": 0.0},
        }

    @staticmethod
    def names() -> List[str]:
        return list(ModelPresets.get_presets())

    @staticmethod
    def get(name: str) -> Dict[str, Any]:
        presets = ModelPresets.get_presets()
        if name not in presets:
            raise ConfigError(f"Unknown model preset '{name}'. Available: {', '.join(presets)}")
        return dict(presets[name])


class AblationPresets:
    """Named architecture ablations, composable as a comma-separated list"""

    @staticmethod
    def get_presets() -> Dict[str, Dict[str, Any]]:
        return {
            "no_ga": {"use_ga": False},
            "no_la": {"use_la": False},
            "no_tl": {"use_transformer": False},
            "no_mhsa": {"use_mhsa": False},
            "no_ffn": {"use_ffn": False},
            "no_projection": {"use_topdown_projection": False},
            "no_positional": {"use_positional": False},
            "top_f": {"ga_input": "top_F"},
            "concat": {"fusion": "concat"},
        }

    @staticmethod
    def names() -> List[str]:
        return list(AblationPresets.get_presets())

    @staticmethod
    def parse(spec: str) -> List[str]:
        """Split "no_ga,no_la" into validated names."""
        names = [part.strip() for part in spec.split(",") if part.strip()]
        for name in names:
            AblationPresets.get(name)
        return names

    @staticmethod
    def get(name: str) -> Dict[str, Any]:
        presets = AblationPresets.get_presets()
        if name not in presets:
            raise ConfigError(f"Unknown ablation '{name}'. Available: {', '.join(presets)}")
        return dict(presets[name])

    @staticmethod
    def combine(names: Iterable[str]) -> Dict[str, Any]:
        merged: Dict[str, Any] = {}
        for name in names:
            merged.update(AblationPresets.get(name))
        return merged


def apply_ablations(config, spec: str):
    """Return `config` (a ModelConfig) with the ablations in `spec` applied."""
    return config.with_updates(**AblationPresets.combine(AblationPresets.parse(spec)))
