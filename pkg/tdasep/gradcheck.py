"""
Finite-difference verification of every layer type and of a full small model.

All checks run at float64. Each probe reduces the layer output with a fixed
random weighting so that gradients are not trivially constant.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .config import ModelConfig
from .layers import GLN, Conv1d, ConvTranspose1d, FeedForward, Module, MultiHeadSelfAttention, PReLU, positional_table
from .logger_config import logger
from .numerics import (
    Dropout as DropoutFunction,
    GradCheckReport,
    Tensor,
    avg_pool1d,
    concat,
    global_norm,
    grad_check,
    nearest_interp1d,
    pad1d,
    precision,
    relu,
    sigmoid,
    softmax,
)
from .presets import ModelPresets
from .tdanet import DownsampleLayer, LocalAttentionLayer, TDANet
from .training import pit_loss, si_snr

LAYER_TOL = 1e-4
MODEL_TOL = 1e-3
MODEL_SAMPLES = 512


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        return f"{self.name:<24}{self.report.summary()}"


def _probe(out: Tensor, seed: int) -> Tensor:
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * Tensor(weights, dtype=out.dtype)).sum()


def _module_inputs(module: Module, **extra: Tensor) -> Dict[str, Tensor]:
    named = dict(module.named_parameters())
    named.update(extra)
    return named


def _layer_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[[], Tuple[Callable, Mapping[str, Tensor]]]]]:
    def randn(*shape: int) -> Tensor:
        return Tensor(rng.standard_normal(shape))

    def op(fn: Callable[..., Tensor], *shapes: Tuple[int, ...]):
        tensors = {f"x{i}": randn(*shape) for i, shape in enumerate(shapes)}
        values = list(tensors.values())
        return (lambda: _probe(fn(*values), 1)), tensors

    def module(build: Callable[[], Module], call: Callable[[Module, Tensor], Tensor], shape: Tuple[int, ...]):
        layer = build()
        layer.eval()
        x = randn(*shape)
        return (lambda: _probe(call(layer, x), 2)), _module_inputs(layer, x=x)

    mask = (rng.random((4, 12)) >= 0.3) / 0.7

    return [
        ("conv1d", lambda: module(lambda: Conv1d(3, 4, 3, rng, padding=1), lambda m, x: m(x), (3, 16))),
        ("conv1d_strided", lambda: module(lambda: Conv1d(3, 4, 4, rng, stride=2, dilation=2, padding=3),
                                          lambda m, x: m(x), (3, 17))),
        ("conv1d_depthwise", lambda: module(lambda: Conv1d(4, 4, 5, rng, padding=2, groups=4),
                                            lambda m, x: m(x), (4, 16))),
        ("transposed_conv1d", lambda: module(lambda: ConvTranspose1d(4, 1, 8, rng, stride=2),
                                             lambda m, x: m(x), (4, 9))),
        ("global_norm", lambda: op(global_norm, (4, 10))),
        ("gln", lambda: module(lambda: GLN(4), lambda m, x: m(x), (4, 10))),
        ("prelu", lambda: module(lambda: PReLU(), lambda m, x: m(x), (3, 8))),
        ("relu", lambda: op(relu, (3, 8))),
        ("sigmoid", lambda: op(sigmoid, (3, 8))),
        ("softmax", lambda: op(lambda x: softmax(x, axis=-1), (2, 5, 5))),
        ("matmul", lambda: op(lambda a, b: a @ b, (2, 4, 3), (2, 3, 5))),
        ("avg_pool1d", lambda: op(lambda x: avg_pool1d(x, 4), (3, 16))),
        ("nearest_interp1d", lambda: op(lambda x: nearest_interp1d(x, 12), (3, 4))),
        ("nearest_interp1d_odd", lambda: op(lambda x: nearest_interp1d(x, 7), (3, 3))),
        ("concat", lambda: op(lambda a, b: concat([a, b], axis=0), (2, 6), (3, 6))),
        ("pad1d", lambda: op(lambda x: pad1d(x, 2, 3), (2, 6))),
        ("getitem", lambda: op(lambda x: x[:, 2:7], (2, 9))),
        ("dropout", lambda: op(lambda x: DropoutFunction.apply(x, mask=mask), (4, 12))),
        ("elementwise", lambda: op(lambda a, b: (a * b - a / (b * b + 2.0)).exp().log() + (a * a + 1.0).sqrt(),
                                   (3, 4), (3, 4))),
        ("mhsa", lambda: module(lambda: MultiHeadSelfAttention(8, 2, 0.0, rng),
                                lambda m, x: m(x, positional_table(8, 64)), (8, 6))),
        ("ffn", lambda: module(lambda: FeedForward(4, 0.0, rng), lambda m, x: m(x), (4, 8))),
        ("downsample", lambda: module(lambda: DownsampleLayer(4, rng, 1e-8), lambda m, x: m(x), (4, 16))),
        ("local_attention", lambda: _local_attention_case(rng)),
        ("si_snr", lambda: _si_snr_case(rng)),
    ]


def _local_attention_case(rng: np.random.Generator):
    layer = LocalAttentionLayer(4, rng, 1e-8)
    lateral = Tensor(rng.standard_normal((4, 12)))
    top = Tensor(rng.standard_normal((4, 6)))
    return (lambda: _probe(layer(lateral, top), 3)), _module_inputs(layer, lateral=lateral, top=top)


def _si_snr_case(rng: np.random.Generator):
    estimate = Tensor(rng.standard_normal(32))
    target = rng.standard_normal(32)
    return (lambda: si_snr(estimate, target)), {"estimate": estimate}


def layer_suite(seed: int = 0, tol: float = LAYER_TOL, only: Optional[List[str]] = None) -> List[CheckResult]:
    """Check every layer type; returns one CheckResult per case."""
    results = []
    with precision("float64"):
        rng = np.random.default_rng(seed)
        for name, case in _layer_cases(rng):
            if only and name not in only:
                continue
            f, inputs = case()
            results.append(CheckResult(name, grad_check(f, inputs, tol=tol)))
            logger.debug(results[-1].line())
    return results


def model_check(config: Optional[ModelConfig] = None, samples: int = MODEL_SAMPLES, seed: int = 0,
                tol: float = MODEL_TOL, max_elements: Optional[int] = 6) -> CheckResult:
    """
    PIT loss gradient of a whole model against central differences.

    Args:
        config: Defaults to the tiny preset (N=16, S=2, B=2)
        samples: Waveform length
        seed: Model, input and subset seed
        tol: Pass threshold
        max_elements: Elements sampled per parameter tensor
    """
    config = config or ModelConfig.create(**{**ModelPresets.get("tiny"), "dropout": 0.0})
    with precision("float64"):
        model = TDANet(config, seed=seed)
        model.eval()
        rng = np.random.default_rng(seed)
        wave = Tensor(0.5 * rng.standard_normal((1, samples)))
        targets = 0.5 * rng.standard_normal((config.speakers, samples))

        def loss() -> Tensor:
            return pit_loss(model(wave), targets)[0]

        report = grad_check(loss, dict(model.named_parameters()), tol=tol, max_elements=max_elements, seed=seed)
    return CheckResult("tdanet", report)


def format_results(results: List[CheckResult]) -> str:
    lines = [r.line() for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} passed" + (f"; failed: {', '.join(failed)}"
                                                                           if failed else ""))
    return "\n".join(lines) + "\n"


def layer_names() -> List[str]:
    return [name for name, _ in _layer_cases(np.random.default_rng(0))]
