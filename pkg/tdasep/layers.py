"""
Parameterized layers built on the numerics primitives.

Modules register learnable tensors and sub-modules in declaration order, so
`named_parameters()` yields a stable, dotted naming used by checkpoints.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import (
    Tensor,
    concat,
    conv1d,
    dropout as dropout_op,
    get_default_dtype,
    global_norm,
    prelu,
    softmax,
    transposed_conv1d,
)

GLN_EPS = 1e-8
PRELU_INIT = 0.25
POSITIONAL_MAX_LEN = 8192


class Module:
    """Base class: ordered parameter and sub-module registry plus train/eval mode."""

    def __init__(self):
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._parameters[name] = value
        object.__setattr__(self, name, value)

    def parameter(self, name: str, values: np.ndarray) -> Tensor:
        """Create and register a learnable tensor in the current default precision."""
        param = Tensor(values, requires_grad=True, dtype=get_default_dtype(), name=name)
        setattr(self, name, param)
        return param

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for module in self._modules.values():
            module.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    """Indexed container; children are named "0", "1", ..."""

    def __init__(self, modules=()):
        super().__init__()
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._modules)), module)

    def __getitem__(self, index: int) -> Module:
        return list(self._modules.values())[index]

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self) -> int:
        return len(self._modules)


def _uniform(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1, padding: int = 0, groups: int = 1, bias: bool = True):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ConfigError(f"channels ({in_channels}, {out_channels}) not divisible by groups={groups}")
        self.in_channels, self.out_channels, self.kernel_size = in_channels, out_channels, kernel_size
        self.stride, self.dilation, self.padding, self.groups = stride, dilation, padding, groups
        fan_in = (in_channels // groups) * kernel_size
        self.parameter("weight", _uniform(rng, fan_in, (out_channels, in_channels // groups, kernel_size)))
        self.bias = self.parameter("bias", _uniform(rng, fan_in, (out_channels,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, stride=self.stride, dilation=self.dilation,
                      padding=self.padding, groups=self.groups)

    def macs(self, out_len: int) -> int:
        return self.out_channels * (self.in_channels // self.groups) * self.kernel_size * out_len

    def __repr__(self) -> str:
        return (f"Conv1d({self.in_channels}, {self.out_channels}, k={self.kernel_size}, s={self.stride}, "
                f"d={self.dilation}, p={self.padding}, groups={self.groups}, bias={self.bias is not None})")


class ConvTranspose1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, bias: bool = True):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride = kernel_size, stride
        fan_in = out_channels * kernel_size
        self.parameter("weight", _uniform(rng, fan_in, (in_channels, out_channels, kernel_size)))
        self.bias = self.parameter("bias", _uniform(rng, fan_in, (out_channels,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return transposed_conv1d(x, self.weight, stride=self.stride, bias=self.bias)


class GLN(Module):
    """Global layer norm: standardize over channels and time jointly, per-channel affine."""

    def __init__(self, channels: int, eps: float = GLN_EPS):
        super().__init__()
        self.channels, self.eps = channels, eps
        self.parameter("gain", np.ones((channels, 1)))
        self.parameter("bias", np.zeros((channels, 1)))

    def forward(self, x: Tensor) -> Tensor:
        return gln(x, self, self.eps)


# GLNParams is carried by the GLN module itself
GLNParams = GLN


def gln(x: Tensor, params: GLN, eps: float = GLN_EPS) -> Tensor:
    if x.ndim != 2 or x.shape[0] != params.channels:
        raise DimensionError(f"gln expects {params.channels} x T input", x.shape)
    return global_norm(x, eps) * params.gain + params.bias


class PReLU(Module):
    def __init__(self, init: float = PRELU_INIT):
        super().__init__()
        self.parameter("slope", np.full((1,), init))

    def forward(self, x: Tensor) -> Tensor:
        return prelu(x, self.slope)


class Dropout(Module):
    """Inverted dropout drawing masks from its own seeded generator."""

    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return dropout_op(x, self.p, self.rng, training=self.training)


@dataclass(frozen=True)
class PositionalEncoding:
    """Precomputed sinusoid table d, channels x max_len."""

    table: np.ndarray

    @property
    def channels(self) -> int:
        return self.table.shape[0]

    @property
    def max_len(self) -> int:
        return self.table.shape[1]

    def frames(self, length: int, dtype=None) -> Tensor:
        if length > self.max_len:
            raise DimensionError(f"sequence of {length} frames exceeds positional table length {self.max_len}",
                                 self.table.shape)
        return Tensor(self.table[:, :length], dtype=dtype or get_default_dtype())


@lru_cache(maxsize=8)
def positional_table(channels: int, max_len: int = POSITIONAL_MAX_LEN) -> PositionalEncoding:
    """d[2k, t] = sin(t / 10000^(2k/N)), d[2k+1, t] = cos(t / 10000^(2k/N))."""
    if channels % 2:
        raise ConfigError(f"positional encoding needs an even channel count, got {channels}")
    positions = np.arange(max_len, dtype=np.float64)
    rates = 1.0 / np.power(10000.0, np.arange(0, channels, 2, dtype=np.float64) / channels)
    phase = rates[:, None] * positions[None, :]
    table = np.empty((channels, max_len), dtype=np.float64)
    table[0::2] = np.sin(phase)
    table[1::2] = np.cos(phase)
    table.setflags(write=False)
    return PositionalEncoding(table)


class MultiHeadSelfAttention(Module):
    """
    Transformer-layer attention stage on channel-major features.

    forward(G) returns G + GLN(MHSA(G + d)); projections are 1x1 convolutions
    with biases, so Q, K, V and the output map are each N x N.
    """

    def __init__(self, channels: int, heads: int, dropout: float, rng: np.random.Generator,
                 eps: float = GLN_EPS, dropout_rng: Optional[np.random.Generator] = None):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"channels ({channels}) must be divisible by heads ({heads})")
        self.channels, self.heads = channels, heads
        self.head_dim = channels // heads
        self.query = Conv1d(channels, channels, 1, rng)
        self.key = Conv1d(channels, channels, 1, rng)
        self.value = Conv1d(channels, channels, 1, rng)
        self.output = Conv1d(channels, channels, 1, rng)
        self.norm = GLN(channels, eps)
        self.attn_dropout = Dropout(dropout, dropout_rng or rng)

    def _split_heads(self, x: Tensor) -> Tensor:
        # (N, T) -> (heads, T, head_dim)
        length = x.shape[1]
        return x.reshape(self.heads, self.head_dim, length).transpose(0, 2, 1)

    def attention_weights(self, x: Tensor) -> Tensor:
        """Row-stochastic weights of shape (heads, T, T) for an already position-encoded input."""
        q = self._split_heads(self.query(x))
        k = self._split_heads(self.key(x))
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(self.head_dim))
        return softmax(scores, axis=-1)

    def attend(self, x: Tensor) -> Tensor:
        weights = self.attn_dropout(self.attention_weights(x))
        v = self._split_heads(self.value(x))
        mixed = (weights @ v).transpose(0, 2, 1).reshape(self.channels, x.shape[1])
        return self.output(mixed)

    def forward(self, g: Tensor, pos: Optional[PositionalEncoding] = None) -> Tensor:
        if g.ndim != 2 or g.shape[0] != self.channels:
            raise ConfigError(f"mhsa configured for {self.channels} channels, got input of shape {g.shape}")
        encoded = (g + pos.frames(g.shape[1], g.dtype)) if pos is not None else g
        return g + self.norm(self.attend(encoded))

    def macs(self, length: int) -> int:
        projections = 4 * self.channels * self.channels * length
        return projections + 2 * length * length * self.channels


MHSAParams = MultiHeadSelfAttention


def mhsa(x: Tensor, params: MultiHeadSelfAttention, pos: Optional[PositionalEncoding]) -> Tensor:
    return params(x, pos)


class FeedForward(Module):
    """Conv1x1 -> GLN -> DWConv(k=5) -> GLN -> Conv1x1 -> GLN, each with dropout, plus residual."""

    def __init__(self, channels: int, dropout: float, rng: np.random.Generator, eps: float = GLN_EPS,
                 kernel_size: int = 5, dropout_rng: Optional[np.random.Generator] = None):
        super().__init__()
        hidden = 2 * channels
        self.channels = channels
        self.expand = Conv1d(channels, hidden, 1, rng, bias=False)
        self.norm1 = GLN(hidden, eps)
        self.depthwise = Conv1d(hidden, hidden, kernel_size, rng, padding=kernel_size // 2, groups=hidden)
        self.norm2 = GLN(hidden, eps)
        self.project = Conv1d(hidden, channels, 1, rng, bias=False)
        self.norm3 = GLN(channels, eps)
        self.drop1 = Dropout(dropout, dropout_rng or rng)
        self.drop2 = Dropout(dropout, dropout_rng or rng)
        self.drop3 = Dropout(dropout, dropout_rng or rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.channels:
            raise DimensionError(f"ffn expects {self.channels} channels", x.shape)
        h = self.drop1(self.norm1(self.expand(x)))
        h = self.drop2(self.norm2(self.depthwise(h)))
        h = self.drop3(self.norm3(self.project(h)))
        return x + h

    def macs(self, length: int) -> int:
        return self.expand.macs(length) + self.depthwise.macs(length) + self.project.macs(length)


FFNParams = FeedForward


def ffn(x: Tensor, params: FeedForward) -> Tensor:
    return params(x)


def stack_channels(features: List[Tensor]) -> Tensor:
    """Concatenate channel-major features along the channel axis."""
    return concat(features, axis=0)
