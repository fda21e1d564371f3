"""
The separation network: audio encoder, unfolded top-down attention block,
mask head and shared audio decoder, plus analytic parameter/MAC counters.

Shapes are channel-major. E is N x T', the block works at width W (the
bottleneck) on its input/output and at N inside, and the scale ladder holds
S+1 levels of N x T'/2^(i-1).
"""

from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, DimensionError, InputError
from .layers import (
    GLN,
    Conv1d,
    ConvTranspose1d,
    FeedForward,
    Module,
    ModuleList,
    MultiHeadSelfAttention,
    PReLU,
    positional_table,
    stack_channels,
)
from .logger_config import logger
from .numerics import (
    Tensor,
    avg_pool1d,
    concat,
    nearest_interp1d,
    no_grad,
    pad1d,
    relu,
    sigmoid,
)

DOWNSAMPLE_KERNEL = 5
DOWNSAMPLE_STRIDE = 2
DOWNSAMPLE_DILATION = 2
DOWNSAMPLE_PADDING = 4
LA_KERNEL = 5


class ParamStore:
    """Named, ordered learnable tensors of one model, with the seed that built them."""

    def __init__(self, params: Iterable[Tuple[str, Tensor]], seed: Optional[int] = None):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, param in params:
            if name in self._params:
                raise ConfigError(f"duplicate parameter name '{name}'")
            self._params[name] = param
        self.seed = seed

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._params.items())

    def count(self) -> int:
        return sum(p.size for p in self._params.values())

    def nbytes(self) -> int:
        return sum(p.data.nbytes for p in self._params.values())

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data) for name, p in self._params.items())

    def load_arrays(self, arrays: Dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy values in place (parameter identity is preserved)."""
        missing = [name for name in self._params if name not in arrays]
        unexpected = [name for name in arrays if name not in self._params]
        if strict and (missing or unexpected):
            raise ConfigError(f"parameter mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, values in arrays.items():
            if name not in self._params:
                continue
            param = self._params[name]
            if tuple(values.shape) != param.shape:
                raise DimensionError(f"stored tensor '{name}' has the wrong shape", values.shape, param.shape)
            param.data[...] = values


@dataclass
class ScaleLadder:
    """Bottom-up features F_1..F_{S+1} and, once modulated, F'_1..F'_{S+1}."""

    features: List[Tensor]
    modulated: Optional[List[Tensor]] = None

    @property
    def lengths(self) -> List[int]:
        return [f.shape[1] for f in self.features]

    @property
    def depth(self) -> int:
        return len(self.features) - 1


@dataclass(frozen=True)
class FrameLayout:
    """How a waveform of `samples` is padded so T' divides by 2^S."""

    samples: int
    frames: int
    padded: int
    pad_left: int
    pad_right: int


def frame_layout(samples: int, config: ModelConfig) -> FrameLayout:
    """
    Padding policy: T' is the smallest multiple of 2^S not below the number
    of frames needed to cover every sample; the waveform is zero-padded
    (left = pad // 2, right = rest) to (T' - 1) * stride + L samples and
    outputs are trimmed back to `samples`.
    """
    win, stride = config.win_samples, config.stride_samples
    if samples < win:
        raise InputError(f"audio of {samples} samples is shorter than one {win}-sample window")
    raw = -(-(samples - win) // stride) + 1
    factor = config.ladder_factor
    frames = -(-raw // factor) * factor
    padded = (frames - 1) * stride + win
    pad = padded - samples
    return FrameLayout(samples, frames, padded, pad // 2, pad - pad // 2)


class AudioEncoder(Module):
    """Conv1d(1 -> N, kernel L, stride L/4, no bias) followed by ReLU."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv1d(1, config.channels, config.win_samples, rng, stride=config.stride_samples, bias=False)

    def forward(self, wave: Tensor) -> Tensor:
        return relu(self.conv(wave))


class DownsampleLayer(Module):
    """Depthwise dilated conv (k=5, s=2, d=2) -> GLN -> PReLU; halves the time axis."""

    def __init__(self, channels: int, rng: np.random.Generator, eps: float):
        super().__init__()
        self.conv = Conv1d(channels, channels, DOWNSAMPLE_KERNEL, rng, stride=DOWNSAMPLE_STRIDE,
                           dilation=DOWNSAMPLE_DILATION, padding=DOWNSAMPLE_PADDING, groups=channels)
        self.norm = GLN(channels, eps)
        self.act = PReLU()

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.norm(self.conv(x)))


class GlobalAttention(Module):
    """Fuse the ladder into G, transform it into G^m, gate every level with sigmoid(up(G^m))."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dropout_rng: np.random.Generator):
        super().__init__()
        n = config.channels
        self.config = config
        self.projection = None
        if config.fusion == "concat" and config.ga_input == "fused_G":
            self.projection = Conv1d((config.depth + 1) * n, n, 1, rng)
        self.mhsa = None
        self.ffn = None
        if config.use_transformer and config.use_mhsa:
            self.mhsa = MultiHeadSelfAttention(n, config.heads, config.dropout, rng, config.gln_eps, dropout_rng)
        if config.use_transformer and config.use_ffn:
            self.ffn = FeedForward(n, config.dropout, rng, config.gln_eps, dropout_rng=dropout_rng)
        self.positional = positional_table(n, config.pos_max_len) if config.use_positional else None

    def fuse(self, ladder: ScaleLadder) -> Tensor:
        top = ladder.features[-1]
        if self.config.ga_input == "top_F":
            return top
        target = top.shape[1]
        pooled = [avg_pool1d(f, target) for f in ladder.features]
        if self.projection is not None:
            return self.projection(stack_channels(pooled))
        g = pooled[0]
        for p in pooled[1:]:
            g = g + p
        return g

    def transform(self, g: Tensor) -> Tensor:
        if self.mhsa is not None:
            g = self.mhsa(g, self.positional)
        if self.ffn is not None:
            g = self.ffn(g)
        return g

    def modulate(self, ladder: ScaleLadder, gm: Tensor) -> ScaleLadder:
        if not self.config.use_topdown_projection:
            ladder.modulated = list(ladder.features[:-1]) + [gm]
            return ladder
        ladder.modulated = [sigmoid(nearest_interp1d(gm, f.shape[1])) * f for f in ladder.features]
        return ladder


class LocalAttentionLayer(Module):
    """D_i = sigmoid(h1(up(D_{i+1}))) * F'_i + h2(up(D_{i+1})); h1, h2 are DWConv(k=5) + GLN."""

    def __init__(self, channels: int, rng: np.random.Generator, eps: float):
        super().__init__()
        pad = LA_KERNEL // 2
        self.gain_conv = Conv1d(channels, channels, LA_KERNEL, rng, padding=pad, groups=channels)
        self.gain_norm = GLN(channels, eps)
        self.bias_conv = Conv1d(channels, channels, LA_KERNEL, rng, padding=pad, groups=channels)
        self.bias_norm = GLN(channels, eps)

    def forward(self, lateral: Tensor, top: Tensor) -> Tensor:
        up = nearest_interp1d(top, lateral.shape[1])
        rho = sigmoid(self.gain_norm(self.gain_conv(up)))
        tau = self.bias_norm(self.bias_conv(up))
        return rho * lateral + tau


class TopDownBlock(Module):
    """One shared-weight unfolding step: W x T' in, W x T' out."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dropout_rng: np.random.Generator):
        super().__init__()
        n, w, eps = config.channels, config.bottleneck, config.gln_eps
        self.config = config
        self.in_proj = Conv1d(w, n, 1, rng)
        self.in_norm = GLN(n, eps)
        self.in_act = PReLU()
        self.downsample = ModuleList(DownsampleLayer(n, rng, eps) for _ in range(config.depth))
        self.ga = GlobalAttention(config, rng, dropout_rng) if config.use_ga else None
        self.la = ModuleList(LocalAttentionLayer(n, rng, eps) for _ in range(config.depth)) if config.use_la else None
        self.out_proj = Conv1d(n, w, 1, rng)

    def encoder_path(self, x: Tensor) -> ScaleLadder:
        f = self.in_act(self.in_norm(self.in_proj(x)))
        if f.shape[1] % self.config.ladder_factor:
            raise DimensionError(f"time length not divisible by 2^{self.config.depth}; padding policy violated",
                                 f.shape)
        features = [f]
        for layer in self.downsample:
            f = layer(f)
            features.append(f)
        return ScaleLadder(features)

    def la_decode(self, ladder: ScaleLadder) -> Tensor:
        levels = ladder.modulated if ladder.modulated is not None else ladder.features
        d = levels[-1]
        for i in range(len(levels) - 2, -1, -1):
            if self.la is not None:
                d = self.la[i](levels[i], d)
            else:
                d = nearest_interp1d(d, levels[i].shape[1]) + levels[i]
        return d

    def forward(self, x: Tensor) -> Tensor:
        ladder = self.encoder_path(x)
        if self.ga is not None:
            gm = self.ga.transform(self.ga.fuse(ladder))
            ladder = self.ga.modulate(ladder, gm)
        return self.out_proj(self.la_decode(ladder))


class MaskHead(Module):
    """C parallel Conv1x1(W -> N) + ReLU, one mask per speaker."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.heads = ModuleList(Conv1d(config.bottleneck, config.channels, 1, rng) for _ in range(config.speakers))

    def forward(self, r: Tensor) -> List[Tensor]:
        return [relu(head(r)) for head in self.heads]


class AudioDecoder(Module):
    """Transposed conv (N -> 1, kernel L, stride L/4); one parameter set shared by every speaker."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.conv = ConvTranspose1d(config.channels, 1, config.win_samples, rng, stride=config.stride_samples)

    def forward(self, embedding: Tensor) -> Tensor:
        return self.conv(embedding)


class TDANet(Module):
    """
    Full separator.

    Args:
        config: Architecture hyperparameters
        seed: Parameter initialization seed
        dropout_seed: Seed of the dropout mask stream (defaults to `seed`)
    """

    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0, dropout_seed: Optional[int] = None):
        super().__init__()
        config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        dropout_rng = np.random.default_rng(seed if dropout_seed is None else dropout_seed)
        object.__setattr__(self, "config", config)
        object.__setattr__(self, "seed", seed)
        object.__setattr__(self, "dropout_rng", dropout_rng)
        self.encoder = AudioEncoder(config, rng)
        self.bottleneck_norm = GLN(config.channels, config.gln_eps)
        self.bottleneck = Conv1d(config.channels, config.bottleneck, 1, rng)
        self.block = TopDownBlock(config, rng, dropout_rng)
        self.masks = MaskHead(config, rng)
        self.decoder = AudioDecoder(config, rng)
        logger.debug(f"Built TDANet: N={config.channels} W={config.bottleneck} S={config.depth} "
                     f"B={config.unfolds} C={config.speakers} params={self.num_parameters():,}")

    @property
    def params(self) -> ParamStore:
        return ParamStore(self.named_parameters(), self.seed)

    def _as_wave(self, wave: Union[Tensor, np.ndarray]) -> Tensor:
        if not isinstance(wave, Tensor):
            wave = Tensor(np.asarray(wave), dtype=self.encoder.conv.weight.dtype)
        if wave.ndim == 1:
            wave = wave.reshape(1, wave.shape[0])
        if wave.ndim != 2 or wave.shape[0] != 1:
            raise InputError(f"expected a mono waveform, got shape {wave.shape}")
        return wave

    def audio_encode(self, wave: Union[Tensor, np.ndarray]) -> Tuple[Tensor, FrameLayout]:
        """Pad to the ladder-friendly length and encode: returns (E, layout)."""
        wave = self._as_wave(wave)
        layout = frame_layout(wave.shape[1], self.config)
        padded = pad1d(wave, layout.pad_left, layout.pad_right)
        return self.encoder(padded), layout

    def encoder_path(self, e: Tensor) -> ScaleLadder:
        return self.block.encoder_path(self.bottleneck(self.bottleneck_norm(e)))

    def ga_fuse(self, ladder: ScaleLadder) -> Tensor:
        self._require_ga()
        return self.block.ga.fuse(ladder)

    def ga_transform(self, g: Tensor) -> Tensor:
        self._require_ga()
        return self.block.ga.transform(g)

    def ga_modulate(self, ladder: ScaleLadder, gm: Tensor) -> ScaleLadder:
        if self.block.ga is None:
            ladder.modulated = list(ladder.features)
            return ladder
        return self.block.ga.modulate(ladder, gm)

    def la_decode(self, ladder: ScaleLadder) -> Tensor:
        return self.block.la_decode(ladder)

    def _require_ga(self) -> None:
        if self.block.ga is None:
            raise ConfigError("global attention is disabled in this config (use_ga=False)")

    def unfold(self, e: Tensor) -> Tensor:
        """R_0 = block(X), R_b = block(X + R_{b-1}); X is the bottlenecked embedding."""
        x = self.bottleneck(self.bottleneck_norm(e))
        r = self.block(x)
        for _ in range(1, self.config.unfolds):
            r = self.block(x + r)
        return r

    def mask_head(self, r: Tensor) -> List[Tensor]:
        return self.masks(r)

    def decode(self, e: Tensor, masks: Sequence[Tensor], layout: FrameLayout) -> Tensor:
        """Apply each mask to E, decode with the shared decoder and trim: C x T."""
        outputs = [self.decoder(e * m) for m in masks]
        stacked = concat(outputs, axis=0)
        return stacked[:, layout.pad_left:layout.pad_left + layout.samples]

    def forward(self, wave: Union[Tensor, np.ndarray]) -> Tensor:
        """Differentiable separation: 1 x T (or T) waveform -> C x T estimates."""
        e, layout = self.audio_encode(wave)
        return self.decode(e, self.mask_head(self.unfold(e)), layout)

    def separate(self, wave: Union[Tensor, np.ndarray], sample_rate: Optional[int] = None) -> List[np.ndarray]:
        """Inference: returns C waveforms of the input length."""
        if sample_rate is not None and sample_rate != self.config.sample_rate:
            raise InputError(f"input is {sample_rate} Hz but the model expects {self.config.sample_rate} Hz")
        with inference_mode(self):
            estimates = self.forward(wave)
        return [row.copy() for row in estimates.data]


@contextmanager
def inference_mode(model: Module) -> Iterator[Module]:
    """Eval mode without tape recording; restores the previous mode on exit."""
    was_training = model.training
    if was_training:
        model.eval()
    try:
        with no_grad():
            yield model
    finally:
        if was_training:
            model.train()


def _conv_params(c_in: int, c_out: int, k: int, groups: int = 1, bias: bool = True) -> int:
    return c_out * (c_in // groups) * k + (c_out if bias else 0)


def _gln_params(c: int) -> int:
    return 2 * c


def param_breakdown(config: ModelConfig) -> "OrderedDict[str, int]":
    """Parameter count per component; analytic, no model is built."""
    n, w, s, c, win = config.channels, config.bottleneck, config.depth, config.speakers, config.win_samples
    counts: "OrderedDict[str, int]" = OrderedDict()
    counts["audio_encoder"] = _conv_params(1, n, win, bias=False)
    counts["bottleneck"] = _gln_params(n) + _conv_params(n, w, 1)
    counts["block.in_proj"] = _conv_params(w, n, 1) + _gln_params(n) + 1
    counts["block.downsample"] = s * (_conv_params(n, n, DOWNSAMPLE_KERNEL, groups=n) + _gln_params(n) + 1)
    fusion = mhsa = ffn = 0
    if config.use_ga:
        if config.fusion == "concat" and config.ga_input == "fused_G":
            fusion = _conv_params((s + 1) * n, n, 1)
        if config.use_transformer and config.use_mhsa:
            mhsa = 4 * _conv_params(n, n, 1) + _gln_params(n)
        if config.use_transformer and config.use_ffn:
            ffn = (_conv_params(n, 2 * n, 1, bias=False) + _gln_params(2 * n)
                   + _conv_params(2 * n, 2 * n, 5, groups=2 * n) + _gln_params(2 * n)
                   + _conv_params(2 * n, n, 1, bias=False) + _gln_params(n))
    counts["block.ga_fusion"] = fusion
    counts["block.mhsa"] = mhsa
    counts["block.ffn"] = ffn
    la_layer = 2 * (_conv_params(n, n, LA_KERNEL, groups=n) + _gln_params(n))
    counts["block.la"] = s * la_layer if config.use_la else 0
    counts["block.out_proj"] = _conv_params(n, w, 1)
    counts["mask_head"] = c * _conv_params(w, n, 1)
    counts["audio_decoder"] = _conv_params(n, 1, win)
    return counts


def mac_breakdown(config: ModelConfig, seconds: float = 1.0) -> "OrderedDict[str, int]":
    """
    Multiply-accumulates per component for `seconds` of audio.

    One MAC per multiply in convolution inner loops; attention counts the
    Q/K/V/output projections plus QK^T and attention x V. Normalizations,
    activations, pooling, interpolation and elementwise gates are free.
    Block entries already include the B unfolds.
    """
    n, w, s, c = config.channels, config.bottleneck, config.depth, config.speakers
    win, b = config.win_samples, config.unfolds
    frames = frame_layout(int(round(seconds * config.sample_rate)), config).frames
    lengths = [frames // 2 ** i for i in range(s + 1)]
    top = lengths[-1]
    per_block: "OrderedDict[str, int]" = OrderedDict()
    per_block["block.in_proj"] = w * n * frames
    per_block["block.downsample"] = sum(n * DOWNSAMPLE_KERNEL * length for length in lengths[1:])
    fusion = mhsa = ffn = 0
    if config.use_ga:
        if config.fusion == "concat" and config.ga_input == "fused_G":
            fusion = (s + 1) * n * n * top
        if config.use_transformer and config.use_mhsa:
            mhsa = 4 * n * n * top + 2 * top * top * n
        if config.use_transformer and config.use_ffn:
            ffn = 2 * n * n * top + 2 * n * 5 * top + 2 * n * n * top
    per_block["block.ga_fusion"] = fusion
    per_block["block.mhsa"] = mhsa
    per_block["block.ffn"] = ffn
    per_block["block.la"] = sum(2 * n * LA_KERNEL * length for length in lengths[:-1]) if config.use_la else 0
    per_block["block.out_proj"] = n * w * frames

    macs: "OrderedDict[str, int]" = OrderedDict()
    macs["audio_encoder"] = n * win * frames
    macs["bottleneck"] = n * w * frames
    for name, value in per_block.items():
        macs[name] = b * value
    macs["mask_head"] = c * w * n * frames
    macs["audio_decoder"] = c * n * win * frames
    return macs


def count_params(config: ModelConfig) -> int:
    return int(sum(param_breakdown(config).values()))


def count_macs(config: ModelConfig, seconds: float = 1.0) -> int:
    return int(sum(mac_breakdown(config, seconds).values()))


def block_macs(config: ModelConfig, seconds: float = 1.0) -> int:
    """MACs of the unfolded block portion only (encoder, masks and decoder excluded)."""
    return int(sum(v for k, v in mac_breakdown(config, seconds).items() if k.startswith("block.")))
