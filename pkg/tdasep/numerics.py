"""
Dense tensor arithmetic with reverse-mode differentiation.

Tensors are channel-major numpy arrays (channels x time) of rank <= 3. Every
differentiable primitive is a Function subclass; applying it under an enabled
grad mode records a TapeNode on the output, and backward() walks the recorded
graph in reverse topological order, visiting each node once.
"""

import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigError, DimensionError, NonFiniteError, TapeStateError
from .logger_config import logger

MAX_RANK = 3

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_finite_checks = os.getenv("TDANET_DEBUG") == "1"


class _GradMode(threading.local):
    enabled = True


_grad_mode = _GradMode()


def get_default_dtype() -> type:
    return _default_dtype


def set_default_dtype(name: str) -> None:
    """
    Set the precision new tensors are created with.

    Args:
        name: "float32" (training/benchmarks) or "float64" (gradient checks)
    """
    global _default_dtype
    if name not in _DTYPES:
        raise ConfigError(f"Unknown precision '{name}'. Expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default precision."""
    previous = np.dtype(_default_dtype).name
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(previous)


def set_finite_checks(enabled: Optional[bool] = None) -> None:
    """
    Make every primitive assert its output is finite (debug/test builds).

    With `enabled=None` the switch follows $TDANET_DEBUG (on when it is "1").
    """
    global _finite_checks
    if enabled is None:
        enabled = os.getenv("TDANET_DEBUG") == "1"
    _finite_checks = bool(enabled)


def finite_checks_enabled() -> bool:
    return _finite_checks


def is_grad_enabled() -> bool:
    return _grad_mode.enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Inference mode: primitives applied inside record no tape."""
    previous = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


@dataclass
class TapeNode:
    """One recorded primitive application: op name, inputs and backward rule."""

    op: str
    inputs: Tuple["Tensor", ...]
    fn: Optional["Function"]
    released: bool = False

    def release(self) -> None:
        self.fn = None
        self.inputs = ()
        self.released = True


class Tensor:
    """
    Dense array of rank <= 3 with an optional gradient accumulator.

    Values are immutable after construction; only `grad` accumulates (and the
    optimizer updates parameter leaves in place).
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    # numpy defers `ndarray <op> Tensor` to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Optional[Any] = None,
                 name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
        if array.ndim > MAX_RANK:
            raise DimensionError(f"Tensor rank must be <= {MAX_RANK}", array.shape)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(array)
        out.requires_grad = False
        out.grad = None
        out.node = None
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() needs a single-element tensor", self.shape)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise DimensionError("gradient does not match tensor", grad.shape, self.data.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        tag = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic

    def __add__(self, other: "ArrayLike") -> "Tensor":
        return Add.apply(self, _as_tensor(other, self))

    def __radd__(self, other: "ArrayLike") -> "Tensor":
        return Add.apply(_as_tensor(other, self), self)

    def __sub__(self, other: "ArrayLike") -> "Tensor":
        return Sub.apply(self, _as_tensor(other, self))

    def __rsub__(self, other: "ArrayLike") -> "Tensor":
        return Sub.apply(_as_tensor(other, self), self)

    def __mul__(self, other: "ArrayLike") -> "Tensor":
        return Mul.apply(self, _as_tensor(other, self))

    def __rmul__(self, other: "ArrayLike") -> "Tensor":
        return Mul.apply(_as_tensor(other, self), self)

    def __truediv__(self, other: "ArrayLike") -> "Tensor":
        return Div.apply(self, _as_tensor(other, self))

    def __rtruediv__(self, other: "ArrayLike") -> "Tensor":
        return Div.apply(_as_tensor(other, self), self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return MatMul.apply(self, _as_tensor(other, self))

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    # reductions and shape

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes)

    # elementwise

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def relu(self) -> "Tensor":
        return Relu.apply(self)

    def clip(self, low: float, high: float) -> "Tensor":
        return Clip.apply(self, low=low, high=high)


ArrayLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def _as_tensor(value: ArrayLike, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype)


def tensor(data: Any, requires_grad: bool = False, dtype: Optional[Any] = None,
           name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def zeros(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


def ones(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_default_dtype), requires_grad=requires_grad)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Function:
    """
    Base class of differentiable primitives.

    Subclasses implement `forward` on raw arrays (saving whatever backward
    needs on `self`) and `backward`, which maps the gradient of the output to
    one gradient (or None) per input.
    """

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        fn = cls()
        result = fn.forward(*(t.data for t in inputs), **kwargs)
        if _finite_checks and not np.all(np.isfinite(result)):
            raise NonFiniteError(f"non-finite output of shape {np.shape(result)}", op=cls.__name__)
        out = Tensor._wrap(result)
        if _grad_mode.enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node = TapeNode(op=cls.__name__, inputs=tuple(inputs), fn=fn)
        return out


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, a, exponent):
        self.a, self.exponent = a, exponent
        return a ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.a ** (self.exponent - 1),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad / (2.0 * self.out),)


class Sigmoid(Function):
    def forward(self, a):
        self.out = expit(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.mask,)


class PReLU(Function):
    def forward(self, a, slope):
        self.a, self.slope = a, slope
        self.negative = a < 0
        return np.where(self.negative, slope * a, a).astype(a.dtype, copy=False)

    def backward(self, grad):
        grad_a = np.where(self.negative, grad * self.slope, grad)
        grad_slope = np.sum(grad * np.where(self.negative, self.a, 0)).reshape(self.slope.shape)
        return grad_a, grad_slope


class Clip(Function):
    def forward(self, a, low, high):
        self.mask = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad):
        return (grad * self.mask,)


class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.inverse = tuple(np.argsort(axes))
        return np.transpose(a, axes)

    def backward(self, grad):
        return (np.transpose(grad, self.inverse),)


class MatMul(Function):
    def forward(self, a, b):
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError("matmul inner dimensions differ", a.shape, b.shape)
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        grad_a = grad @ np.swapaxes(self.b, -1, -2)
        grad_b = np.swapaxes(self.a, -1, -2) @ grad
        return grad_a, grad_b


class Softmax(Function):
    def forward(self, a, axis):
        self.axis = axis
        shifted = a - a.max(axis=axis, keepdims=True)
        exp = np.exp(shifted)
        self.out = exp / exp.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        dot = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (grad - dot),)


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.index, self.dtype = a.shape, index, a.dtype
        return np.array(a[index])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.bounds, axis=self.axis))


class Pad1d(Function):
    def forward(self, a, left, right):
        self.left, self.length = left, a.shape[-1]
        widths = [(0, 0)] * (a.ndim - 1) + [(left, right)]
        return np.pad(a, widths)

    def backward(self, grad):
        return (grad[..., self.left:self.left + self.length],)


class Dropout(Function):
    def forward(self, a, mask):
        self.mask = mask
        return a * mask

    def backward(self, grad):
        return (grad * self.mask,)


class GlobalNorm(Function):
    """Standardize over every element jointly (the GLN core, before affine)."""

    def forward(self, a, eps):
        mean = a.mean()
        centered = a - mean
        self.inv_std = 1.0 / np.sqrt((centered * centered).mean() + eps)
        self.normalized = centered * self.inv_std
        return self.normalized

    def backward(self, grad):
        xhat = self.normalized
        return (self.inv_std * (grad - grad.mean() - xhat * (grad * xhat).mean()),)


class Conv1d(Function):
    def forward(self, x, w, b=None, stride=1, dilation=1, padding=0, groups=1):
        c_in, length = x.shape
        c_out, c_in_group, k = w.shape
        self.geometry = (c_in, length, c_out, k, stride, dilation, padding, groups)
        self.has_bias = b is not None
        if k == 1 and stride == 1 and padding == 0 and groups == 1:
            self.pointwise = True
            self.x, self.w2 = x, w[:, :, 0]
            out = self.w2 @ x
        else:
            self.pointwise = False
            padded = np.pad(x, ((0, 0), (padding, padding))) if padding else x
            self.padded_length = padded.shape[1]
            span = dilation * (k - 1) + 1
            windows = sliding_window_view(padded, span, axis=1)[:, ::stride, ::dilation]
            t_out = windows.shape[1]
            self.windows = windows.reshape(groups, c_in_group, t_out, k)
            self.wg = w.reshape(groups, c_out // groups, c_in_group, k)
            out = np.einsum("gctk,gock->got", self.windows, self.wg, optimize=True).reshape(c_out, t_out)
        if b is not None:
            out = out + b[:, None]
        return out

    def backward(self, grad):
        c_in, length, c_out, k, stride, dilation, padding, groups = self.geometry
        grad_b = grad.sum(axis=1) if self.has_bias else None
        if self.pointwise:
            grad_w = (grad @ self.x.T)[:, :, None]
            grad_x = self.w2.T @ grad
            return (grad_x, grad_w, grad_b) if self.has_bias else (grad_x, grad_w)
        t_out = grad.shape[1]
        grouped = grad.reshape(groups, c_out // groups, t_out)
        grad_w = np.einsum("got,gctk->gock", grouped, self.windows, optimize=True).reshape(c_out, c_in // groups, k)
        grad_windows = np.einsum("got,gock->gctk", grouped, self.wg, optimize=True).reshape(c_in, t_out, k)
        grad_padded = np.zeros((c_in, self.padded_length), dtype=grad.dtype)
        last = stride * (t_out - 1) + 1
        for tap in range(k):
            start = tap * dilation
            grad_padded[:, start:start + last:stride] += grad_windows[:, :, tap]
        grad_x = grad_padded[:, padding:padding + length]
        return (grad_x, grad_w, grad_b) if self.has_bias else (grad_x, grad_w)


class ConvTranspose1d(Function):
    def forward(self, x, w, b=None, stride=1):
        self.x, self.w, self.stride = x, w, stride
        self.has_bias = b is not None
        length = x.shape[1]
        c_out, k = w.shape[1], w.shape[2]
        columns = np.tensordot(w, x, axes=([0], [0]))  # (c_out, k, length)
        out = np.zeros((c_out, (length - 1) * stride + k), dtype=columns.dtype)
        last = stride * (length - 1) + 1
        for tap in range(k):
            out[:, tap:tap + last:stride] += columns[:, tap, :]
        if b is not None:
            out += b[:, None]
        return out

    def backward(self, grad):
        length = self.x.shape[1]
        k = self.w.shape[2]
        last = self.stride * (length - 1) + 1
        columns = np.stack([grad[:, tap:tap + last:self.stride] for tap in range(k)], axis=1)
        grad_x = np.tensordot(self.w, columns, axes=([1, 2], [0, 1]))
        grad_w = np.einsum("ct,okt->cok", self.x, columns, optimize=True)
        if self.has_bias:
            return grad_x, grad_w, grad.sum(axis=1)
        return grad_x, grad_w


class AvgPool1d(Function):
    def forward(self, a, target_len):
        channels, length = a.shape
        self.window = length // target_len
        return a.reshape(channels, target_len, self.window).mean(axis=2)

    def backward(self, grad):
        return (np.repeat(grad / self.window, self.window, axis=1),)


class NearestInterp1d(Function):
    def forward(self, a, target_len):
        self.shape = a.shape
        length = a.shape[1]
        self.index = (np.arange(target_len) * length) // target_len
        self.ratio = target_len // length if target_len % length == 0 else None
        return a[:, self.index]

    def backward(self, grad):
        channels, length = self.shape
        if self.ratio is not None:
            return (grad.reshape(channels, length, self.ratio).sum(axis=2),)
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, (slice(None), self.index), grad)
        return (out,)


def _check_conv_geometry(op: str, stride: int, dilation: int) -> None:
    if stride < 1 or dilation < 1:
        raise ConfigError(f"{op}: stride and dilation must be positive (got stride={stride}, dilation={dilation})")


def conv1d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           dilation: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """
    1-D cross-correlation of a (N_in x T) input with (N_out x N_in/groups x K) kernels.

    Args:
        x: Input features, channels x time
        kernels: Kernel bank
        bias: Optional per-output-channel bias of shape (N_out,)
        stride: Output step
        dilation: Spacing between kernel taps
        padding: Zero samples added on both ends
        groups: Channel groups (groups == N_in gives a depthwise convolution)

    Returns:
        Tensor of shape N_out x (floor((T + 2p - d(K-1) - 1)/s) + 1)
    """
    _check_conv_geometry("conv1d", stride, dilation)
    if x.ndim != 2 or kernels.ndim != 3:
        raise DimensionError("conv1d expects a rank-2 input and rank-3 kernels", x.shape, kernels.shape)
    c_in, length = x.shape
    c_out, c_in_group, k = kernels.shape
    if groups < 1 or c_in % groups or c_out % groups or c_in_group != c_in // groups:
        raise DimensionError(f"conv1d channel/group mismatch (groups={groups})", x.shape, kernels.shape)
    if length + 2 * padding < dilation * (k - 1) + 1:
        raise DimensionError(
            f"conv1d input too short for kernel span {dilation * (k - 1) + 1} with padding {padding}",
            x.shape, kernels.shape)
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError("conv1d bias must have one entry per output channel", bias.shape, kernels.shape)
    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return Conv1d.apply(*inputs, stride=stride, dilation=dilation, padding=padding, groups=groups)


def transposed_conv1d(x: Tensor, kernels: Tensor, stride: int = 1, bias: Optional[Tensor] = None) -> Tensor:
    """
    Transposed 1-D convolution (overlap-add), the adjoint of conv1d.

    `kernels` has shape (N_in x N_out x K), i.e. the kernel bank of the conv1d
    it is adjoint to. Output length is (T - 1) * stride + K.
    """
    _check_conv_geometry("transposed_conv1d", stride, 1)
    if x.ndim != 2 or kernels.ndim != 3:
        raise DimensionError("transposed_conv1d expects a rank-2 input and rank-3 kernels", x.shape, kernels.shape)
    if x.shape[0] != kernels.shape[0]:
        raise DimensionError("transposed_conv1d input channels differ from kernel bank", x.shape, kernels.shape)
    if bias is not None and bias.shape != (kernels.shape[1],):
        raise DimensionError("transposed_conv1d bias must have one entry per output channel", bias.shape, kernels.shape)
    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return ConvTranspose1d.apply(*inputs, stride=stride)


def avg_pool1d(x: Tensor, target_len: int) -> Tensor:
    """Average non-overlapping windows so the time axis shrinks to `target_len`."""
    if x.ndim != 2 or target_len < 1 or x.shape[1] % target_len:
        raise DimensionError(f"avg_pool1d needs a length divisible by target {target_len}", x.shape)
    if x.shape[1] == target_len:
        return x
    return AvgPool1d.apply(x, target_len=target_len)


def nearest_interp1d(x: Tensor, target_len: int) -> Tensor:
    """Nearest-neighbour resampling of the time axis: out[:, t] = x[:, floor(t*T/target)]."""
    if x.ndim != 2 or target_len < 1:
        raise DimensionError(f"nearest_interp1d needs a rank-2 input and target >= 1 (got {target_len})", x.shape)
    if x.shape[1] == target_len:
        return x
    return NearestInterp1d.apply(x, target_len=target_len)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    return PReLU.apply(x, slope)


def global_norm(x: Tensor, eps: float = 1e-8) -> Tensor:
    return GlobalNorm.apply(x, eps=eps)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    return Concat.apply(*tensors, axis=axis)


def pad1d(x: Tensor, left: int, right: int) -> Tensor:
    if left < 0 or right < 0:
        raise DimensionError(f"pad1d widths must be non-negative (got {left}, {right})", x.shape)
    if left == 0 and right == 0:
        return x
    return Pad1d.apply(x, left=left, right=right)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ConfigError(f"dropout probability must be < 1 (got {p})")
    keep = rng.random(x.shape) >= p
    mask = (keep / (1.0 - p)).astype(x.dtype)
    return Dropout.apply(x, mask=mask)


def _topological_order(root: Tensor) -> List[Tensor]:
    """Post-order over tensors reachable from root that require grad."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        current, expanded = stack.pop()
        if expanded:
            order.append(current)
            continue
        if id(current) in visited:
            continue
        visited.add(id(current))
        stack.append((current, True))
        node = current.node
        if node is not None and not node.released:
            for parent in node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(root: Tensor, retain_graph: bool = False) -> None:
    """
    Accumulate d(root)/d(leaf) into `.grad` of every reachable requires_grad leaf.

    Args:
        root: Scalar tensor
        retain_graph: Keep the tape so a later call accumulates again;
            by default the tape is released once gradients are propagated
    """
    if root.size != 1:
        raise DimensionError("backward needs a scalar root", root.shape)
    if root.node is None:
        if root.requires_grad:
            root._accumulate(np.ones_like(root.data))
            return
        raise TapeStateError("root has no tape: it was detached, built under no_grad, "
                             "or does not depend on any requires_grad leaf")
    if root.node.released:
        raise TapeStateError(f"tape behind {root.node.op} was already consumed by backward(); "
                             "use retain_graph=True to backpropagate twice")

    order = _topological_order(root)
    pending: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for current in reversed(order):
        grad = pending.pop(id(current), None)
        if grad is None:
            continue
        node = current.node
        if node is None:
            current._accumulate(grad)
            continue
        input_grads = node.fn.backward(grad)
        for parent, parent_grad in zip(node.inputs, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.data.shape:
                parent_grad = _unbroadcast(parent_grad, parent.data.shape)
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    if not retain_graph:
        for current in order:
            if current.node is not None:
                current.node.release()


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients with central differences."""

    max_rel_error: float
    tolerance: float
    passed: bool
    worst_input: Optional[str] = None
    worst_index: Optional[Tuple[int, ...]] = None
    per_input: Dict[str, float] = field(default_factory=dict)
    checked_elements: int = 0

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = (f"[{status}] max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.0e}) "
                f"over {self.checked_elements} elements")
        if self.worst_input is not None:
            line += f"; worst {self.worst_input}{list(self.worst_index)}"
        return line


def grad_check(f: Callable[..., Tensor], inputs: Union[Sequence[Tensor], Mapping[str, Tensor]],
               tol: float = 1e-4, eps: float = 1e-5, max_elements: Optional[int] = None,
               seed: int = 0) -> GradCheckReport:
    """
    Compare analytic gradients against central finite differences.

    Args:
        f: Scalar-valued function. Called as f(*inputs) for a sequence, or
            f() for a name -> tensor mapping (e.g. a module's parameters
            captured in a closure)
        inputs: Tensors to differentiate with respect to
        tol: Pass threshold on the maximum relative error
        eps: Finite-difference step
        max_elements: Check a seeded random subset of at most this many
            elements per tensor
        seed: Subset selection seed

    Returns:
        GradCheckReport. The relative error of an element is
        |analytic - numeric| / max(|analytic|, |numeric|, floor), where the
        floor is 1e-3 of the largest gradient magnitude of the same tensor,
        so negligible entries are judged against the tensor's own scale.
    """
    if isinstance(inputs, Mapping):
        named = list(inputs.items())

        def evaluate() -> Tensor:
            return f()
    else:
        named = [(f"input{i}", t) for i, t in enumerate(inputs)]

        def evaluate() -> Tensor:
            return f(*inputs)

    for name, t in named:
        if t.dtype != np.float64:
            logger.warning(f"grad_check on {name} in {t.dtype.name}; use precision('float64') for meaningful errors")
        t.zero_grad()
        t.requires_grad = True

    backward(evaluate())

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, tolerance=tol, passed=True)
    with no_grad():
        for name, t in named:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            if max_elements is not None and flat.size > max_elements:
                chosen = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            else:
                chosen = np.arange(flat.size)
            numeric = np.empty(len(chosen))
            for j, position in enumerate(chosen):
                original = flat[position]
                flat[position] = original + eps
                plus = evaluate().item()
                flat[position] = original - eps
                minus = evaluate().item()
                flat[position] = original
                numeric[j] = (plus - minus) / (2.0 * eps)
            picked = analytic.reshape(-1)[chosen].astype(np.float64)
            scale = max(np.max(np.abs(picked), initial=0.0), np.max(np.abs(numeric), initial=0.0))
            floor = max(1e-3 * scale, 1e-12)
            errors = np.abs(picked - numeric) / np.maximum(np.maximum(np.abs(picked), np.abs(numeric)), floor)
            worst = int(np.argmax(errors)) if errors.size else 0
            input_error = float(errors[worst]) if errors.size else 0.0
            report.per_input[name] = input_error
            report.checked_elements += int(errors.size)
            if input_error >= report.max_rel_error:
                report.max_rel_error = input_error
                report.worst_input = name
                report.worst_index = tuple(int(i) for i in np.unravel_index(chosen[worst], t.shape)) if errors.size else ()
    report.passed = report.max_rel_error < tol
    logger.debug(f"grad_check: {report.summary()}")
    return report
