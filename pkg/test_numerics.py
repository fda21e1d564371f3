"""
Tensor, tape and primitive tests.
"""

import numpy as np
import pytest

from tdasep.errors import ConfigError, DimensionError, NonFiniteError, TapeStateError
from tdasep.numerics import (
    Function,
    Tensor,
    avg_pool1d,
    backward,
    concat,
    conv1d,
    finite_checks_enabled,
    get_default_dtype,
    global_norm,
    grad_check,
    is_grad_enabled,
    nearest_interp1d,
    no_grad,
    pad1d,
    precision,
    set_finite_checks,
    softmax,
    transposed_conv1d,
)


def brute_conv1d(x, w, stride=1, dilation=1, padding=0, groups=1):
    c_in, length = x.shape
    c_out, c_in_group, k = w.shape
    padded = np.pad(x, ((0, 0), (padding, padding)))
    t_out = (length + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((c_out, t_out))
    per_group = c_out // groups
    for o in range(c_out):
        g = o // per_group
        for t in range(t_out):
            for c in range(c_in_group):
                for tap in range(k):
                    out[o, t] += w[o, c, tap] * padded[g * c_in_group + c, t * stride + tap * dilation]
    return out


# conv1d

def test_conv1d_identity_kernel():
    out = conv1d(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones((1, 1, 1))))
    assert np.array_equal(out.data, [[1.0, 2.0, 3.0]])


def test_conv1d_two_tap_sum():
    out = conv1d(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones((1, 1, 2))))
    assert np.array_equal(out.data, [[3.0, 5.0]])


def test_conv1d_downsample_geometry():
    out = conv1d(Tensor(np.ones((1, 8))), Tensor(np.ones((1, 1, 5))), stride=2, dilation=2, padding=4)
    assert out.shape == (1, 4)


@pytest.mark.parametrize("stride,dilation,padding,groups", [(1, 1, 0, 1), (2, 2, 4, 1), (3, 1, 2, 2), (2, 2, 4, 4)])
def test_conv1d_matches_brute_force(float64, rng, stride, dilation, padding, groups):
    x = rng.standard_normal((4, 23))
    w = rng.standard_normal((8, 4 // groups, 5))
    out = conv1d(Tensor(x), Tensor(w), stride=stride, dilation=dilation, padding=padding, groups=groups)
    assert np.allclose(out.data, brute_conv1d(x, w, stride, dilation, padding, groups), atol=1e-12)


def test_conv1d_rejects_bad_geometry():
    x, w = Tensor(np.ones((1, 8))), Tensor(np.ones((1, 1, 3)))
    with pytest.raises(ConfigError):
        conv1d(x, w, stride=0)
    with pytest.raises(ConfigError):
        conv1d(x, w, dilation=0)
    with pytest.raises(DimensionError):
        conv1d(Tensor(np.ones((1, 2))), w)
    with pytest.raises(DimensionError):
        conv1d(Tensor(np.ones((3, 8))), Tensor(np.ones((2, 1, 3))), groups=2)


# transposed conv

def test_transposed_conv_overlap_add():
    out = transposed_conv1d(Tensor([[1.0, 1.0]]), Tensor(np.ones((1, 1, 4))), stride=2)
    assert np.array_equal(out.data, [[1.0, 1.0, 2.0, 2.0, 1.0, 1.0]])


def test_transposed_conv_is_adjoint_of_conv(float64, rng):
    k, stride, t_out = 8, 2, 9
    length = (t_out - 1) * stride + k
    w = rng.standard_normal((3, 2, k))
    x = rng.standard_normal((2, length))
    y = rng.standard_normal((3, t_out))
    forward = conv1d(Tensor(x), Tensor(w), stride=stride).data
    adjoint = transposed_conv1d(Tensor(y), Tensor(w), stride=stride).data
    assert adjoint.shape == x.shape
    assert np.isclose(np.sum(forward * y), np.sum(x * adjoint), rtol=1e-12)


# pooling, interpolation, normalization

def test_avg_pool_and_nearest_interp():
    pooled = avg_pool1d(Tensor([[1.0, 2.0, 3.0, 4.0]]), 2)
    assert np.array_equal(pooled.data, [[1.5, 3.5]])
    upsampled = nearest_interp1d(Tensor([[1.0, 2.0]]), 4)
    assert np.array_equal(upsampled.data, [[1.0, 1.0, 2.0, 2.0]])
    x = Tensor([[1.0, 2.0, 3.0]])
    assert avg_pool1d(x, 3) is x
    with pytest.raises(DimensionError):
        avg_pool1d(Tensor(np.ones((1, 6))), 4)


def test_pool_then_upsample_keeps_window_means(float64, rng):
    x = rng.standard_normal((3, 24))
    restored = nearest_interp1d(avg_pool1d(Tensor(x), 6), 24).data
    windows = x.reshape(3, 6, 4).mean(axis=-1)
    assert np.allclose(restored.reshape(3, 6, 4), windows[:, :, None])
    assert np.allclose(avg_pool1d(Tensor(restored), 6).data, windows)


def test_global_norm_standardizes(float64, rng):
    out = global_norm(Tensor(3.0 + 2.0 * rng.standard_normal((4, 50)))).data
    assert abs(out.mean()) < 1e-12
    assert abs(out.var() - 1.0) < 1e-6


def test_softmax_rows_are_distributions(rng):
    out = softmax(Tensor(rng.standard_normal((2, 3, 5))), axis=-1).data
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(out > 0)


def test_concat_and_pad_shapes():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.zeros((1, 3)))
    assert concat([a, b], axis=0).shape == (3, 3)
    padded = pad1d(a, 2, 1)
    assert padded.shape == (2, 6)
    assert np.array_equal(padded.data[:, :2], np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        concat([])


# tape

def test_backward_accumulates_through_broadcast(float64):
    a = Tensor(np.array([[1.0], [2.0], [3.0]]), requires_grad=True)
    b = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    ((a + b) * b).sum().backward()
    assert np.allclose(a.grad, b.data.sum(axis=1, keepdims=True))
    assert np.allclose(b.grad, a.data + 2 * b.data)


def test_reused_tensor_gradients_add_up(float64):
    x = Tensor([2.0, -1.0], requires_grad=True)
    (x * x * x).sum().backward()
    assert np.allclose(x.grad, 3 * x.data ** 2)


def test_second_backward_needs_retained_tape(float64):
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum()
    y.backward(retain_graph=True)
    y.backward()
    assert np.allclose(x.grad, 4 * x.data)
    with pytest.raises(TapeStateError):
        y.backward()


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = (x * 2.0).sum()
    assert is_grad_enabled()
    assert y.node is None and not y.requires_grad
    with pytest.raises(TapeStateError):
        backward(y)


def test_backward_needs_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(DimensionError):
        (x * 2.0).backward()


def test_rank_limit():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((1, 1, 1, 1)))


def test_finite_checks_name_the_op():
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError, match="Log"):
        Tensor([-1.0]).log()


@pytest.mark.parametrize("value, expected", [("1", True), ("0", False), ("", False)])
def test_finite_checks_follow_debug_env(monkeypatch, value, expected):
    monkeypatch.setenv("TDANET_DEBUG", value)
    set_finite_checks()
    assert finite_checks_enabled() is expected


def test_precision_context_restores():
    assert get_default_dtype() == np.float32
    with precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ConfigError):
        with precision("float16"):
            pass


# gradient checking

def test_grad_check_passes_for_smooth_function(float64, rng):
    a = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal((4, 2)))
    report = grad_check(lambda a, b: ((a @ b).sigmoid() * (a @ b)).sum(), [a, b])
    assert report.passed, report.summary()
    assert report.checked_elements == 20


class _WrongSquare(Function):
    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, grad):
        return (grad * 3.0 * self.a,)


def test_grad_check_reports_worst_element(float64):
    x = Tensor(np.array([[0.5, -1.0, 2.0]]))
    report = grad_check(lambda x: _WrongSquare.apply(x).sum(), [x])
    assert not report.passed
    assert report.worst_input == "input0"
    assert report.worst_index is not None and len(report.worst_index) == 2
    assert "FAIL" in report.summary()


def test_grad_check_subsamples(float64, rng):
    x = Tensor(rng.standard_normal((10, 10)))
    report = grad_check(lambda x: (x * x).sum(), [x], max_elements=7)
    assert report.checked_elements == 7
    assert report.passed
