"""
Layer tests: parameter registry, normalization, attention and per-layer gradients.
"""

import numpy as np
import pytest

from tdasep.errors import ConfigError, DimensionError
from tdasep.gradcheck import LAYER_TOL, layer_names, layer_suite
from tdasep.layers import (
    GLN,
    Conv1d,
    Dropout,
    FeedForward,
    ModuleList,
    MultiHeadSelfAttention,
    PReLU,
    positional_table,
)
from tdasep.numerics import Tensor, no_grad


def test_parameters_register_in_declaration_order(rng):
    layers = ModuleList([Conv1d(2, 3, 1, rng), Conv1d(3, 3, 5, rng, groups=3, bias=False)])
    names = [name for name, _ in layers.named_parameters()]
    assert names == ["0.weight", "0.bias", "1.weight"]
    assert layers.num_parameters() == 3 * 2 + 3 + 3 * 5


def test_gln_starts_as_plain_standardization(rng):
    norm = GLN(4)
    out = norm(Tensor(5.0 + 3.0 * rng.standard_normal((4, 64)))).data
    assert abs(out.mean()) < 1e-5
    assert abs(out.std() - 1.0) < 1e-4
    with pytest.raises(DimensionError):
        norm(Tensor(np.ones((3, 8))))


def test_prelu_default_slope():
    assert np.allclose(PReLU()(Tensor([[-4.0, 2.0]])).data, [[-1.0, 2.0]])


def test_dropout_modes(rng):
    layer = Dropout(0.5, np.random.default_rng(0))
    x = Tensor(np.ones((4, 100)))
    out = layer(x).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert 0 < np.count_nonzero(out) < out.size
    layer.eval()
    assert layer(x) is x
    with pytest.raises(ConfigError):
        Dropout(1.0, rng)


def test_positional_table():
    pos = positional_table(8, 32)
    t = np.arange(32)
    assert pos.table.shape == (8, 32)
    assert np.allclose(pos.table[0], np.sin(t))
    assert np.allclose(pos.table[1], np.cos(t))
    assert not pos.table.flags.writeable
    assert positional_table(8, 32) is pos
    with pytest.raises(ConfigError):
        positional_table(7, 32)
    with pytest.raises(DimensionError):
        pos.frames(33)


def test_attention_weights_are_row_stochastic(float64, rng):
    attention = MultiHeadSelfAttention(8, 2, 0.0, rng)
    weights = attention.attention_weights(Tensor(rng.standard_normal((8, 6)))).data
    assert weights.shape == (2, 6, 6)
    assert np.allclose(weights.sum(axis=-1), 1.0)


def test_attention_without_positions_is_permutation_equivariant(float64, rng):
    attention = MultiHeadSelfAttention(8, 2, 0.0, rng)
    attention.eval()
    g = rng.standard_normal((8, 4))
    order = np.array([2, 0, 3, 1])
    with no_grad():
        out = attention(Tensor(g)).data
        permuted = attention(Tensor(g[:, order])).data
    assert np.allclose(permuted, out[:, order], atol=1e-12)


def test_attention_positions_break_equivariance(float64, rng):
    attention = MultiHeadSelfAttention(8, 2, 0.0, rng)
    attention.eval()
    g = rng.standard_normal((8, 4))
    order = np.array([2, 0, 3, 1])
    pos = positional_table(8, 16)
    out = attention(Tensor(g), pos).data
    permuted = attention(Tensor(g[:, order]), pos).data
    assert not np.allclose(permuted, out[:, order])


def test_attention_rejects_bad_heads(rng):
    with pytest.raises(ConfigError):
        MultiHeadSelfAttention(6, 4, 0.0, rng)


def test_feed_forward_shape_and_parameters(rng):
    ffn = FeedForward(4, 0.0, rng)
    assert ffn(Tensor(rng.standard_normal((4, 10)))).shape == (4, 10)
    expected = 4 * 8 + 2 * 8 + (8 * 5 + 8) + 2 * 8 + 8 * 4 + 2 * 4
    assert ffn.num_parameters() == expected
    with pytest.raises(DimensionError):
        ffn(Tensor(np.ones((3, 10))))


def test_gln_ignores_global_shift_and_scale(float64, rng):
    norm = GLN(6)
    x = rng.standard_normal((6, 40))
    assert np.allclose(norm(Tensor(3.5 * x + 2.0)).data, norm(Tensor(x)).data, atol=1e-6)


def test_attention_with_silenced_value_path_is_identity(float64, rng):
    attention = MultiHeadSelfAttention(8, 2, 0.0, rng)
    for conv in (attention.value, attention.output):
        conv.weight.data[...] = 0.0
        conv.bias.data[...] = 0.0
    g = rng.standard_normal((8, 12))
    assert np.allclose(attention(Tensor(g), positional_table(8, 16)).data, g, atol=1e-12)


def test_feed_forward_with_silenced_projection_is_identity(float64, rng):
    ffn = FeedForward(4, 0.0, rng)
    ffn.project.weight.data[...] = 0.0
    x = rng.standard_normal((4, 16))
    assert np.allclose(ffn(Tensor(x)).data, x, atol=1e-12)


@pytest.mark.parametrize("name", layer_names())
def test_layer_gradients(name):
    [result] = layer_suite(only=[name])
    assert result.passed, result.line()
    assert result.report.max_rel_error < LAYER_TOL
