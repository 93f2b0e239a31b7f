import numpy as np
import pytest

import paravox.tensor as pt
from paravox import blocks
from paravox.errors import ShapeError
from paravox.gradcheck import grad_check
from paravox.tensor import Tensor


@pytest.fixture(autouse=True)
def high_precision():
    with pt.precision("high"):
        yield


def weighted_sum(out: Tensor, seed=0) -> Tensor:
    w = np.random.default_rng(seed).normal(size=out.shape)
    return (out * Tensor(w)).sum()


# -- sinusoidal embedding ------------------------------------------------------

def test_sinusoid_at_zero_alternates():
    emb = blocks.sinusoidal_embedding(np.array(0.0), 8)
    assert np.allclose(emb.data, [0, 1, 0, 1, 0, 1, 0, 1])


def test_sinusoid_bounded():
    emb = blocks.sinusoidal_embedding(np.linspace(0, 500, 37), 16)
    assert emb.data.min() >= -1.0 and emb.data.max() <= 1.0


def test_sinusoid_known_values():
    emb = blocks.sinusoidal_embedding(np.array(1.0), 4)
    expected = [np.sin(1.0), np.cos(1.0), np.sin(10000.0 ** -0.5), np.cos(10000.0 ** -0.5)]
    assert np.allclose(emb.data, expected, atol=1e-12)


def test_sinusoid_odd_dim_rejected():
    with pytest.raises(ShapeError):
        blocks.sinusoidal_embedding(np.array(1.0), 5)


# -- lightweight convolution ----------------------------------------------------

def test_lconv_kernel_width_one_is_identity():
    rng = np.random.default_rng(0)
    conv = blocks.LightweightConv(6, 2, 1, rng)
    x = Tensor(rng.normal(size=(2, 4, 6)))
    out = conv(x)
    assert np.array_equal(out.data, x.data)


def test_lconv_uniform_kernel_averages_constant_input():
    rng = np.random.default_rng(0)
    conv = blocks.LightweightConv(4, 2, 3, rng)
    conv.kernel.data[:] = 0.0  # softmax -> 1/3 per tap
    c = 1.8
    x = Tensor(np.full((1, 6, 4), c))
    out = conv(x)
    assert np.allclose(out.data[0, 1:-1], c, atol=1e-12)
    assert np.allclose(out.data[0, 0], 2 * c / 3, atol=1e-12)
    assert np.allclose(out.data[0, -1], 2 * c / 3, atol=1e-12)


def test_lconv_taps_sum_to_one():
    rng = np.random.default_rng(1)
    conv = blocks.LightweightConv(8, 4, 5, rng)
    w = conv.normalized_kernel()
    assert np.allclose(w.data.sum(axis=1), 1.0, atol=1e-12)


def test_lconv_heads_must_divide():
    with pytest.raises(ShapeError):
        blocks.LightweightConv(6, 4, 3, np.random.default_rng(0))


def test_lconv_even_kernel_rejected():
    with pytest.raises(ShapeError):
        blocks.LightweightConv(8, 4, 4, np.random.default_rng(0))


def test_lconv_parameter_count_ratio():
    light = blocks.lightweight_param_count(8, 17)
    standard = blocks.standard_conv_param_count(128, 17)
    assert light == 136
    assert standard == 278528
    assert standard / light == 2048.0
    assert standard / light > 2000


def test_lconv_masked_positions_emit_zero():
    rng = np.random.default_rng(2)
    conv = blocks.LightweightConv(4, 2, 3, rng)
    x = Tensor(rng.normal(size=(1, 5, 4)))
    mask = np.array([[1.0, 1.0, 1.0, 0.0, 0.0]])
    out = conv(x, mask)
    assert np.allclose(out.data[0, 3:], 0.0)


# -- LConv block -----------------------------------------------------------------

def make_lconv_block(dim=8, heads=2, k=3, seed=0):
    return blocks.LConvBlock(dim, heads, k, np.random.default_rng(seed)).finalize_names("blk.")


def test_lconv_block_zero_weights_degenerate_to_identity():
    # with zero projections both residual branches vanish: pre-norm passthrough
    blk = make_lconv_block()
    for _, p in blk.named_parameters():
        if p.name.endswith(("weight", "bias")) and "norm" not in p.name:
            p.data[:] = 0.0
    x = Tensor(np.random.default_rng(3).normal(size=(2, 4, 8)))
    out = blk(x)
    assert np.allclose(out.data, x.data, atol=1e-12)


@pytest.mark.parametrize("shape,heads", [((1, 3, 4), 2), ((2, 6, 8), 4), ((3, 2, 6), 3)])
def test_lconv_block_preserves_shape(shape, heads):
    blk = blocks.LConvBlock(shape[2], heads, 3, np.random.default_rng(1))
    x = Tensor(np.random.default_rng(2).normal(size=shape))
    assert blk(x).shape == shape


def test_lconv_block_gradient_check():
    blk = make_lconv_block()
    x = Tensor(np.random.default_rng(5).normal(size=(2, 5, 8)))
    report = grad_check(lambda: weighted_sum(blk(x)), blk.parameters())
    assert report.passed, report.format_table()


# -- transformer block --------------------------------------------------------------

def test_attention_single_position_uses_value_projection():
    rng = np.random.default_rng(0)
    attn = blocks.MultiHeadSelfAttention(8, 2, rng)
    x = Tensor(rng.normal(size=(1, 1, 8)))
    out, weights = attn(x, return_weights=True)
    assert np.allclose(weights.data, 1.0, atol=1e-12)
    expected = attn.out(attn.v(x))
    assert np.allclose(out.data, expected.data, atol=1e-12)


def test_attention_rows_sum_to_one_over_valid_keys():
    rng = np.random.default_rng(1)
    attn = blocks.MultiHeadSelfAttention(8, 2, rng)
    x = Tensor(rng.normal(size=(2, 5, 8)))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=float)
    _, weights = attn(x, mask, return_weights=True)
    assert np.allclose(weights.data.sum(axis=-1), 1.0, atol=1e-9)
    assert np.allclose(weights.data[0, :, :, 3:], 0.0, atol=1e-9)


def test_transformer_block_gradient_check():
    blk = blocks.TransformerBlock(8, 2, np.random.default_rng(7)).finalize_names("tf.")
    x = Tensor(np.random.default_rng(8).normal(size=(2, 5, 8)))
    mask = np.array([[1, 1, 1, 1, 0], [1, 1, 1, 1, 1]], dtype=float)
    report = grad_check(lambda: weighted_sum(blk(x, mask)), blk.parameters())
    assert report.passed, report.format_table()


def test_transformer_block_preserves_shape():
    blk = blocks.TransformerBlock(8, 4, np.random.default_rng(9))
    x = Tensor(np.random.default_rng(10).normal(size=(3, 7, 8)))
    assert blk(x).shape == (3, 7, 8)


# -- conv block ------------------------------------------------------------------------

def test_conv_block_shapes_and_gradcheck():
    blk = blocks.ConvBlock(6, 6, 3, np.random.default_rng(11)).finalize_names("conv.")
    x = Tensor(np.random.default_rng(12).normal(size=(2, 4, 6)))
    out = blk(x)
    assert out.shape == (2, 4, 6)
    report = grad_check(lambda: weighted_sum(blk(x)), blk.parameters())
    assert report.passed, report.format_table()


def test_conv1d_strided_length():
    rng = np.random.default_rng(13)
    w = Tensor(rng.normal(size=(3, 4, 5)))
    b = Tensor(np.zeros(5))
    for t, stride, expected in [(64, 2, 32), (9, 2, 5), (7, 1, 7), (5, 3, 2)]:
        x = Tensor(rng.normal(size=(1, t, 4)))
        assert blocks.conv1d(x, w, b, stride=stride).shape == (1, expected, 5)


# -- cross-block invariants -------------------------------------------------------------

def pad_batch(x, extra, rng):
    junk = rng.normal(size=(x.shape[0], extra, x.shape[2]))
    return np.concatenate([x, junk], axis=1)


@pytest.mark.parametrize("kind", ["lconv", "transformer", "conv"])
def test_masking_invariance(kind):
    rng = np.random.default_rng(21)
    d = 8
    if kind == "lconv":
        blk = blocks.LConvBlock(d, 2, 3, np.random.default_rng(20))
    elif kind == "transformer":
        blk = blocks.TransformerBlock(d, 2, np.random.default_rng(20))
    else:
        blk = blocks.ConvBlock(d, d, 3, np.random.default_rng(20))
    x = rng.normal(size=(2, 5, d))
    base = blk(Tensor(x), np.ones((2, 5)))
    padded = pad_batch(x, 3, rng)
    mask = np.concatenate([np.ones((2, 5)), np.zeros((2, 3))], axis=1)
    out = blk(Tensor(padded), mask)
    assert np.allclose(out.data[:, :5], base.data, atol=1e-5)
    assert np.allclose(out.data[:, 5:], 0.0)


@pytest.mark.parametrize("kind", ["lconv", "transformer"])
def test_batch_order_invariance(kind):
    rng = np.random.default_rng(31)
    if kind == "lconv":
        blk = blocks.LConvBlock(8, 2, 3, np.random.default_rng(30))
    else:
        blk = blocks.TransformerBlock(8, 2, np.random.default_rng(30))
    x = rng.normal(size=(3, 4, 8))
    perm = [2, 0, 1]
    out = blk(Tensor(x))
    out_p = blk(Tensor(x[perm]))
    assert np.allclose(out_p.data, out.data[perm], atol=1e-12)
