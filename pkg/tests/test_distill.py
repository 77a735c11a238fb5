"""Cross-task distillation: contracts, variants, symmetry, gradients."""

import numpy as np
import pytest

from xpd import autodiff as ad
from xpd import checks
from xpd.distill import (DILATION_RATES, DistillationParams, attention_map,
                         distill_message, dual_distill, merge_message)
from xpd.errors import ConfigurationError, ShapeError


def make_params(variant="xpd", c_src=4, c_dst=8, seed=0):
    return DistillationParams.create(variant, c_src, c_dst, rng=np.random.default_rng(seed))


def zero_params(params):
    for t in params.parameters():
        t.data[...] = 0.0
    return params


def test_attention_zero_params_is_half():
    params = zero_params(make_params())
    f = ad.constant(np.random.default_rng(0).normal(size=(2, 4, 5, 6)))
    a = attention_map(f, params)
    np.testing.assert_array_equal(a.data, 0.5)


def test_attention_bias_only():
    params = zero_params(make_params())
    bias = np.linspace(-2, 2, 8)
    params.attention_bias.data[...] = bias
    f = ad.constant(np.zeros((1, 4, 3, 3)))
    a = attention_map(f, params)
    expected = 1.0 / (1.0 + np.exp(-bias))
    np.testing.assert_allclose(a.data[0, :, 1, 1], expected, atol=1e-12)


def test_attention_strictly_inside_unit_interval():
    params = make_params(seed=3)
    f = ad.constant(np.random.default_rng(1).normal(size=(1, 4, 6, 6)) * 5)
    a = attention_map(f, params).data
    assert np.all(a > 0.0) and np.all(a < 1.0)


def test_attention_channel_mismatch():
    params = make_params()
    with pytest.raises(ShapeError):
        attention_map(ad.constant(np.zeros((1, 3, 4, 4))), params)


def test_message_zero_feature_kernels():
    params = make_params(seed=5)
    for w in params.feature_weights:
        w.data[...] = 0.0
    for b in params.feature_biases:
        b.data[...] = 0.0
    f = ad.constant(np.random.default_rng(2).normal(size=(2, 4, 5, 5)))
    msg = distill_message(f, params)
    np.testing.assert_array_equal(msg.data, 0.0)


def test_message_variant_none_zero_and_merge_identity():
    params = make_params("none")
    f = ad.constant(np.random.default_rng(0).normal(size=(2, 4, 5, 5)))
    msg = distill_message(f, params)
    assert msg.shape == (2, 8, 5, 5)
    np.testing.assert_array_equal(msg.data, 0.0)
    primary = ad.constant(np.random.default_rng(1).normal(size=(2, 8, 5, 5)))
    merged = merge_message(primary, msg)
    np.testing.assert_array_equal(merged.data, primary.data)


@pytest.mark.parametrize("variant", ["xpd", "pad_net"])
@pytest.mark.parametrize("hw", [(5, 5), (7, 9), (12, 16)])
def test_message_preserves_spatial_dims(variant, hw):
    params = make_params(variant, seed=7)
    f = ad.constant(np.random.default_rng(3).normal(size=(1, 4) + hw))
    msg = distill_message(f, params)
    assert msg.shape == (1, 8) + hw


def test_message_bounded_by_stack():
    params = make_params(seed=11)
    rng = np.random.default_rng(4)
    f = ad.constant(rng.normal(size=(1, 4, 6, 7)))
    a = attention_map(f, params)
    branches = [ad.conv2d(f, w, b, dilation=r, pad=r)
                for r, w, b in zip(DILATION_RATES, params.feature_weights, params.feature_biases)]
    stack = ad.concat(branches, axis=1)
    msg = distill_message(f, params)
    assert np.all(np.abs(msg.data) <= np.abs(stack.data) + 1e-15)
    np.testing.assert_allclose(msg.data, a.data * stack.data, atol=1e-12)


def test_xpd_requires_divisible_channels():
    with pytest.raises(ConfigurationError):
        make_params("xpd", c_src=4, c_dst=6)


def test_merge_shape_error():
    a = ad.constant(np.zeros((1, 3, 4, 4)))
    b = ad.constant(np.zeros((1, 3, 4, 5)))
    with pytest.raises(ShapeError):
        merge_message(a, b)


def test_merge_zero_primary_returns_message():
    params = make_params(seed=13)
    f = ad.constant(np.random.default_rng(5).normal(size=(1, 4, 5, 5)))
    msg = distill_message(f, params)
    merged = merge_message(ad.constant(np.zeros((1, 8, 5, 5))), msg)
    np.testing.assert_array_equal(merged.data, msg.data)


def test_dual_distill_none_returns_inputs_unchanged():
    seg = ad.constant(np.random.default_rng(0).normal(size=(1, 4, 6, 6)))
    dep = ad.constant(np.random.default_rng(1).normal(size=(1, 8, 6, 6)))
    s2d = make_params("none", 4, 8)
    d2s = make_params("none", 8, 4)
    s, d = dual_distill(seg, dep, s2d, d2s)
    assert s is seg and d is dep


def test_dual_distill_swap_symmetry():
    rng = np.random.default_rng(9)
    seg = ad.constant(rng.normal(size=(1, 4, 6, 6)))
    dep = ad.constant(rng.normal(size=(1, 4, 6, 6)))
    p_a = make_params("xpd", 4, 4, seed=21)
    p_b = make_params("xpd", 4, 4, seed=22)
    s1, d1 = dual_distill(seg, dep, p_a, p_b)
    s2, d2 = dual_distill(dep, seg, p_b, p_a)
    np.testing.assert_array_equal(s1.data, d2.data)
    np.testing.assert_array_equal(d1.data, s2.data)


def test_dual_distill_resolution_mismatch():
    seg = ad.constant(np.zeros((1, 4, 6, 6)))
    dep = ad.constant(np.zeros((1, 8, 3, 3)))
    with pytest.raises(ShapeError):
        dual_distill(seg, dep, make_params("xpd", 4, 8), make_params("xpd", 8, 4))


def test_dual_distill_messages_use_pre_merge_inputs():
    # merged outputs must not feed each other: computing messages from the
    # already-merged features would break swap symmetry and zero-kernel cases
    rng = np.random.default_rng(10)
    seg = ad.constant(rng.normal(size=(1, 4, 5, 5)))
    dep = ad.constant(rng.normal(size=(1, 8, 5, 5)))
    p_s2d = make_params("xpd", 4, 8, seed=31)
    p_d2s = make_params("xpd", 8, 4, seed=32)
    s_out, d_out = dual_distill(seg, dep, p_s2d, p_d2s)
    expected_s = seg.data + distill_message(dep, p_d2s).data
    expected_d = dep.data + distill_message(seg, p_s2d).data
    np.testing.assert_array_equal(s_out.data, expected_s)
    np.testing.assert_array_equal(d_out.data, expected_d)


@pytest.mark.parametrize("name,builder", [
    ("attention_map", checks.check_attention_map),
    ("distill_message[xpd]", checks.check_message_xpd),
    ("distill_message[pad_net]", checks.check_message_pad_net),
    ("merge_message", checks.check_merge),
    ("dual_distill", checks.check_dual_distill),
])
def test_finite_difference_gradients(name, builder):
    result = builder()
    assert result.passed, f"{name}: {result.line()}"
    assert result.max_rel_err < 1e-4
