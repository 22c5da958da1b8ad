import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from intensivenet import layers as L
from intensivenet.autograd import Tape, Variable, concat, finite_difference_check, weighted_sum
from intensivenet.layers import EVAL, TRAIN
from intensivenet.tensor_core import DimensionError

from oracles import naive_depthwise, naive_pointwise


def var(rng, shape):
    return Variable(rng.normal(size=shape), requires_grad=True)


@given(st.lists(st.floats(-15, 15), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_is_a_distribution_and_shift_invariant(z, shift):
    z = np.array(z).reshape(1, 1, 1, -1)
    s = L.softmax(z).value
    assert np.all((s > 0) & (s < 1)) or s.size == 1
    assert abs(s.sum() - 1.0) < 1e-12
    assert np.max(np.abs(L.softmax(z + shift).value - s)) < 1e-12


def test_cross_entropy_on_uniform_logits_is_log_k():
    for k in (2, 10, 11):
        loss = L.cross_entropy(np.zeros((4, 1, 1, k)), [0, 1, 1, 0]).value.item()
        assert loss == pytest.approx(np.log(k), abs=1e-15)


def test_cross_entropy_hand_value():
    logits = np.array([2.0, 0.0, -1.0]).reshape(1, 1, 1, 3)
    expected = -(2.0 - np.log(np.exp(2.0) + 1.0 + np.exp(-1.0)))
    assert L.cross_entropy(logits, [0]).value.item() == pytest.approx(expected, rel=1e-14)


def test_relu_zeroes_negatives():
    out = L.relu(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)).value
    assert out.ravel().tolist() == [0.0, 0.0, 2.0]


def test_separable_parameter_count_closed_form():
    rng = np.random.default_rng(0)
    sep = L.init_unit(rng, 64, 64, kind="separable")
    std = L.init_unit(rng, 64, 64, kind="standard")
    n_sep = sum(v.value.size for v in L.named_parameters(sep.conv).values())
    n_std = sum(v.value.size for v in L.named_parameters(std.conv).values())
    assert (n_sep, n_std) == (9 * 64 + 64 * 64 + 64, 9 * 64 * 64 + 64)


@pytest.mark.parametrize("k,s,pad", list(itertools.product((1, 3, 5), (1, 2), ("same", "valid"))))
def test_separable_shape_matches_standard(k, s, pad):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 7, 6, 3))
    sep = L.init_conv(rng, 3, 4, (k, k), (s, s), pad, kind="separable")
    std = L.init_conv(rng, 3, 4, (k, k), (s, s), pad, kind="standard")
    a = L.separable_conv(x, sep).value
    b = L.conv2d(x, std.kernel, std.bias, (s, s), pad).value
    assert a.shape == b.shape


def test_separable_conv_equals_composition_of_oracles():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5, 5, 3))
    p = L.init_conv(rng, 3, 4, (3, 3), (2, 2), "same")
    p.bias.value[:] = rng.normal(size=4)
    ref = naive_pointwise(naive_depthwise(np.maximum(x, 0), p.depthwise.value, (2, 2), "same"),
                          p.pointwise.value) + p.bias.value
    assert np.max(np.abs(L.separable_conv(x, p).value - ref)) < 1e-12


def test_separable_conv_accepts_bands():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(1, 4, 4, 2)), rng.normal(size=(1, 4, 4, 3))
    p = L.init_conv(rng, 5, 2)
    whole = L.separable_conv(np.concatenate([a, b], axis=3), p).value
    assert np.array_equal(L.separable_conv([a, b], p).value, whole)
    with pytest.raises(DimensionError):
        L.separable_conv([a, a], p)
    with pytest.raises(DimensionError, match="band 1"):
        L.separable_conv([a, rng.normal(size=(1, 3, 4, 3))], p)


def test_band_gradients_match_concatenated_input():
    rng = np.random.default_rng(4)
    a, b = var(rng, (2, 4, 4, 2)), var(rng, (2, 4, 4, 3))
    p = L.init_conv(rng, 5, 3)
    w = rng.normal(size=(2, 4, 4, 3))
    with Tape() as t1:
        l1 = weighted_sum(L.separable_conv([a, b], p), w)
    g1 = t1.backward(l1, {"a": a, "b": b, "dw": p.depthwise})
    with Tape() as t2:
        l2 = weighted_sum(L.separable_conv(concat([a, b]), p), w)
    g2 = t2.backward(l2, {"a": a, "b": b, "dw": p.depthwise})
    for key in g1:
        assert np.allclose(g1[key], g2[key], rtol=1e-12, atol=1e-14)


@given(st.integers(0, 3), st.integers(0, 2**31))
def test_depthwise_channel_isolation(channel, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 5, 5, 4))
    k = rng.normal(size=(3, 3, 4, 1))
    base = L.depthwise_conv(x, k).value
    x2 = x.copy()
    x2[..., channel] += rng.normal(size=(1, 5, 5))
    changed = np.any(L.depthwise_conv(x2, k).value != base, axis=(0, 1, 2))
    assert changed.tolist() == [c == channel for c in range(4)]


def test_batch_norm_train_normalises_and_inverse_affine_recovers_unit_stats():
    rng = np.random.default_rng(5)
    x = rng.normal(3.0, 2.5, size=(4, 3, 3, 2))
    bn = L.init_bn(2)
    bn.gamma.value[:] = [2.0, 0.5]
    bn.beta.value[:] = [1.0, -1.0]
    out = L.batch_norm(x, bn, TRAIN).value.reshape(-1, 2)
    xhat = (out - bn.beta.value) / bn.gamma.value
    assert np.allclose(xhat.mean(axis=0), 0.0, atol=1e-12)
    var_ = x.reshape(-1, 2).var(axis=0)
    assert np.allclose(xhat.var(axis=0), var_ / (var_ + 1e-5), atol=1e-12)


def test_batch_norm_running_stats_use_momentum():
    rng = np.random.default_rng(6)
    x = rng.normal(1.0, 2.0, size=(2, 2, 2, 3))
    bn = L.init_bn(3)
    L.batch_norm(x, bn, TRAIN)
    flat = x.reshape(-1, 3)
    assert np.allclose(bn.running_mean, 0.1 * flat.mean(axis=0))
    assert np.allclose(bn.running_var, 0.9 + 0.1 * flat.var(axis=0))
    assert np.all(bn.running_var >= 0)


def test_batch_norm_eval_uses_running_stats_and_leaves_them():
    bn = L.init_bn(1)
    bn.running_mean[:] = 2.0
    bn.running_var[:] = 4.0
    x = np.full((1, 1, 2, 1), 4.0)
    out = L.batch_norm(x, bn, EVAL).value
    assert np.allclose(out, 2.0 / np.sqrt(4.0 + 1e-5))
    assert bn.running_mean[0] == 2.0 and bn.running_var[0] == 4.0


def test_batch_norm_param_validation():
    with pytest.raises(ValueError):
        L.BatchNormParams(Variable(np.ones(1)), Variable(np.zeros(1)), np.zeros(1), -np.ones(1))
    with pytest.raises(ValueError):
        L.init_bn(1, epsilon=0.0)


def test_dropout_eval_is_identity_and_train_is_inverted():
    x = np.ones((8, 8, 8, 4))
    same = L.dropout(Variable(x), L.DropoutConfig(0.5, EVAL))
    assert np.array_equal(same.value, x)
    out = L.dropout(Variable(x), L.DropoutConfig(0.25, TRAIN), np.random.default_rng(0)).value
    kept = out[out != 0]
    assert np.allclose(kept, 1 / 0.75)
    assert abs(out.mean() - 1.0) < 0.05
    with pytest.raises(ValueError):
        L.DropoutConfig(1.0)
    with pytest.raises(ValueError):
        L.dropout(Variable(x), L.DropoutConfig(0.5, TRAIN))


def test_he_init_variance():
    rng = np.random.default_rng(7)
    w = L.he_normal(rng, (200, 100), 50)
    assert abs(w.var() - 2 / 50) < 0.002 and abs(w.mean()) < 0.005
    unit = L.init_unit(rng, 3, 4)
    assert np.all(unit.bn.gamma.value == 1) and np.all(unit.bn.beta.value == 0)
    assert np.all(unit.conv.bias.value == 0)


def test_state_dict_round_trip_and_errors():
    rng = np.random.default_rng(8)
    a, b = L.init_unit(rng, 2, 3), L.init_unit(rng, 2, 3)
    a.bn.running_mean[:] = 0.5
    L.load_state_dict(b, L.state_dict(a))
    for (pa, va), (pb, vb) in zip(L.state_dict(a).items(), L.state_dict(b).items()):
        assert pa == pb and np.array_equal(va, vb)
    state = L.state_dict(a)
    del state["bn.beta"]
    with pytest.raises(KeyError):
        L.load_state_dict(b, state)
    state = L.state_dict(L.init_unit(rng, 2, 4))
    with pytest.raises(ValueError):
        L.load_state_dict(b, state)


def test_conv_params_validation():
    rng = np.random.default_rng(9)
    with pytest.raises(ValueError):
        L.init_conv(rng, 2, 2, (2, 2), padding="same")
    with pytest.raises(ValueError):
        L.init_conv(rng, 2, 2, kind="dilated")


@pytest.mark.parametrize("kind", ["separable", "standard"])
@pytest.mark.parametrize("mode", [TRAIN, EVAL])
def test_unit_gradients_match_finite_differences(kind, mode):
    rng = np.random.default_rng(10)
    x = var(rng, (2, 4, 4, 3))
    unit = L.init_unit(rng, 3, 4, stride=(2, 2), kind=kind)
    unit.bn.gamma.value[:] = rng.normal(1, 0.3, size=4)
    unit.bn.beta.value[:] = rng.normal(size=4)
    unit.bn.running_var[:] = rng.uniform(0.5, 2, size=4)
    w = rng.normal(size=(2, 2, 2, 4))
    params = {"x": x, **L.named_parameters(unit)}
    if mode == TRAIN:
        params.pop("conv.bias")  # identically zero gradient under batch statistics
    saved = (unit.bn.running_mean.copy(), unit.bn.running_var.copy())

    def f():
        out = weighted_sum(L.unit_forward(x, unit, mode), w)
        unit.bn.running_mean[:], unit.bn.running_var[:] = saved
        return out

    assert finite_difference_check(f, params) < 1e-4


def test_bias_before_train_batch_norm_has_zero_gradient():
    rng = np.random.default_rng(11)
    x = var(rng, (2, 3, 3, 2))
    unit = L.init_unit(rng, 2, 3)
    with Tape() as tape:
        loss = weighted_sum(L.unit_forward(x, unit, TRAIN), rng.normal(size=(2, 3, 3, 3)))
    g = tape.backward(loss, L.named_parameters(unit))["conv.bias"]
    assert np.max(np.abs(g)) < 1e-12
