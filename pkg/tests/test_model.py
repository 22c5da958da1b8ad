import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intensivenet import model as M
from intensivenet.blocks import BlockConfig, ConfigError
from intensivenet.layers import EVAL, TRAIN

TINY = BlockConfig(growth_rate=2, layer_count=2)


def tiny_cfg(**kw):
    base = dict(task=M.CLASSIFY, input_shape=(8, 8, 1), num_classes=3, block=TINY, stem_channels=4)
    base.update(kw)
    return M.ModelConfig(**base)


def test_mnist_shape_trace():
    trace = M.shape_trace(M.mnist_config())
    assert [t[:3] for t in trace] == [("conv1", 28, 28), ("block1", 14, 14), ("block2", 7, 7),
                                      ("dense5", 7, 7), ("head", 1, 1)]
    assert trace[-1][3] == 10


@given(st.integers(32, 320))
@settings(max_examples=30)
def test_frame_count_is_three_halvings(width):
    cfg = M.digitlines_config(width=width)
    w = width
    for _ in range(3):
        w = -(-w // 2)
    assert M.frame_count(cfg) == w


def test_digitlines_default_has_25_frames():
    assert M.frame_count(M.digitlines_config()) == 25


@pytest.mark.parametrize("hw", [(8, 8), (9, 12), (16, 10)])
def test_classify_logits_shape(hw):
    cfg = tiny_cfg(input_shape=(*hw, 1))
    params = M.init_model(cfg)
    x = np.random.default_rng(0).random((2, *hw, 1))
    assert M.forward(x, params, cfg).shape == (2, 1, 1, 3)


@pytest.mark.parametrize("width", [16, 24, 40])
def test_sequence_logits_match_trace(width):
    cfg = tiny_cfg(task=M.SEQUENCE, input_shape=(8, width, 1), num_classes=2, first_conv_stride=2)
    params = M.init_model(cfg)
    out = M.forward(np.random.default_rng(1).random((1, 8, width, 1)), params, cfg)
    assert out.shape == (1, 1, M.frame_count(cfg), 3)


def test_eval_forward_is_bitwise_deterministic():
    cfg = tiny_cfg()
    params = M.init_model(cfg)
    x = np.random.default_rng(2).random((3, 8, 8, 1))
    a = M.forward(x, params, cfg, EVAL).value
    b = M.forward(x, params, cfg, EVAL).value
    assert np.array_equal(a, b)


def test_init_is_seeded():
    a, b = M.init_model(tiny_cfg(seed=4)), M.init_model(tiny_cfg(seed=4))
    c = M.init_model(tiny_cfg(seed=5))
    from intensivenet.layers import state_dict
    sa, sb, sc = state_dict(a), state_dict(b), state_dict(c)
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert any(not np.array_equal(sa[k], sc[k]) for k in sa)


def test_parameter_paths_are_unique_and_complete():
    params = M.init_model(M.mnist_config())
    breakdown = M.parameter_breakdown(params)
    assert len(breakdown) == len(set(breakdown))
    assert M.count_parameters(params) == sum(breakdown.values())
    assert "head.kernel" in breakdown and "conv1.conv.depthwise" in breakdown


def test_standard_conv_model_has_more_parameters():
    sep = M.init_model(M.mnist_config())
    std = M.init_model(M.mnist_config(block=BlockConfig(conv_kind="standard"), stem_kind="standard"))
    assert M.count_parameters(std) > M.count_parameters(sep)


def test_train_mode_dropout_needs_rng_and_is_seeded():
    cfg = tiny_cfg(dropout_rate=0.5)
    params = M.init_model(cfg)
    x = np.random.default_rng(3).random((2, 8, 8, 1))
    with pytest.raises(ValueError):
        M.forward(x, params, cfg, TRAIN)
    a = M.forward(x, params, cfg, TRAIN, M.rng_stream(0, M.DROPOUT_STREAM, 0)).value
    b = M.forward(x, params, cfg, TRAIN, M.rng_stream(0, M.DROPOUT_STREAM, 0)).value
    assert np.array_equal(a, b)


def test_predict_helpers():
    cfg = tiny_cfg()
    params = M.init_model(cfg)
    x = np.random.default_rng(4).random((5, 8, 8, 1))
    preds = M.predict_classify(x, params, cfg, batch_size=2)
    assert preds.shape == (5,) and preds.max() < 3
    seq_cfg = tiny_cfg(task=M.SEQUENCE, input_shape=(8, 32, 1), num_classes=2, first_conv_stride=2)
    seq_params = M.init_model(seq_cfg)
    post = M.frame_posteriors(np.zeros((2, 8, 32, 1)), seq_params, seq_cfg)
    assert post.shape == (2, 4, 3) and np.allclose(post.sum(axis=2), 1.0)
    assert all(isinstance(s, list) for s in M.predict_sequence(np.zeros((2, 8, 32, 1)), seq_params, seq_cfg))
    with pytest.raises(ConfigError):
        M.predict_classify(x, seq_params, seq_cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_cfg(first_conv_kernel=3)
    with pytest.raises(ConfigError):
        tiny_cfg(task="detect")
    with pytest.raises(ConfigError):
        tiny_cfg(input_shape=(3, 3, 1))
    with pytest.raises(ValueError):
        tiny_cfg(dropout_rate=1.0)
    params = M.init_model(tiny_cfg())
    with pytest.raises(ConfigError):
        M.forward(np.zeros((1, 9, 8, 1)), params, tiny_cfg())


def test_densenet_variant_runs():
    cfg = tiny_cfg(architecture="densenet")
    out = M.forward(np.zeros((1, 8, 8, 1)), M.init_model(cfg), cfg)
    assert out.shape == (1, 1, 1, 3)
    assert M.shape_trace(cfg)[1][3] == 4  # floor((4 + 2 * 2) / 2)


def test_rng_streams_are_independent():
    a = M.rng_stream(0, 1, 2).random(4)
    assert np.array_equal(a, M.rng_stream(0, 1, 2).random(4))
    assert not np.array_equal(a, M.rng_stream(0, 2, 1).random(4))


def test_wide_text_line_has_35_frames():
    cfg = M.ModelConfig(task=M.SEQUENCE, input_shape=(32, 280, 1), first_conv_stride=2)
    assert M.shape_trace(cfg)[-2][1:3] == (4, 35)
    assert M.frame_count(cfg) == 35 >= 2 * 10 - 1


def test_classify_ties_go_to_lowest_index():
    cfg = tiny_cfg()
    params = M.init_model(cfg)
    params.head.kernel.value[:] = 0.0
    params.head.bias.value[:] = 0.0
    assert M.predict_classify(np.zeros((2, 8, 8, 1)), params, cfg).tolist() == [0, 0]
    params.head.bias.value[2] = 5.0
    assert M.predict_classify(np.zeros((1, 8, 8, 1)), params, cfg).tolist() == [2]
