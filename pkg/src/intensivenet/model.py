"""The full network: 5x5 stem, intensive blocks, a trailing dense block and a conv head."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import ctc
from .autograd import Variable, as_variable
from .blocks import (BlockConfig, ConfigError, DenseBlockParams, IntensiveBlockParams,
                     compress, dense_block_forward, dense_out_channels, init_dense_block,
                     init_intensive_block, init_transition, intensive_block_forward,
                     intensive_channel_trace, transition_conv)
from .layers import (EVAL, TRAIN, ConvParams, DropoutConfig, Unit, conv2d, dropout, init_conv,
                     init_unit, named_parameters, relu, softmax, unit_forward)
from .tensor_core import same_output_size

CLASSIFY, SEQUENCE = "classify", "sequence"

# integer stream ids for seeded RNG derivation
INIT_STREAM, DROPOUT_STREAM, SHUFFLE_STREAM, DATA_STREAM = 0, 1, 2, 3


def rng_stream(seed: int, *counters: int) -> np.random.Generator:
    """Independent generator for ``(seed, *counters)``; same key, same stream."""
    return np.random.default_rng([int(seed), *map(int, counters)])


@dataclass
class ModelConfig:
    task: str = CLASSIFY
    input_shape: tuple[int, int, int] = (28, 28, 1)  # (h, w, c)
    num_classes: int = 10  # K for classify, alphabet size A (blank excluded) for sequence
    block: BlockConfig = field(default_factory=BlockConfig)
    first_conv_kernel: int = 5
    first_conv_stride: int = 1
    stem_channels: int = 16
    stem_kind: str = "separable"
    intensive_blocks: int = 2
    architecture: str = "intensive"  # or "densenet": dense block + transition per stage
    dropout_rate: float = 0.2
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.block, dict):
            self.block = BlockConfig(**self.block)
        self.input_shape = tuple(self.input_shape)
        if self.task not in (CLASSIFY, SEQUENCE):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.first_conv_kernel != 5:
            raise ConfigError("the first convolution uses a 5x5 kernel")
        if self.first_conv_stride not in (1, 2):
            raise ConfigError("first_conv_stride must be 1 or 2")
        if self.architecture not in ("intensive", "densenet"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.num_classes < 1 or self.stem_channels < 1 or self.intensive_blocks < 1:
            raise ConfigError("num_classes, stem_channels and intensive_blocks must be >= 1")
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape is (h, w, c)")
        need = 2 ** self.halvings
        h, w, _ = self.input_shape
        if h < max(4, need) or w < max(4, need):
            raise ConfigError(f"input {h}x{w} too small for {self.halvings} stride-2 stages")
        dropout_cfg = DropoutConfig(self.dropout_rate)  # validates the rate
        del dropout_cfg

    @property
    def halvings(self) -> int:
        return self.intensive_blocks + (self.first_conv_stride == 2)

    @property
    def head_channels(self) -> int:
        return self.num_classes + 1 if self.task == SEQUENCE else self.num_classes

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def mnist_config(seed: int = 0, **overrides) -> ModelConfig:
    """Single-digit classification on 28x28 MNIST."""
    return ModelConfig(task=CLASSIFY, input_shape=(28, 28, 1), num_classes=10,
                       first_conv_stride=1, seed=seed, **overrides)


def digitlines_config(width: int = 200, seed: int = 0, **overrides) -> ModelConfig:
    """Digit-string recognition on 32-pixel-high text lines."""
    return ModelConfig(task=SEQUENCE, input_shape=(32, width, 1), num_classes=10,
                       first_conv_stride=2, seed=seed, **overrides)


@dataclass
class ModelParams:
    conv1: Unit
    blocks: list
    dense5: DenseBlockParams
    head: ConvParams


def shape_trace(cfg: ModelConfig) -> list[tuple[str, int, int, int]]:
    """Closed-form (stage, h, w, channels) after each stage of the network."""
    h, w, c = cfg.input_shape
    s = cfg.first_conv_stride
    h, w, c = same_output_size(h, s), same_output_size(w, s), cfg.stem_channels
    trace = [("conv1", h, w, c)]
    for b in range(cfg.intensive_blocks):
        if cfg.architecture == "intensive":
            c = intensive_channel_trace(c, cfg.block)["output"]
        else:
            c = compress(dense_out_channels(c, cfg.block), cfg.block.compression)
        h, w = same_output_size(h, 2), same_output_size(w, 2)
        trace.append((f"block{b + 1}", h, w, c))
    c = dense_out_channels(c, cfg.block)
    trace.append(("dense5", h, w, c))
    if cfg.task == CLASSIFY:
        trace.append(("head", 1, 1, cfg.head_channels))
    else:
        trace.append(("head", 1, w, cfg.head_channels))
    return trace


def frame_count(cfg: ModelConfig) -> int:
    """Number of CTC frames (columns of the final feature map)."""
    return shape_trace(cfg)[-1][2]


def init_model(cfg: ModelConfig) -> ModelParams:
    rng = rng_stream(cfg.seed, INIT_STREAM)
    bn = dict(momentum=cfg.bn_momentum, epsilon=cfg.bn_epsilon)
    k, s = cfg.first_conv_kernel, cfg.first_conv_stride
    conv1 = init_unit(rng, cfg.input_shape[2], cfg.stem_channels, (k, k), (s, s),
                      kind=cfg.stem_kind, **bn)
    blocks, c = [], cfg.stem_channels
    for _ in range(cfg.intensive_blocks):
        if cfg.architecture == "intensive":
            blocks.append(init_intensive_block(rng, c, cfg.block, **bn))
            c = intensive_channel_trace(c, cfg.block)["output"]
        else:
            dense = init_dense_block(rng, c, cfg.block, **bn)
            wide = dense_out_channels(c, cfg.block)
            c = compress(wide, cfg.block.compression)
            blocks.append([dense, init_transition(rng, wide, c, cfg.block, **bn)])
    dense5 = init_dense_block(rng, c, cfg.block, **bn)
    _, h, w, c5 = shape_trace(cfg)[-2]
    kh, kw = (h, w) if cfg.task == CLASSIFY else (h, 1)
    head = init_conv(rng, c5, cfg.head_channels, (kh, kw), (1, 1), "valid", kind="standard")
    params = ModelParams(conv1, blocks, dense5, head)
    named_parameters(params)
    return params


def forward(x, params: ModelParams, cfg: ModelConfig, mode: str = EVAL,
            rng: np.random.Generator | None = None) -> Variable:
    """Logits: (n, 1, 1, K) for classification, (n, 1, frames, A + 1) for sequences."""
    x = as_variable(x)
    if tuple(x.value.shape[1:]) != cfg.input_shape:
        raise ConfigError(f"input shape {x.value.shape[1:]} does not match {cfg.input_shape}")
    f = unit_forward(x, params.conv1, mode)
    for block in params.blocks:
        if cfg.architecture == "intensive":
            f = intensive_block_forward(f, block, cfg.block, mode)
        else:
            dense, trans = block
            f = transition_conv(dense_block_forward(f, dense, cfg.block, mode), trans, mode)
    f = dense_block_forward(f, params.dense5, cfg.block, mode)
    f = dropout(f, DropoutConfig(cfg.dropout_rate, mode), rng)
    head = params.head
    return conv2d(relu(f), head.kernel, head.bias, head.stride, head.padding)


def _batched_logits(x: np.ndarray, params, cfg, batch_size: int) -> np.ndarray:
    outs = [forward(x[i:i + batch_size], params, cfg, EVAL).value
            for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(outs, axis=0)


def predict_classify(x: np.ndarray, params: ModelParams, cfg: ModelConfig,
                     batch_size: int = 256) -> np.ndarray:
    if cfg.task != CLASSIFY:
        raise ConfigError("predict_classify needs a classify model")
    logits = _batched_logits(x, params, cfg, batch_size)
    probs = softmax(logits.reshape(logits.shape[0], -1)).value
    return np.argmax(probs, axis=1)


def frame_posteriors(x: np.ndarray, params: ModelParams, cfg: ModelConfig,
                     batch_size: int = 256) -> np.ndarray:
    """Per-frame softmax, shape (n, frames, A + 1)."""
    if cfg.task != SEQUENCE:
        raise ConfigError("frame_posteriors needs a sequence model")
    logits = _batched_logits(x, params, cfg, batch_size)
    return softmax(logits[:, 0]).value


def predict_sequence(x: np.ndarray, params: ModelParams, cfg: ModelConfig,
                     batch_size: int = 256) -> list[list[int]]:
    return [ctc.greedy_decode(p) for p in frame_posteriors(x, params, cfg, batch_size)]


def parameter_breakdown(params) -> dict[str, int]:
    """Learnable scalar count per parameter path (running statistics excluded)."""
    return {path: int(v.value.size) for path, v in named_parameters(params).items()}


def count_parameters(params) -> int:
    return sum(parameter_breakdown(params).values())
