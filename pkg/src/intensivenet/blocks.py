"""Dense blocks, the intensive block and the stride-2 transition convolution."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .autograd import Variable, as_variable, concat, record
from .kernels import depthwise_grad_into, depthwise_into
from .layers import TRAIN, Unit, bn_backward, bn_normalise, init_unit, unit_forward


class ConfigError(ValueError):
    """Invalid architecture configuration."""


@dataclass(frozen=True)
class BlockConfig:
    growth_rate: int = 8
    layer_count: int = 8
    compression: float = 0.5
    conv_kind: str = "separable"
    dense_blocks: int = 2  # dense blocks chained inside one dense fusion block

    def __post_init__(self):
        if self.growth_rate < 1 or self.layer_count < 1:
            raise ConfigError("growth_rate and layer_count must be >= 1")
        if not 0.0 < self.compression <= 1.0:
            raise ConfigError(f"compression must lie in (0, 1], got {self.compression}")
        if self.conv_kind not in ("separable", "standard"):
            raise ConfigError(f"unknown conv_kind {self.conv_kind!r}")
        if self.dense_blocks < 1:
            raise ConfigError("dense_blocks must be >= 1")


def compress(channels: int, theta: float) -> int:
    """floor(theta * channels), never below one channel."""
    return max(1, math.floor(theta * channels + 1e-9))


def dense_out_channels(c_in: int, cfg: BlockConfig) -> int:
    return c_in + cfg.layer_count * cfg.growth_rate


def intensive_channel_trace(c_in: int, cfg: BlockConfig) -> dict[str, int]:
    """Closed-form channel counts of every intermediate of an intensive block."""
    fd = [c_in]
    for _ in range(cfg.dense_blocks):
        fd.append(dense_out_channels(fd[-1], cfg))
    fc1 = compress(fd[-1], cfg.compression)
    fc2 = fc1 + fd[1]
    fc3 = compress(fc2, cfg.compression)
    fc4 = fc3 + c_in
    trace = {"input": c_in, "fd1": fd[1], f"fd{cfg.dense_blocks}": fd[-1]}
    trace.update(fc1=fc1, fc2=fc2, fc3=fc3, fc4=fc4, output=compress(fc4, cfg.compression))
    return trace


@dataclass
class DenseBlockParams:
    c_in: int
    layers: list[Unit] = field(default_factory=list)


@dataclass
class IntensiveBlockParams:
    dense: list[DenseBlockParams]
    fusion_conv1: Unit
    fusion_conv2: Unit
    transition: Unit

    @property
    def dense1(self) -> DenseBlockParams:
        return self.dense[0]

    @property
    def dense2(self) -> DenseBlockParams:
        return self.dense[-1]


def init_dense_block(rng, c_in: int, cfg: BlockConfig, **bn) -> DenseBlockParams:
    layers = []
    for i in range(cfg.layer_count):
        layers.append(init_unit(rng, c_in + i * cfg.growth_rate, cfg.growth_rate,
                                kind=cfg.conv_kind, **bn))
    return DenseBlockParams(c_in, layers)


def init_transition(rng, c_in: int, c_out: int, cfg: BlockConfig, **bn) -> Unit:
    return init_unit(rng, c_in, c_out, stride=(2, 2), kind=cfg.conv_kind, **bn)


def init_intensive_block(rng, c_in: int, cfg: BlockConfig, **bn) -> IntensiveBlockParams:
    t = intensive_channel_trace(c_in, cfg)
    dense, c = [], c_in
    for _ in range(cfg.dense_blocks):
        dense.append(init_dense_block(rng, c, cfg, **bn))
        c = dense_out_channels(c, cfg)
    fusion1 = init_unit(rng, c, t["fc1"], kind=cfg.conv_kind, **bn)
    fusion2 = init_unit(rng, t["fc2"], t["fc3"], kind=cfg.conv_kind, **bn)
    transition = init_transition(rng, t["fc4"], t["output"], cfg, **bn)
    return IntensiveBlockParams(dense, fusion1, fusion2, transition)


def _fusable(params: DenseBlockParams) -> bool:
    return all(u.conv.kind == "separable" and tuple(u.conv.stride) == (1, 1)
               and u.conv.padding == "same" for u in params.layers)


def _dense_block_fused(x: Variable, params: DenseBlockParams, mode: str) -> Variable:
    """The whole block as one tape node over a single growing feature buffer.

    Layer i reads the leading ``c_in + i * g`` channels of the buffer in place
    and writes its output into the next ``g``. Backward walks the layers in
    reverse, accumulating input gradients straight into one gradient buffer.
    Only the buffer and each layer's pre-norm output are kept.
    """
    xv = x.value
    n, h, w, c0 = xv.shape
    units = params.layers
    total = c0 + sum(u.conv.c_out for u in units)
    buf = np.empty((n, h, w, total))
    buf[..., :c0] = xv
    saved = []
    c = c0
    for u in units:
        conv = u.conv
        kmat = conv.depthwise.value[:, :, :, 0]
        pmat = conv.pointwise.value.reshape(c, -1)
        d = np.zeros((n, h, w, c))
        depthwise_into(buf, kmat, d, 0, conv.stride, conv.padding, relu=True, cin=c)
        y2 = d.reshape(-1, c) @ pmat
        del d
        y2 += conv.bias.value
        out, stats = bn_normalise(y2, u.bn, mode)
        g = out.shape[1]
        buf[..., c:c + g] = out.reshape(n, h, w, g)
        saved.append((c, g, kmat, pmat, y2, stats))
        c += g

    inputs = [x]
    for u in units:
        inputs += [u.conv.depthwise, u.conv.pointwise, u.conv.bias, u.bn.gamma, u.bn.beta]

    def back(grad):
        dbuf = np.array(grad, dtype=buf.dtype, order="C", copy=True)
        grads = []
        for u, (c, g, kmat, pmat, y2, stats) in zip(reversed(units), reversed(saved)):
            conv = u.conv
            go = np.ascontiguousarray(dbuf[..., c:c + g]).reshape(-1, g)
            dy, dgamma, dbeta = bn_backward(go, y2, u.bn, stats)
            d = np.zeros((n, h, w, c))
            depthwise_into(buf, kmat, d, 0, conv.stride, conv.padding, relu=True, cin=c)
            dpw = (d.reshape(-1, c).T @ dy).reshape(conv.pointwise.value.shape)
            del d
            dd = (dy @ pmat.T).reshape(n, h, w, c)
            dk = np.zeros(kmat.shape)
            depthwise_grad_into(buf, kmat, dd, dk, 0, conv.stride, conv.padding, relu=True,
                                dx=dbuf, cin=c)
            grads.append((dk[..., None], dpw, dy.sum(axis=0), dgamma, dbeta))
        dx = dbuf[..., :c0].copy() if x.requires_grad else None
        flat = [dx]
        for item in reversed(grads):
            flat.extend(item)
        return tuple(flat)

    return record("dense_block", inputs, buf, back)


def dense_block_forward(x, params: DenseBlockParams, cfg: BlockConfig | None = None,
                        mode: str = TRAIN) -> Variable:
    """Each layer sees concat(x, out_1, ..., out_{i-1}); returns concat(x, out_1, ..., out_c).

    Separable blocks run as one fused node over a shared feature buffer, so
    the per-layer concatenations are never copied. Other kinds compose the
    generic units, feeding each layer the growing feature list.
    """
    x = as_variable(x)
    if x.value.shape[3] != params.c_in:
        raise tc.DimensionError(
            f"dense block expects {params.c_in} input channels, got {x.value.shape[3]}")
    if _fusable(params):
        return _dense_block_fused(x, params, mode)
    feats = [x]
    for unit in params.layers:
        feats.append(unit_forward(list(feats), unit, mode))
    return concat(feats)


def transition_conv(x, unit: Unit, mode: str = TRAIN) -> Variable:
    """Learnable stride-2 downsampling in place of pooling."""
    if tuple(unit.conv.stride) != (2, 2):
        raise ConfigError(f"transition conv needs stride (2, 2), got {unit.conv.stride}")
    return unit_forward(x, unit, mode)


def dense_fusion_block(x, params: IntensiveBlockParams, cfg: BlockConfig | None = None,
                       mode: str = TRAIN, trace: dict | None = None):
    """Chained dense blocks plus the first fusion conv; returns ``(fd1, fc1)``."""
    feats = as_variable(x)
    fd1 = None
    for i, dense in enumerate(params.dense):
        feats = dense_block_forward(feats, dense, cfg, mode)
        if i == 0:
            fd1 = feats
    fc1 = unit_forward(feats, params.fusion_conv1, mode)
    if trace is not None:
        trace.update(fd1=fd1, fd2=feats, fc1=fc1)
    return fd1, fc1


def intensive_block_forward(x, params: IntensiveBlockParams, cfg: BlockConfig | None = None,
                            mode: str = TRAIN, trace: dict | None = None) -> Variable:
    """trans(concat(conv(concat(conv(fd2), fd1)), x)), downsampled by two."""
    x = as_variable(x)
    fd1, fc1 = dense_fusion_block(x, params, cfg, mode, trace)
    fc3 = unit_forward([fc1, fd1], params.fusion_conv2, mode)
    out = transition_conv([fc3, x], params.transition, mode)
    if trace is not None:
        trace.update(fc2=concat([fc1, fd1]), fc3=fc3, fc4=concat([fc3, x]), output=out)
    return out
