"""Learnable primitive layers on top of the tape.

The workhorse is the separable unit: ReLU, depthwise 3x3, pointwise 1x1,
one bias, then batch norm. ReLU, depthwise and pointwise are fused into a
single tape node that keeps only its input and recomputes the cheap
intermediates during backward; dense blocks at batch 128 would not fit in
memory otherwise.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .autograd import Variable, as_variable, concat, is_recording, record
from .kernels import depthwise, depthwise_grad, depthwise_grad_into, depthwise_into

TRAIN, EVAL = "train", "eval"


# -- parameter containers ----------------------------------------------------

@dataclass
class ConvParams:
    """Weights of one convolution; ``kind`` selects which kernels are populated."""

    kind: str  # "separable" | "standard"
    bias: Variable
    kernel: Variable | None = None  # (kh, kw, c_in, c_out)
    depthwise: Variable | None = None  # (kh, kw, c_in, 1)
    pointwise: Variable | None = None  # (1, 1, c_in, c_out)
    stride: tuple[int, int] = (1, 1)
    padding: str = "same"

    def __post_init__(self):
        k = self.kernel if self.kind == "standard" else self.depthwise
        if k is None or (self.kind == "separable" and self.pointwise is None):
            raise ValueError(f"{self.kind} conv is missing kernels")
        kh, kw = k.shape[:2]
        if self.padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
            raise ValueError(f"same padding needs odd kernel sizes, got {kh}x{kw}")
        if self.c_out < 1:
            raise ValueError("c_out must be >= 1")

    @property
    def ksize(self) -> tuple[int, int]:
        k = self.kernel if self.kind == "standard" else self.depthwise
        return k.shape[0], k.shape[1]

    @property
    def c_in(self) -> int:
        k = self.kernel if self.kind == "standard" else self.depthwise
        return k.shape[2]

    @property
    def c_out(self) -> int:
        return self.bias.shape[0]


@dataclass
class BatchNormParams:
    gamma: Variable
    beta: Variable
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")


@dataclass
class Unit:
    """A convolution followed by batch norm: the network's basic operation group."""

    conv: ConvParams
    bn: BatchNormParams


@dataclass
class DropoutConfig:
    rate: float = 0.0
    mode: str = EVAL

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")


def _param(value) -> Variable:
    return Variable(np.ascontiguousarray(value, dtype=tc.DTYPE), requires_grad=True)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_conv(rng, c_in: int, c_out: int, ksize=(3, 3), stride=(1, 1), padding="same",
              kind="separable") -> ConvParams:
    kh, kw = ksize
    bias = _param(np.zeros(c_out))
    if kind == "standard":
        kernel = _param(he_normal(rng, (kh, kw, c_in, c_out), kh * kw * c_in))
        return ConvParams(kind, bias, kernel=kernel, stride=tuple(stride), padding=padding)
    if kind != "separable":
        raise ValueError(f"unknown conv kind {kind!r}")
    dw = _param(he_normal(rng, (kh, kw, c_in, 1), kh * kw))
    pw = _param(he_normal(rng, (1, 1, c_in, c_out), c_in))
    return ConvParams(kind, bias, depthwise=dw, pointwise=pw, stride=tuple(stride), padding=padding)


def init_bn(c: int, momentum=0.9, epsilon=1e-5) -> BatchNormParams:
    return BatchNormParams(_param(np.ones(c)), _param(np.zeros(c)), np.zeros(c), np.ones(c),
                           momentum, epsilon)


def init_unit(rng, c_in, c_out, ksize=(3, 3), stride=(1, 1), padding="same", kind="separable",
              momentum=0.9, epsilon=1e-5) -> Unit:
    return Unit(init_conv(rng, c_in, c_out, ksize, stride, padding, kind),
                init_bn(c_out, momentum, epsilon))


# -- parameter tree traversal ------------------------------------------------

def _walk(tree, prefix):
    if isinstance(tree, (Variable, np.ndarray)):
        yield prefix, tree
    elif dataclasses.is_dataclass(tree):
        for f in dataclasses.fields(tree):
            yield from _walk(getattr(tree, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            yield from _walk(item, f"{prefix}.{i}" if prefix else str(i))


def named_parameters(tree, prefix: str = "") -> dict[str, Variable]:
    """Learnable leaves by dotted path; also stamps each Variable's ``name``."""
    out = {}
    for path, leaf in _walk(tree, prefix):
        if isinstance(leaf, Variable) and leaf.requires_grad:
            leaf.name = path
            out[path] = leaf
    return out


def named_buffers(tree, prefix: str = "") -> dict[str, np.ndarray]:
    """Non-learnable arrays (batch-norm running statistics)."""
    return {p: leaf for p, leaf in _walk(tree, prefix) if isinstance(leaf, np.ndarray)}


def state_dict(tree) -> dict[str, np.ndarray]:
    state = {p: v.value for p, v in named_parameters(tree).items()}
    state.update(named_buffers(tree))
    return dict(sorted(state.items()))


def load_state_dict(tree, state) -> None:
    """Copy arrays from ``state`` into ``tree`` in place; shapes and keys must match."""
    targets = {p: v.value for p, v in named_parameters(tree).items()}
    targets.update(named_buffers(tree))
    missing = sorted(set(targets) - set(state))
    extra = sorted(set(state) - set(targets))
    if missing or extra:
        raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
    for path, dst in targets.items():
        src = np.asarray(state[path])
        if src.shape != dst.shape:
            raise ValueError(f"{path}: shape {src.shape} does not match {dst.shape}")
        np.copyto(dst, src, casting="unsafe")


# -- activations ---------------------------------------------------------------

def relu(x) -> Variable:
    x = as_variable(x)
    xv = x.value
    return record("relu", (x,), np.maximum(xv, 0.0), lambda g: (g * (xv > 0),))


def softmax(z) -> Variable:
    """Channel-axis softmax with max subtraction."""
    z = as_variable(z)
    e = np.exp(z.value - z.value.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record("softmax", (z,), s, back)


def log_softmax_array(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels) -> Variable:
    """Mean of ``-log softmax(logits)[label]`` over the batch; logits are (n, 1, 1, K)."""
    logits = as_variable(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.value.shape[0]
    z = logits.value.reshape(n, -1)
    logp = log_softmax_array(z)
    loss = -logp[np.arange(n), labels].mean()
    shape = logits.value.shape

    def back(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return ((d * (g.reshape(()) / n)).reshape(shape),)

    return record("cross_entropy", (logits,), np.full((1, 1, 1, 1), loss), back)


# -- convolutions ----------------------------------------------------------------

def conv2d(x, kernel, bias=None, stride=(1, 1), padding="same") -> Variable:
    """Standard convolution lowered through im2col and one matrix product."""
    x, kernel = as_variable(x), as_variable(kernel)
    kh, kw, c_in, c_out = kernel.value.shape
    if x.value.shape[3] != c_in:
        raise tc.DimensionError(f"conv2d expects {c_in} input channels, got {x.value.shape[3]}")
    n = x.value.shape[0]
    ho = tc.conv_output_size(x.value.shape[1], kh, stride[0], padding)
    wo = tc.conv_output_size(x.value.shape[2], kw, stride[1], padding)
    cols = tc.im2col(x.value, (kh, kw), stride, padding)
    wmat = kernel.value.reshape(-1, c_out)
    out = cols @ wmat
    inputs = [x, kernel]
    if bias is not None:
        bias = as_variable(bias)
        out += bias.value
        inputs.append(bias)
    out = out.reshape(n, ho, wo, c_out)
    if not is_recording(*inputs):
        return Variable(out)
    x_shape = x.value.shape

    def back(g):
        g2 = g.reshape(-1, c_out)
        dk = (cols.T @ g2).reshape(kernel.value.shape)
        dx = tc.col2im(g2 @ wmat.T, x_shape, (kh, kw), stride, padding) if x.requires_grad else None
        grads = [dx, dk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return record("conv2d", inputs, out, back)


def depthwise_conv(x, depthwise_kernel, stride=(1, 1), padding="same") -> Variable:
    """Per-channel spatial convolution; kernel shape (kh, kw, c, 1)."""
    x, k = as_variable(x), as_variable(depthwise_kernel)
    c = k.value.shape[2]
    if x.value.shape[3] != c:
        raise tc.DimensionError(f"depthwise kernel has {c} channels, input has {x.value.shape[3]}")
    kmat = k.value[:, :, :, 0]
    out = depthwise(x.value, kmat, stride, padding)

    def back(g):
        dx, dk = depthwise_grad(x.value, kmat, g, stride, padding, need_dx=x.requires_grad)
        return dx, dk[..., None]

    return record("depthwise_conv", (x, k), out, back)


def pointwise_conv(x, pointwise_kernel) -> Variable:
    """1x1 convolution: a per-pixel matrix product with the (c_in, c_out) kernel."""
    x, k = as_variable(x), as_variable(pointwise_kernel)
    _, _, c_in, c_out = k.value.shape
    if x.value.shape[3] != c_in:
        raise tc.DimensionError(f"pointwise kernel expects {c_in} channels, got {x.value.shape[3]}")
    kmat = k.value.reshape(c_in, c_out)
    x2 = x.value.reshape(-1, c_in)
    out = (x2 @ kmat).reshape(*x.value.shape[:3], c_out)

    def back(g):
        g2 = g.reshape(-1, c_out)
        dx = (g2 @ kmat.T).reshape(x.value.shape) if x.requires_grad else None
        return dx, (x2.T @ g2).reshape(k.value.shape)

    return record("pointwise_conv", (x, k), out, back)


def _bands(x) -> list[Variable]:
    return [as_variable(v) for v in x] if isinstance(x, (list, tuple)) else [as_variable(x)]


def separable_conv(x, p: ConvParams, pre_relu: bool = True) -> Variable:
    """``pointwise(depthwise(relu(x))) + bias`` as one tape node.

    ``x`` may be a list of tensors standing for their channel concatenation;
    the concatenated input is then never materialised. Only the inputs are
    kept for backward and the depthwise response is recomputed there.
    """
    bands = _bands(x)
    dw, pw, bias = p.depthwise, p.pointwise, p.bias
    c_in = dw.value.shape[2]
    c_out = pw.value.shape[3]
    widths = [v.value.shape[3] for v in bands]
    if sum(widths) != c_in:
        raise tc.DimensionError(f"separable conv expects {c_in} channels, got {sum(widths)}")
    lead = bands[0].value.shape[:3]
    for i, v in enumerate(bands):
        if v.value.shape[:3] != lead:
            raise tc.DimensionError(f"input band {i} has shape {v.value.shape}, expected {lead} + (c,)")
    offsets = np.cumsum([0] + widths[:-1]).tolist()
    kmat = dw.value[:, :, :, 0]
    pmat = pw.value.reshape(c_in, c_out)
    stride, padding = p.stride, p.padding
    ho = tc.conv_output_size(lead[1], kmat.shape[0], stride[0], padding)
    wo = tc.conv_output_size(lead[2], kmat.shape[1], stride[1], padding)
    d_shape = (lead[0], ho, wo, c_in)

    def depthwise_response():
        d = np.zeros(d_shape)
        for v, off in zip(bands, offsets):
            depthwise_into(v.value, kmat, d, off, stride, padding, relu=pre_relu)
        return d

    d = depthwise_response()
    out = d.reshape(-1, c_in) @ pmat
    out += bias.value
    out_shape = (*d_shape[:3], c_out)
    inputs = (*bands, dw, pw, bias)
    if not is_recording(*inputs):
        return Variable(out.reshape(out_shape))
    del d

    def back(g):
        d = depthwise_response()
        g2 = g.reshape(-1, c_out)
        dpw = (d.reshape(-1, c_in).T @ g2).reshape(pw.value.shape)
        del d
        dd = (g2 @ pmat.T).reshape(d_shape)
        dk = np.zeros(kmat.shape)
        dxs = []
        for v, off in zip(bands, offsets):
            dx = np.zeros(v.value.shape) if v.requires_grad else None
            depthwise_grad_into(v.value, kmat, dd, dk, off, stride, padding, relu=pre_relu, dx=dx)
            dxs.append(dx)
        return (*dxs, dk[..., None], dpw, g2.sum(axis=0))

    return record("separable_conv", inputs, out.reshape(out_shape), back)


# -- normalisation and regularisation ----------------------------------------------

def bn_normalise(y2: np.ndarray, bn: BatchNormParams, mode: str = TRAIN):
    """Batch norm on a (rows, c) array; returns ``(out, stats)`` for :func:`bn_backward`.

    Train mode normalises with the biased batch statistics and folds them into
    the running averages; eval mode uses the running averages unchanged.
    """
    gamma, beta = bn.gamma.value, bn.beta.value
    if mode == TRAIN:
        mu = y2.mean(axis=0)
        var = y2.var(axis=0)
        bn.running_mean *= bn.momentum
        bn.running_mean += (1.0 - bn.momentum) * mu
        bn.running_var *= bn.momentum
        bn.running_var += (1.0 - bn.momentum) * var
    elif mode == EVAL:
        mu, var = bn.running_mean.copy(), bn.running_var.copy()
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + bn.epsilon)
    scale = gamma * inv_std
    out = y2 * scale
    out += beta - mu * scale
    return out, (mode, mu, inv_std)


def bn_backward(g2: np.ndarray, y2: np.ndarray, bn: BatchNormParams, stats, need_dx: bool = True):
    """Gradients ``(dy, dgamma, dbeta)`` of :func:`bn_normalise`; xhat is rebuilt from ``y2``."""
    mode, mu, inv_std = stats
    gamma = bn.gamma.value
    xhat = y2 - mu
    xhat *= inv_std
    dbeta = g2.sum(axis=0)
    dgamma = np.einsum("ij,ij->j", g2, xhat)
    dy = None
    if need_dx:
        if mode == TRAIN:
            m = y2.shape[0]
            xhat *= dgamma
            dy = g2 * m
            dy -= dbeta
            dy -= xhat
            dy *= gamma * inv_std / m
        else:
            dy = g2 * (gamma * inv_std)
    return dy, dgamma, dbeta


def batch_norm(x, bn: BatchNormParams, mode: str = TRAIN) -> Variable:
    """Per-channel batch norm over (n, h, w); see :func:`bn_normalise`."""
    x = as_variable(x)
    xv = x.value
    c = xv.shape[3]
    if bn.gamma.shape != (c,):
        raise tc.DimensionError(f"batch norm has {bn.gamma.shape[0]} channels, input has {c}")
    y2 = xv.reshape(-1, c)
    out, stats = bn_normalise(y2, bn, mode)

    def back(g):
        dy, dgamma, dbeta = bn_backward(g.reshape(-1, c), y2, bn, stats, x.requires_grad)
        return (None if dy is None else dy.reshape(xv.shape)), dgamma, dbeta

    return record("batch_norm", (x, bn.gamma, bn.beta), out.reshape(xv.shape), back)


def dropout(x, cfg: DropoutConfig, rng: np.random.Generator | None = None) -> Variable:
    """Inverted dropout: train mode zeroes entries with prob ``rate`` and rescales survivors."""
    x = as_variable(x)
    if cfg.mode == EVAL or cfg.rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an RNG")
    keep = 1.0 - cfg.rate
    mask = (rng.random(x.value.shape) >= cfg.rate) / keep
    return record("dropout", (x,), x.value * mask, lambda g: (g * mask,))


# -- composite units -------------------------------------------------------------

def separable_conv_unit(x, p: ConvParams, bn: BatchNormParams, mode: str = TRAIN) -> Variable:
    """BN(pointwise(depthwise(ReLU(x))) + b)."""
    return batch_norm(separable_conv(x, p), bn, mode)


def standard_conv_unit(x, p: ConvParams, bn: BatchNormParams, mode: str = TRAIN) -> Variable:
    """BN(conv(ReLU(x)) + b); the non-separable ablation of the same group."""
    if isinstance(x, (list, tuple)):
        x = concat(x) if len(x) > 1 else x[0]
    return batch_norm(conv2d(relu(x), p.kernel, p.bias, p.stride, p.padding), bn, mode)


def unit_forward(x, unit: Unit, mode: str = TRAIN) -> Variable:
    if unit.conv.kind == "separable":
        return separable_conv_unit(x, unit.conv, unit.bn, mode)
    return standard_conv_unit(x, unit.conv, unit.bn, mode)
