"""Self-checks driven by the CLI: finite-difference suites and the CTC oracle grid."""
from __future__ import annotations

import itertools
import time
from typing import Callable

import numpy as np

from . import blocks as B
from . import ctc
from . import layers as L
from . import model as M
from .autograd import Tape, Variable, finite_difference_check, weighted_sum

GRAD_TOLERANCE = 1e-4
CTC_TOLERANCE = 1e-10

SIZES = {
    # probes per parameter, spatial size, batch
    "tiny": dict(entries=3, hw=5, n=2),
    "small": dict(entries=8, hw=6, n=3),
}


def _var(rng, shape, scale=1.0) -> Variable:
    return Variable(rng.normal(size=shape) * scale, requires_grad=True)


def _projected(out: Variable, rng_seed: int = 99) -> Variable:
    # a fixed random projection avoids the symmetric cancellations of a plain sum
    w = np.random.default_rng(rng_seed).normal(size=out.value.shape)
    return weighted_sum(out, w)


def _unit(rng, c_in, c_out, kind="separable", **kw):
    unit = L.init_unit(rng, c_in, c_out, kind=kind, **kw)
    # move batch-norm affine terms off their 1/0 init so their gradients are generic
    unit.bn.gamma.value[:] = rng.uniform(0.5, 1.5, c_out)
    unit.bn.beta.value[:] = rng.normal(scale=0.1, size=c_out)
    unit.conv.bias.value[:] = rng.normal(scale=0.1, size=c_out)
    return unit


def _perturb(tree, rng) -> None:
    for path, v in L.named_parameters(tree).items():
        if path.endswith("bias") or path.endswith("beta"):
            v.value[:] = rng.normal(scale=0.1, size=v.value.shape)
        elif path.endswith("gamma"):
            v.value[:] = rng.uniform(0.5, 1.5, v.value.shape)


def _normalised(params: dict) -> dict:
    """Drop conv biases that feed train-mode batch norm: their gradient is identically zero."""
    return {k: v for k, v in params.items() if not k.endswith("conv.bias")}


def _bias_paths(params: dict) -> dict:
    return {k: v for k, v in params.items() if k.endswith("conv.bias")}


def _randomise_running_stats(tree, rng) -> None:
    for path, arr in L.named_buffers(tree).items():
        if path.endswith("running_var"):
            arr[:] = rng.uniform(0.5, 2.0, arr.shape)
        else:
            arr[:] = rng.normal(scale=0.2, size=arr.shape)


def _cases(size: str):
    """Yield ``(name, params, loss_fn)`` for every component of the suite."""
    opt = SIZES[size]
    hw, n = opt["hw"], opt["n"]
    rng = np.random.default_rng(0)

    x = _var(rng, (n, hw, hw, 3))
    k = _var(rng, (3, 3, 3, 4), 0.5)
    b = _var(rng, (4,), 0.1)
    yield "conv2d_same", {"x": x, "kernel": k, "bias": b}, \
        lambda: _projected(L.conv2d(x, k, b, (1, 1), "same"))
    k2 = _var(rng, (3, 3, 3, 2), 0.5)
    yield "conv2d_valid_stride2", {"x": x, "kernel": k2}, \
        lambda: _projected(L.conv2d(x, k2, None, (2, 2), "valid"))

    dk = _var(rng, (3, 3, 3, 1), 0.5)
    yield "depthwise_conv", {"x": x, "kernel": dk}, \
        lambda: _projected(L.depthwise_conv(x, dk, (1, 1), "same"))
    pk = _var(rng, (1, 1, 3, 5), 0.5)
    yield "pointwise_conv", {"x": x, "kernel": pk}, lambda: _projected(L.pointwise_conv(x, pk))

    sep = L.init_conv(rng, 5, 4, (3, 3), (1, 1), "same", kind="separable")
    sep.bias.value[:] = rng.normal(scale=0.1, size=4)
    xa, xb = _var(rng, (n, hw, hw, 2)), _var(rng, (n, hw, hw, 3))
    yield "separable_conv", {"xa": xa, "xb": xb, **L.named_parameters(sep, "sep")}, \
        lambda: _projected(L.separable_conv([xa, xb], sep))
    sep2 = L.init_conv(rng, 3, 2, (3, 3), (2, 2), "same", kind="separable")
    yield "separable_conv_stride2", {"x": x, **L.named_parameters(sep2, "sep")}, \
        lambda: _projected(L.separable_conv(x, sep2))

    bn = L.init_bn(3)
    bn.gamma.value[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.value[:] = rng.normal(size=3)
    bparams = {"x": x, "gamma": bn.gamma, "beta": bn.beta}
    yield "batch_norm_train", bparams, lambda: _projected(L.batch_norm(x, bn, L.TRAIN))
    bn.running_var[:] = rng.uniform(0.5, 2.0, 3)
    bn.running_mean[:] = rng.normal(size=3)
    yield "batch_norm_eval", bparams, lambda: _projected(L.batch_norm(x, bn, L.EVAL))

    yield "relu", {"x": x}, lambda: _projected(L.relu(x))
    yield "dropout", {"x": x}, lambda: _projected(
        L.dropout(x, L.DropoutConfig(0.3, L.TRAIN), np.random.default_rng(5)))
    logits = _var(rng, (n, 1, 1, 4))
    labels = rng.integers(0, 4, n)
    yield "cross_entropy", {"logits": logits}, lambda: L.cross_entropy(logits, labels)
    yield "softmax", {"logits": logits}, lambda: _projected(L.softmax(logits))

    unit = _unit(rng, 3, 4)
    yield "separable_unit", _normalised({"x": x, **L.named_parameters(unit, "unit")}), \
        lambda: _projected(L.unit_forward(x, unit, L.TRAIN))
    sunit = _unit(rng, 3, 4, kind="standard")
    yield "standard_unit", _normalised({"x": x, **L.named_parameters(sunit, "unit")}), \
        lambda: _projected(L.unit_forward(x, sunit, L.TRAIN))

    cfg = B.BlockConfig(growth_rate=2, layer_count=2)
    dense = B.init_dense_block(rng, 3, cfg)
    _perturb(dense, rng)
    yield "dense_block", _normalised({"x": x, **L.named_parameters(dense, "dense")}), \
        lambda: _projected(B.dense_block_forward(x, dense, cfg, L.TRAIN))
    scfg = B.BlockConfig(growth_rate=2, layer_count=2, conv_kind="standard")
    sdense = B.init_dense_block(rng, 3, scfg)
    _perturb(sdense, rng)
    yield "dense_block_standard", _normalised({"x": x, **L.named_parameters(sdense, "dense")}), \
        lambda: _projected(B.dense_block_forward(x, sdense, scfg, L.TRAIN))

    trans = _unit(rng, 3, 2, stride=(2, 2))
    yield "transition_conv", _normalised({"x": x, **L.named_parameters(trans, "trans")}), \
        lambda: _projected(B.transition_conv(x, trans, L.TRAIN))

    xi = _var(rng, (n, 4, 4, 3))
    block = B.init_intensive_block(rng, 3, cfg)
    _perturb(block, rng)
    yield "intensive_block", _normalised({"x": xi, **L.named_parameters(block, "block")}), \
        lambda: _projected(B.intensive_block_forward(xi, block, cfg, L.TRAIN))

    mcfg = M.ModelConfig(task=M.CLASSIFY, input_shape=(8, 8, 1), num_classes=3, stem_channels=3,
                         block=cfg, dropout_rate=0.0)
    mparams = M.init_model(mcfg)
    _perturb(mparams, rng)
    xm = rng.normal(size=(n, 8, 8, 1))
    ym = rng.integers(0, 3, n)
    yield "model_classify", _normalised(L.named_parameters(mparams)), \
        lambda: L.cross_entropy(M.forward(xm, mparams, mcfg, L.TRAIN), ym)

    scfg = M.ModelConfig(task=M.SEQUENCE, input_shape=(8, 32, 1), num_classes=3, stem_channels=3,
                         block=cfg, first_conv_stride=2, dropout_rate=0.0)
    sparams = M.init_model(scfg)
    _perturb(sparams, rng)
    xs = rng.normal(size=(2, 8, 32, 1))
    targets = [[1, 2], [3]]
    yield "model_sequence", _normalised(L.named_parameters(sparams)), \
        lambda: ctc.ctc_batch_loss(M.forward(xs, sparams, scfg, L.TRAIN), targets)

    # eval-mode batch norm keeps the conv biases live, so they are checked here
    _randomise_running_stats(mparams, rng)
    yield "model_classify_eval", L.named_parameters(mparams), \
        lambda: L.cross_entropy(M.forward(xm, mparams, mcfg, L.EVAL), ym)
    _randomise_running_stats(sparams, rng)
    yield "model_sequence_eval", L.named_parameters(sparams), \
        lambda: ctc.ctc_batch_loss(M.forward(xs, sparams, scfg, L.EVAL), targets)

    z = _var(rng, (2, 1, 6, 4))
    yield "ctc_logits", {"logits": z}, lambda: ctc.ctc_batch_loss(z, [[1, 2, 2], [3]])


def bias_before_bn_check(seed: int = 0) -> dict:
    """Analytic gradients of conv biases feeding train-mode batch norm must vanish."""
    rng = np.random.default_rng(seed)
    cfg = B.BlockConfig(growth_rate=2, layer_count=2)
    mcfg = M.ModelConfig(task=M.CLASSIFY, input_shape=(8, 8, 1), num_classes=3, stem_channels=3,
                         block=cfg, dropout_rate=0.0)
    params = M.init_model(mcfg)
    _perturb(params, rng)
    x = rng.normal(size=(3, 8, 8, 1))
    y = rng.integers(0, 3, 3)
    biases = _bias_paths(L.named_parameters(params))
    with Tape() as tape:
        loss = L.cross_entropy(M.forward(x, params, mcfg, L.TRAIN), y)
    grads = tape.backward(loss, biases)
    worst = max(float(np.abs(g).max()) for g in grads.values())
    return {"component": "bias_before_train_bn", "max_rel_error": None, "max_abs_grad": worst,
            "passed": bool(worst < 1e-10)}


def gradcheck_suite(size: str = "small", seed: int = 0,
                    report: Callable[[dict], None] | None = None) -> list[dict]:
    """Finite-difference check of every component; one result dict per component."""
    if size not in SIZES:
        raise ValueError(f"unknown suite size {size!r}; choose from {sorted(SIZES)}")
    results = []
    for name, params, fn in _cases(size):
        started = time.perf_counter()
        per_param: dict = {}
        err = finite_difference_check(fn, params, eps=1e-5, max_entries=SIZES[size]["entries"],
                                      seed=seed, report=per_param)
        worst = max(per_param, key=per_param.get) if per_param else None
        row = {"component": name, "max_rel_error": err, "worst_param": worst,
               "passed": bool(err < GRAD_TOLERANCE),
               "seconds": round(time.perf_counter() - started, 3)}
        results.append(row)
        if report is not None:
            report(row)
    row = bias_before_bn_check(seed)
    results.append(row)
    if report is not None:
        report(row)
    return results


def ctc_oracle_grid(tmax: int, alphabet: int, max_target_len: int = 3, seed: int = 0):
    """Compare forward-backward with path enumeration for every T in [1, tmax],
    A in [1, alphabet] and every target of length <= ``max_target_len``.

    Infeasible targets must be rejected by both. Returns a summary dict.
    """
    if tmax < 1 or alphabet < 1:
        raise ValueError("tmax and alphabet must be >= 1")
    if (alphabet + 1) ** tmax > ctc.MAX_BRUTEFORCE_PATHS:
        raise ctc.InstanceTooLargeError(
            f"(A + 1)^tmax = {(alphabet + 1) ** tmax} exceeds {ctc.MAX_BRUTEFORCE_PATHS}")
    rng = np.random.default_rng(seed)
    worst, cases, infeasible, mismatched = 0.0, 0, 0, 0
    for a in range(1, alphabet + 1):
        for t in range(1, tmax + 1):
            probs = rng.dirichlet(np.ones(a + 1), size=t)
            for length in range(max_target_len + 1):
                for target in itertools.product(range(1, a + 1), repeat=length):
                    cases += 1
                    try:
                        fast, _ = ctc.ctc_loss(probs, target)
                    except ctc.InfeasibleTargetError:
                        fast = None
                    try:
                        slow = ctc.ctc_bruteforce(probs, target)
                    except ctc.InfeasibleTargetError:
                        slow = None
                    if fast is None or slow is None:
                        infeasible += 1
                        mismatched += (fast is None) != (slow is None)
                        continue
                    worst = max(worst, abs(fast - slow))
    return {"tmax": tmax, "alphabet": alphabet, "cases": cases, "infeasible": infeasible,
            "feasibility_mismatches": mismatched, "max_abs_log_deviation": worst,
            "passed": bool(worst < CTC_TOLERANCE and mismatched == 0)}
