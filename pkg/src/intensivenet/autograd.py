"""Define-by-run reverse-mode differentiation.

Operations executed inside an active :class:`Tape` append a node holding
their inputs and a backward rule. :func:`backward` replays the tape in
reverse recording order, so no explicit topological sort is needed.

    with Tape() as tape:
        loss = sum_all(mul(p, p))
    grads = tape.backward(loss, {"p": p})
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from . import tensor_core as tc


class ContractError(ValueError):
    """A caller violated an operation's preconditions."""


class StateError(RuntimeError):
    """The tape is not in a state that allows the requested action."""


class Variable:
    """A value plus its position in the tape (if it was produced by a taped op)."""

    __slots__ = ("value", "node", "requires_grad", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=tc.DTYPE)
        self.node: TapeNode | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Variable{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


class TapeNode:
    __slots__ = ("op_id", "inputs", "output", "backward_fn", "grad")

    def __init__(self, op_id: str, inputs: tuple, output: Variable, backward_fn: Callable):
        self.op_id = op_id
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.grad = None


_active: list["Tape"] = []


class Tape:
    """Records one forward pass; consumed by a single :meth:`backward`."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.consumed = False

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def backward(self, loss: Variable, params: Mapping[str, Variable] | None = None,
                 retain_grads: bool = False):
        return backward(loss, params, tape=self, retain_grads=retain_grads)


def current_tape() -> Tape | None:
    return _active[-1] if _active else None


def as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def record(op_id: str, inputs: Iterable[Variable], value: np.ndarray, backward_fn) -> Variable:
    """Wrap ``value`` as the output of ``op_id`` and put it on the active tape.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per input.
    Nothing is recorded when no tape is active or no input needs a gradient.
    """
    inputs = tuple(inputs)
    out = Variable(value)
    tape = current_tape()
    if tape is None or not any(v.requires_grad for v in inputs):
        return out
    if tape.consumed:
        raise StateError("cannot record onto a tape that has already run backward")
    out.requires_grad = True
    out.node = TapeNode(op_id, inputs, out, backward_fn)
    tape.nodes.append(out.node)
    return out


def is_recording(*inputs: Variable) -> bool:
    return current_tape() is not None and any(v.requires_grad for v in inputs)


def backward(loss: Variable, params: Mapping[str, Variable] | None = None, tape: Tape | None = None,
             retain_grads: bool = False):
    """Accumulate d(loss)/d(param) for every parameter; returns ``{path: grad}``.

    Parameters not reachable from ``loss`` get zero gradients. The tape is
    cleared afterwards and cannot be replayed. Each node's saved tensors are
    released as soon as its rule has run; ``retain_grads`` keeps the upstream
    gradient on ``node.grad`` for inspection at the cost of memory.
    """
    if loss.value.shape != (1, 1, 1, 1):
        raise ContractError(f"loss must have shape (1, 1, 1, 1), got {loss.value.shape}")
    if tape is None:
        tape = current_tape()
        if tape is None:
            raise StateError("no tape to differentiate")
    if tape.consumed:
        raise StateError("backward already ran on this tape")
    if not tape.nodes:
        raise StateError("tape is empty")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[int, Variable] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        if retain_grads:
            node.grad = g
        in_grads = node.backward_fn(g)
        inputs = node.inputs
        node.backward_fn, node.inputs, node.output = None, (), None
        del g
        for inp, gi in zip(inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp.node is None:
                leaves[key] = inp
            prev = grads.get(key)
            # never add in place: a backward rule may hand back an aliased buffer
            grads[key] = gi if prev is None else prev + gi
    tape.nodes.clear()

    if params is None:
        params = {v.name or str(k): v for k, v in leaves.items()}
    out = {}
    for path, p in params.items():
        g = grads.get(id(p))
        out[path] = np.zeros_like(p.value) if g is None else g.reshape(p.value.shape)
    return out


# -- tensor_core primitives lifted onto the tape ------------------------------

def add(a, b) -> Variable:
    """Elementwise sum; ``b`` may be a per-channel vector broadcast over n, h, w."""
    a, b = as_variable(a), as_variable(b)
    value = tc.elementwise_add(a.value, b.value)
    bshape = b.value.shape

    def back(g):
        gb = g if bshape == g.shape else g.reshape(-1, g.shape[-1]).sum(axis=0).reshape(bshape)
        return g, gb

    return record("add", (a, b), value, back)


def mul(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    if a.value.shape != b.value.shape:
        raise tc.DimensionError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return record("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def sum_all(x) -> Variable:
    """Sum of every entry, as a (1, 1, 1, 1) scalar."""
    x = as_variable(x)
    shape = x.value.shape
    value = np.full((1, 1, 1, 1), x.value.sum())
    return record("sum", (x,), value, lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def weighted_sum(x, weights: np.ndarray) -> Variable:
    """``sum(x * weights)`` for a fixed (non-differentiated) weight array."""
    x = as_variable(x)
    weights = np.asarray(weights, dtype=tc.DTYPE)
    value = np.full((1, 1, 1, 1), float(np.sum(x.value * weights)))
    return record("weighted_sum", (x,), value, lambda g: (weights * g.reshape(()),))


def identity(x) -> Variable:
    x = as_variable(x)
    return record("identity", (x,), x.value, lambda g: (g,))


def concat(inputs) -> Variable:
    """Differentiable :func:`tensor_core.concat_channels`."""
    inputs = [as_variable(v) for v in inputs]
    value = tc.concat_channels([v.value for v in inputs])
    bounds = np.cumsum([0] + [v.value.shape[3] for v in inputs])

    def back(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return record("concat", inputs, value, back)


# -- verification oracle ------------------------------------------------------

def finite_difference_check(model_fn: Callable[[], Variable], params: Mapping[str, Variable],
                            eps: float = 1e-5, max_entries: int | None = None, seed: int = 0,
                            report: dict | None = None) -> float:
    """Largest relative error between taped and central-difference gradients.

    ``model_fn`` is called with no arguments and must return a scalar loss
    computed from the current ``params`` values; it must be deterministic.
    The error per entry is ``|ga - gn| / max(|ga|, |gn|, 1e-8)``.

    ``max_entries`` caps the number of entries probed per parameter (chosen
    with a seeded RNG); ``None`` probes every entry. When ``report`` is given
    it is filled with the worst error per parameter path.
    """
    if not params:
        return 0.0
    with Tape() as tape:
        loss = model_fn()
    analytic = tape.backward(loss, params)
    rng = np.random.default_rng(seed)

    worst = 0.0
    for path, p in params.items():
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        ga = analytic[path].reshape(-1)
        path_worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(model_fn().value.sum())
            flat[i] = orig - eps
            fm = float(model_fn().value.sum())
            flat[i] = orig
            gn = (fp - fm) / (2 * eps)
            err = abs(ga[i] - gn) / max(abs(ga[i]), abs(gn), 1e-8)
            path_worst = max(path_worst, err)
        if report is not None:
            report[path] = path_worst
        worst = max(worst, path_worst)
    return worst
