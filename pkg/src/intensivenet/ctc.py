"""Connectionist temporal classification: loss, gradient, decoding and an exhaustive oracle.

Frame posteriors are ``(T, A + 1)`` matrices whose column 0 is the blank.
Targets are sequences of labels in ``[1, A]``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import Variable, as_variable, record
from .layers import log_softmax_array

BLANK = 0
PROB_FLOOR = 1e-12
LOG_FLOOR = float(np.log(PROB_FLOOR))
MAX_BRUTEFORCE_PATHS = 10**7


class InfeasibleTargetError(ValueError):
    """The target cannot be emitted in the available number of frames."""

    def __init__(self, frames: int, required: int):
        super().__init__(f"target needs at least {required} frames, got {frames}")
        self.frames = frames
        self.required = required


class InstanceTooLargeError(ValueError):
    pass


def collapse(path: Sequence[int]) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out, prev = [], None
    for p in path:
        p = int(p)
        if p != prev and p != BLANK:
            out.append(p)
        prev = p
    return out


def greedy_decode(probs: np.ndarray) -> list[int]:
    """Best-path decoding: per-frame argmax (lowest index wins ties), then collapse."""
    return collapse(np.argmax(np.asarray(probs), axis=1))


def min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _check_target(target, n_symbols: int) -> list[int]:
    target = [int(t) for t in target]
    for t in target:
        if not 1 <= t < n_symbols:
            raise ValueError(f"label {t} outside [1, {n_symbols - 1}] (0 is the blank)")
    return target


def _extend(target: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Blank-interleaved labels and the mask of positions that may skip back two."""
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(ext.shape, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return ext, skip


def forward_backward(log_probs: np.ndarray, target: Sequence[int]):
    """Log-space alpha/beta recursions over the extended label sequence.

    Returns ``(log_likelihood, log_alpha, log_beta)``. ``log_alpha[t, s]``
    includes the emission at ``t``; ``log_beta[t, s]`` covers frames after
    ``t`` only, so their sum is the log mass of paths through ``(t, s)``.
    """
    T, n_symbols = log_probs.shape
    target = _check_target(target, n_symbols)
    need = min_frames(target)
    if T < need:
        raise InfeasibleTargetError(T, need)
    ext, skip = _extend(target)
    S = ext.size
    emit = log_probs[:, ext]  # (T, S)
    ninf = -np.inf

    alpha = np.full((T, S), ninf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), ninf)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    ll = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    return float(ll), alpha, beta


def ctc_from_log_probs(log_probs: np.ndarray, target: Sequence[int]):
    """Loss and its gradient w.r.t. the logits that produced ``log_probs`` via log-softmax."""
    log_probs = np.maximum(log_probs, LOG_FLOOR)
    ll, alpha, beta = forward_backward(log_probs, target)
    ext, _ = _extend(list(target))
    occ = np.exp(alpha + beta - ll)  # (T, S) posterior occupancy
    gamma = np.zeros_like(log_probs)
    for s, k in enumerate(ext):
        gamma[:, k] += occ[:, s]
    grad = np.exp(log_probs) - gamma
    return -ll, grad


def ctc_loss(probs: np.ndarray, target: Sequence[int]):
    """``-log P(target | probs)`` and d(loss)/d(pre-softmax logits).

    ``probs`` is a (T, A + 1) row-stochastic matrix; entries are floored at
    ``PROB_FLOOR`` before taking logs.
    """
    probs = np.asarray(probs, dtype=np.float64)
    return ctc_from_log_probs(np.log(np.maximum(probs, PROB_FLOOR)), target)


def ctc_bruteforce(probs: np.ndarray, target: Sequence[int]) -> float:
    """Reference loss by enumerating every length-T path over the alphabet."""
    probs = np.asarray(probs, dtype=np.float64)
    T, n_symbols = probs.shape
    target = _check_target(target, n_symbols)
    n_paths = n_symbols ** T
    if n_paths > MAX_BRUTEFORCE_PATHS:
        raise InstanceTooLargeError(f"{n_symbols}^{T} = {n_paths} paths exceeds {MAX_BRUTEFORCE_PATHS}")
    index = np.arange(n_paths, dtype=np.int64)
    mass = np.ones(n_paths)
    code = np.zeros(n_paths, dtype=np.int64)
    count = np.zeros(n_paths, dtype=np.int64)
    prev = np.full(n_paths, -1, dtype=np.int64)
    for t in range(T):
        sym = (index // n_symbols ** (T - 1 - t)) % n_symbols
        mass *= probs[t, sym]
        keep = (sym != BLANK) & (sym != prev)
        code = np.where(keep, code * n_symbols + sym, code)
        count += keep
        prev = sym
    want = 0
    for k in target:
        want = want * n_symbols + k
    total = mass[(count == len(target)) & (code == want)].sum()
    if total <= 0.0:
        raise InfeasibleTargetError(T, min_frames(target))
    return float(-np.log(total))


def ctc_batch_loss(logits, targets: Sequence[Sequence[int]]) -> Variable:
    """Mean CTC loss over a batch of frame logits shaped (n, 1, T, A + 1)."""
    logits = as_variable(logits)
    z = logits.value
    n = z.shape[0]
    if len(targets) != n:
        raise ValueError(f"{len(targets)} targets for a batch of {n}")
    grad = np.zeros_like(z)
    total = 0.0
    for i in range(n):
        loss_i, g_i = ctc_from_log_probs(log_softmax_array(z[i, 0]), targets[i])
        total += loss_i
        grad[i, 0] = g_i
    grad /= n

    def back(g):
        return (grad * g.reshape(()),)

    return record("ctc_loss", (logits,), np.full((1, 1, 1, 1), total / n), back)
