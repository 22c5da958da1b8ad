"""SGD training loop, learning-rate schedules, metric logging and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import ctc
from .autograd import ContractError, Tape, Variable
from .data import Dataset
from .layers import EVAL, TRAIN, cross_entropy, load_state_dict, named_parameters, state_dict
from .model import (CLASSIFY, DROPOUT_STREAM, SHUFFLE_STREAM, ModelConfig, ModelParams, forward,
                    init_model, rng_stream)

log = logging.getLogger(__name__)

TEXT_SCHEDULE, MNIST_SCHEDULE, CONSTANT = "text_schedule", "mnist_schedule", "constant"
CHECKPOINT_FORMAT = "intensivenet-checkpoint/1"


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``checkpoint`` is the last good one (or None)."""

    def __init__(self, epoch: int, batch: int, checkpoint):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}; "
                         f"last good checkpoint: {checkpoint}")
        self.epoch, self.batch, self.checkpoint = epoch, batch, checkpoint


class CheckpointError(ValueError):
    pass


class CorruptManifestError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


# -- schedules and the update rule -------------------------------------------

@dataclass(frozen=True)
class LRSchedule:
    kind: str = TEXT_SCHEDULE
    value: float | None = None  # only for constant

    def __post_init__(self):
        if self.kind not in (TEXT_SCHEDULE, MNIST_SCHEDULE, CONSTANT):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if (self.kind == CONSTANT) != (self.value is not None):
            raise ValueError("a constant schedule needs exactly one value")

    @classmethod
    def parse(cls, spec) -> "LRSchedule":
        """Accepts ``"text_schedule"``, ``"mnist_schedule"``, ``{"constant": lr}`` or a schedule."""
        if isinstance(spec, cls):
            return spec
        if isinstance(spec, str):
            return cls(spec)
        if isinstance(spec, Mapping) and set(spec) == {CONSTANT}:
            return cls(CONSTANT, float(spec[CONSTANT]))
        raise ValueError(f"cannot parse schedule {spec!r}")

    def to_json(self):
        return {CONSTANT: self.value} if self.kind == CONSTANT else self.kind


def lr_at(schedule, epoch: int) -> float:
    """Learning rate for a 0-based epoch."""
    schedule = LRSchedule.parse(schedule)
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if schedule.kind == CONSTANT:
        return schedule.value
    if schedule.kind == TEXT_SCHEDULE:
        return 0.001 if epoch == 0 else 0.005 * 0.4 ** epoch
    if epoch < 50:
        return 0.001
    return 0.0001 if epoch <= 100 else 0.00001


def decays(path: str) -> bool:
    """Weight decay applies to kernels and biases, not to batch-norm scale and shift."""
    return not path.endswith((".gamma", ".beta"))


def sgd_step(params: Mapping[str, Variable], grads: Mapping[str, np.ndarray], lr: float,
             weight_decay: float = 0.0, momentum: float = 0.0,
             velocity: dict | None = None) -> None:
    """In place: ``theta <- theta - lr * (g + wd * theta)`` (decay skipped for gamma/beta).

    With ``momentum > 0`` the step becomes ``v <- m v + (g + wd theta)``,
    ``theta <- theta - lr v`` and ``velocity`` holds the ``v`` per path.
    """
    for path in params:
        if path not in grads:
            raise ContractError(f"no gradient for parameter {path!r}")
    if momentum and velocity is None:
        raise ContractError("momentum needs a velocity dict")
    for path, p in params.items():
        step = np.asarray(grads[path]).reshape(p.value.shape)
        if weight_decay and decays(path):
            step = step + weight_decay * p.value
        if momentum:
            v = velocity.get(path)
            v = step.copy() if v is None else momentum * v + step
            velocity[path] = v
            step = v
        p.value -= lr * step


# -- configuration -------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 10
    lr_schedule: LRSchedule = field(default_factory=LRSchedule)
    weight_decay: float = 1e-4
    early_stop: bool = True
    seed: int = 0
    momentum: float = 0.0
    patience: int = 2
    min_delta: float = 1e-4
    eval_batch_size: int = 250
    record_wall_time: bool = False  # wall-clock seconds break byte-identical logs

    def __post_init__(self):
        self.lr_schedule = LRSchedule.parse(self.lr_schedule)
        if self.batch_size < 1 or self.max_epochs < 1 or self.eval_batch_size < 1:
            raise ValueError("batch_size, max_epochs and eval_batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = self.lr_schedule.to_json()
        return d


def config_hash(model_cfg: ModelConfig) -> str:
    blob = json.dumps(model_cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# -- losses and evaluation --------------------------------------------------------

def digits_to_targets(labels) -> list[list[int]]:
    """Digit strings to CTC label sequences (label = digit + 1; 0 is the blank)."""
    return [[int(d) + 1 for d in lab] for lab in labels]


def targets_to_digits(seq) -> list[int]:
    return [int(s) - 1 for s in seq]


def batch_loss(logits: Variable, labels, cfg: ModelConfig) -> Variable:
    if cfg.task == CLASSIFY:
        return cross_entropy(logits, np.asarray(labels))
    return ctc.ctc_batch_loss(logits, digits_to_targets(labels))


def batch_correct(logits: np.ndarray, labels, cfg: ModelConfig) -> int:
    """Top-1 hits for classification, exact whole-string matches for sequences."""
    if cfg.task == CLASSIFY:
        return int(np.sum(np.argmax(logits.reshape(logits.shape[0], -1), axis=1) == np.asarray(labels)))
    hits = 0
    for z, lab in zip(logits[:, 0], labels):
        hits += targets_to_digits(ctc.greedy_decode(z)) == list(lab)
    return hits


def evaluate(params: ModelParams, cfg: ModelConfig, data: Dataset, batch_size: int = 250):
    """Mean loss and accuracy in eval mode; returns ``(loss, accuracy)``."""
    total_loss, correct = 0.0, 0
    for i in range(0, len(data), batch_size):
        x, labels = data.images[i:i + batch_size], data.labels[i:i + batch_size]
        logits = forward(x, params, cfg, EVAL)
        total_loss += float(batch_loss(logits, labels, cfg).value.sum()) * x.shape[0]
        correct += batch_correct(logits.value, labels, cfg)
    return total_loss / len(data), correct / len(data)


# -- metric log ------------------------------------------------------------------

METRIC_FIELDS = ("epoch", "lr", "train_loss", "test_loss", "train_acc", "test_acc", "wall_seconds")


@dataclass
class MetricLog:
    records: list[dict] = field(default_factory=list)
    path: Path | None = None

    def append(self, record: dict) -> None:
        record = {k: record.get(k) for k in METRIC_FIELDS}
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")

    def column(self, name: str) -> list:
        return [r[name] for r in self.records]

    @classmethod
    def read(cls, path) -> "MetricLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([json.loads(l) for l in lines if l.strip()])


# -- checkpoints -----------------------------------------------------------------

MANIFEST, BLOB = "manifest.json", "params.bin"


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    metadata: dict


def save_checkpoint(path, params: ModelParams, metadata: dict | None = None) -> Path:
    """Write ``path/manifest.json`` and ``path/params.bin`` (little-endian float32).

    Entries (learnable parameters and batch-norm statistics) are ordered
    lexicographically by path; each records its byte offset into the blob.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in state_dict(params).items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"path": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        chunks.append(data)
        offset += len(data)
    manifest = {"format": CHECKPOINT_FORMAT, "entries": entries, "metadata": metadata or {}}
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint directory; entry offsets (not order) locate the data."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: no {MANIFEST}") from exc
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptManifestError(f"{path / MANIFEST}: {exc}") from exc
    try:
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise CorruptManifestError(f"unsupported format {manifest.get('format')!r}")
        entries = [(str(e["path"]), tuple(int(s) for s in e["shape"]), str(e["dtype"]), int(e["offset"]))
                   for e in manifest["entries"]]
        metadata = dict(manifest.get("metadata", {}))
    except (AttributeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptManifestError(f"{path / MANIFEST}: malformed entries ({exc})") from exc
    try:
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: no {BLOB}") from exc
    expected = sum(math.prod(shape) * 4 for _, shape, _, _ in entries)
    if len(blob) < expected:
        raise TruncatedBlobError(f"{path / BLOB}: {len(blob)} bytes, manifest needs {expected}")
    if len(blob) > expected:
        raise CorruptManifestError(f"{path / BLOB}: {len(blob) - expected} bytes not covered by the manifest")
    arrays = {}
    for name, shape, dtype, offset in entries:
        if dtype != "float32":
            raise CorruptManifestError(f"{name}: dtype {dtype!r}, expected 'float32'")
        count = math.prod(shape)
        if offset < 0 or offset + 4 * count > len(blob):
            raise TruncatedBlobError(f"{name}: bytes [{offset}, {offset + 4 * count}) past end of blob")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).astype(np.float64).reshape(shape)
    return Checkpoint(arrays, metadata)


def apply_checkpoint(params: ModelParams, ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into ``params``; any key or shape difference is a :class:`ShapeMismatchError`."""
    try:
        load_state_dict(params, ckpt.arrays)
    except (KeyError, ValueError) as exc:
        raise ShapeMismatchError(str(exc)) from exc


def restore(path, cfg: ModelConfig) -> tuple[ModelParams, Checkpoint]:
    params = init_model(cfg)
    ckpt = load_checkpoint(path)
    apply_checkpoint(params, ckpt)
    return params, ckpt


# -- training loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    log: MetricLog
    stopped_early: bool = False
    best_epoch: int | None = None
    checkpoints: list[Path] = field(default_factory=list)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_set: Dataset, test_set: Dataset,
          out_dir=None, params: ModelParams | None = None,
          evaluate_fn: Callable | None = None) -> TrainResult:
    """Mini-batch SGD with per-epoch evaluation, checkpoints and optional early stopping.

    Each epoch shuffles with a stream derived from ``(seed, epoch)``, so runs
    with equal configs are bit-for-bit repeatable. ``train_loss`` and
    ``train_acc`` are means over the epoch's batches, measured in train mode
    before each update. ``evaluate_fn(params, epoch) -> (loss, acc)``
    replaces the test-set evaluation when given.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if model_cfg.task != CLASSIFY:
        from .model import frame_count
        frames = frame_count(model_cfg)
        for lab in train_set.labels:
            need = ctc.min_frames(lab)
            if need > frames:
                raise ctc.InfeasibleTargetError(frames, need)
    params = init_model(model_cfg) if params is None else params
    named = named_parameters(params)
    out = None
    mlog = MetricLog()
    if out_dir is not None:
        out = Path(out_dir)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        mlog.path = out / "metrics.jsonl"
        mlog.path.write_text("", encoding="utf-8")
    chash = config_hash(model_cfg)
    velocity: dict = {}
    result = TrainResult(params, mlog)
    best_loss, stale = math.inf, 0
    n, bs = len(train_set), train_cfg.batch_size

    for epoch in range(train_cfg.max_epochs):
        started = time.perf_counter()
        lr = lr_at(train_cfg.lr_schedule, epoch)
        order = rng_stream(train_cfg.seed, SHUFFLE_STREAM, epoch).permutation(n)
        loss_sum, correct = 0.0, 0
        for b, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            batch = train_set.subset(idx)
            drop_rng = rng_stream(train_cfg.seed, DROPOUT_STREAM, epoch, b)
            with Tape() as tape:
                logits = forward(batch.images, params, model_cfg, TRAIN, drop_rng)
                loss = batch_loss(logits, batch.labels, model_cfg)
            value = float(loss.value.sum())
            if not math.isfinite(value):
                last = result.checkpoints[-1] if result.checkpoints else None
                raise DivergenceError(epoch, b, last)
            correct += batch_correct(logits.value, batch.labels, model_cfg)
            grads = tape.backward(loss, named)
            sgd_step(named, grads, lr, train_cfg.weight_decay, train_cfg.momentum, velocity)
            loss_sum += value * len(idx)
            log.debug("epoch %d batch %d loss %.6f", epoch, b, value)
        train_loss, train_acc = loss_sum / n, correct / n

        if evaluate_fn is not None:
            test_loss, test_acc = evaluate_fn(params, epoch)
        else:
            test_loss, test_acc = evaluate(params, model_cfg, test_set, train_cfg.eval_batch_size)
        elapsed = time.perf_counter() - started
        mlog.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "test_loss": test_loss,
                     "train_acc": train_acc, "test_acc": test_acc,
                     "wall_seconds": elapsed if train_cfg.record_wall_time else None})
        log.info("epoch %d lr %.6g train_loss %.5f train_acc %.4f test_loss %.5f test_acc %.4f (%.1fs)",
                 epoch, lr, train_loss, train_acc, test_loss, test_acc, elapsed)

        improved = test_loss < best_loss - train_cfg.min_delta
        if improved:
            best_loss, stale, result.best_epoch = test_loss, 0, epoch
        else:
            stale += 1
        if out is not None:
            meta = {"epoch": epoch, "config_hash": chash, "model_config": model_cfg.to_dict(),
                    "train_config": train_cfg.to_dict(), "history": mlog.records,
                    "best_epoch": result.best_epoch}
            ckpt = save_checkpoint(out / "checkpoints" / f"epoch_{epoch:03d}", params, meta)
            result.checkpoints.append(ckpt)
            if result.best_epoch is not None:
                (out / "best.json").write_text(
                    json.dumps({"best_epoch": result.best_epoch,
                                "checkpoint": f"checkpoints/epoch_{result.best_epoch:03d}"}) + "\n",
                    encoding="utf-8")
        if train_cfg.early_stop and stale >= train_cfg.patience:
            result.stopped_early = True
            log.info("early stop after epoch %d (no improvement for %d epochs)", epoch, stale)
            break
    return result
