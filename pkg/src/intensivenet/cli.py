"""Command-line interface.

Machine-readable results go to stdout as JSON (one object, or JSON lines);
progress logs go to stderr. Exit codes: 0 ok, 1 check failed or training
diverged, 2 bad config or usage, 3 data or IO error, 4 incompatible checkpoint.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import checks, ctc
from . import data as D
from . import model as M
from . import trainer as T
from .blocks import BlockConfig, ConfigError

log = logging.getLogger("intensivenet")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- RunConfig ---------------------------------------------------------------------

_schedule = {
    "oneOf": [
        {"enum": [T.TEXT_SCHEDULE, T.MNIST_SCHEDULE]},
        {"type": "object", "properties": {"constant": {"type": "number", "exclusiveMinimum": 0}},
         "required": ["constant"], "additionalProperties": False},
    ]
}

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {"enum": ["mnist", "digitlines"]},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "task": {"enum": [M.CLASSIFY, M.SEQUENCE]},
                "input_shape": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                "minItems": 3, "maxItems": 3},
                "num_classes": {"type": "integer", "minimum": 1},
                "block": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "growth_rate": {"type": "integer", "minimum": 1},
                        "layer_count": {"type": "integer", "minimum": 1},
                        "compression": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                        "conv_kind": {"enum": ["separable", "standard"]},
                        "dense_blocks": {"type": "integer", "minimum": 1},
                    },
                },
                "first_conv_kernel": {"const": 5},
                "first_conv_stride": {"enum": [1, 2]},
                "stem_channels": {"type": "integer", "minimum": 1},
                "stem_kind": {"enum": ["separable", "standard"]},
                "intensive_blocks": {"type": "integer", "minimum": 1},
                "architecture": {"enum": ["intensive", "densenet"]},
                "dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "bn_momentum": {"type": "number", "minimum": 0, "maximum": 1},
                "bn_epsilon": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "batch_size": {"type": "integer", "minimum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
                "lr_schedule": _schedule,
                "weight_decay": {"type": "number", "minimum": 0},
                "early_stop": {"type": "boolean"},
                "seed": {"type": "integer", "minimum": 0},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "patience": {"type": "integer", "minimum": 1},
                "min_delta": {"type": "number", "minimum": 0},
                "eval_batch_size": {"type": "integer", "minimum": 1},
                "record_wall_time": {"type": "boolean"},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["mnist", "digitlines"]},
                "mnist_dir": {"type": "string"},
                "train_limit": {"type": ["integer", "null"], "minimum": 1},
                "test_limit": {"type": ["integer", "null"], "minimum": 1},
                "line_count": {"type": "integer", "minimum": 2},
                "split_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "split_seed": {"type": "integer", "minimum": 0},
                "lines": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "kmin": {"type": "integer", "minimum": 1},
                        "kmax": {"type": "integer", "minimum": 1},
                        "height": {"type": "integer", "minimum": 1},
                        "width": {"type": "integer", "minimum": 1},
                        "jitter": {"type": "integer", "minimum": 0},
                        "gap": {"type": "integer", "minimum": 0},
                        "seed": {"type": "integer", "minimum": 0},
                    },
                },
            },
        },
    },
}

# Both presets use heavy momentum: at their pinned rates plain SGD barely
# moves in the few hundred steps a desk run allows.
PRESETS = json.loads(json.dumps({
    "mnist": {
        "model": M.mnist_config().to_dict(),
        "train": {"batch_size": 128, "max_epochs": 5, "lr_schedule": T.MNIST_SCHEDULE,
                  "weight_decay": 1e-4, "early_stop": True, "seed": 0, "momentum": 0.99},
        "data": {"kind": "mnist", "train_limit": 5000, "test_limit": None},
    },
    "digitlines": {
        "model": M.digitlines_config(width=200).to_dict(),
        "train": {"batch_size": 32, "max_epochs": 10, "lr_schedule": T.TEXT_SCHEDULE,
                  "weight_decay": 1e-4, "early_stop": True, "seed": 0, "momentum": 0.99},
        "data": {"kind": "digitlines", "line_count": 2000, "split_ratio": 0.9, "split_seed": 0,
                 "lines": {"kmin": 3, "kmax": 6, "height": 32, "width": 200, "jitter": 2, "gap": 1,
                           "seed": 0}},
    },
}))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _error_path(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def resolve_config(doc: dict) -> dict:
    """Validate a RunConfig document and merge it over its preset (if any)."""
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        raise CliError(EXIT_CONFIG, f"config error at {_error_path(err)}: {err.message}") from err
    preset = doc.get("preset")
    merged = _merge(PRESETS[preset], doc) if preset else copy.deepcopy(doc)
    merged.pop("preset", None)
    for section in ("model", "train", "data"):
        if section not in merged:
            raise CliError(EXIT_CONFIG, f"config error at {section}: section is required without a preset")
    try:
        jsonschema.validate(merged, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        raise CliError(EXIT_CONFIG, f"config error at {_error_path(err)}: {err.message}") from err
    return merged


def load_config(path=None, preset: str | None = None) -> dict:
    if path is None:
        if preset is None:
            raise CliError(EXIT_CONFIG, "give --config or --preset")
        return resolve_config({"preset": preset})
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"invalid JSON in {path} at line {exc.lineno} column {exc.colno}: "
                                    f"{exc.msg}") from exc
    if preset is not None:
        doc.setdefault("preset", preset)
    return resolve_config(doc)


def build_model_config(section: dict) -> M.ModelConfig:
    kw = dict(section)
    if "block" in kw:
        kw["block"] = BlockConfig(**kw["block"])
    try:
        return M.ModelConfig(**kw)
    except (ConfigError, ValueError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, f"config error at model: {exc}") from exc


def build_train_config(section: dict) -> T.TrainConfig:
    try:
        return T.TrainConfig(**section)
    except (ValueError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, f"config error at train: {exc}") from exc


def load_datasets(section: dict, model_cfg: M.ModelConfig) -> tuple[D.Dataset, D.Dataset]:
    """Training and test sets described by the ``data`` section."""
    mnist_dir = section.get("mnist_dir") or D.default_data_dir()
    try:
        if section.get("kind", "mnist") == "mnist":
            if model_cfg.task != M.CLASSIFY:
                raise CliError(EXIT_CONFIG, "config error at data/kind: mnist data needs a classify model")
            train = D.load_mnist_split("train", mnist_dir)
            test = D.load_mnist_split("test", mnist_dir)
            if section.get("train_limit"):
                train = train.subset(np.arange(min(section["train_limit"], len(train))))
            if section.get("test_limit"):
                test = test.subset(np.arange(min(section["test_limit"], len(test))))
            return train, test
        if model_cfg.task != M.SEQUENCE:
            raise CliError(EXIT_CONFIG, "config error at data/kind: digitlines need a sequence model")
        spec = D.LineSpec(**section.get("lines", {}))
        if (spec.height, spec.width) != tuple(model_cfg.input_shape[:2]):
            raise CliError(EXIT_CONFIG, f"config error at data/lines: canvas {spec.height}x{spec.width} "
                                        f"does not match model input {model_cfg.input_shape[:2]}")
        glyphs = D.load_mnist_split("train", mnist_dir)
        lines = D.generate_lines(spec, glyphs, section.get("line_count", 2000), M.frame_count(model_cfg))
        return D.split(lines, section.get("split_ratio", 0.9), section.get("split_seed", 0))
    except CliError:
        raise
    except (OSError, D.DataError, ctc.InfeasibleTargetError) as exc:
        raise CliError(EXIT_DATA, f"data error: {exc}") from exc


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


# -- commands --------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, args.preset)
    model_cfg = build_model_config(cfg["model"])
    train_cfg = build_train_config(cfg["train"])
    train_set, test_set = load_datasets(cfg["data"], model_cfg)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot write to {out}: {exc}") from exc
    log.info("training on %d samples, testing on %d", len(train_set), len(test_set))
    try:
        result = T.train(model_cfg, train_cfg, train_set, test_set, out_dir=out)
    except T.DivergenceError as exc:
        _emit({"status": "diverged", "epoch": exc.epoch, "batch": exc.batch,
               "last_checkpoint": str(exc.checkpoint) if exc.checkpoint else None})
        return EXIT_CHECK
    except OSError as exc:
        raise CliError(EXIT_DATA, f"IO error: {exc}") from exc
    last = result.log.records[-1]
    _emit({"status": "early_stop" if result.stopped_early else "completed",
           "epochs": len(result.log.records), "best_epoch": result.best_epoch,
           "test_loss": last["test_loss"], "test_acc": last["test_acc"],
           "checkpoint": str(result.checkpoints[-1])})
    return EXIT_OK


def _restore(checkpoint, model_cfg: M.ModelConfig):
    try:
        return T.restore(checkpoint, model_cfg)
    except T.ShapeMismatchError as exc:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint does not fit the model: {exc}") from exc
    except T.CheckpointError as exc:
        raise CliError(EXIT_DATA, f"cannot read checkpoint: {exc}") from exc


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.preset)
    model_cfg = build_model_config(cfg["model"])
    train_cfg = build_train_config(cfg["train"])
    params, _ = _restore(args.checkpoint, model_cfg)
    _, test_set = load_datasets(cfg["data"], model_cfg)
    loss, acc = T.evaluate(params, model_cfg, test_set, train_cfg.eval_batch_size)
    _emit({"loss": loss, "accuracy": acc, "count": len(test_set)})
    return EXIT_OK


def _read_inputs(path: str) -> D.Dataset:
    p = Path(path)
    try:
        if p.suffix in (".json", ".bin"):
            return D.load_lines(p.with_suffix(""))
        dims, payload = D.read_idx(p, D.IMAGE_MAGIC)
    except (OSError, D.DataError) as exc:
        raise CliError(EXIT_DATA, f"cannot read input {path}: {exc}") from exc
    images = np.frombuffer(payload, dtype=np.uint8).reshape(dims[0], dims[1], dims[2], 1) / 255.0
    return D.Dataset(images, np.zeros(dims[0], dtype=np.int64))


def cmd_predict(args) -> int:
    try:
        ckpt = T.load_checkpoint(args.checkpoint)
    except T.CheckpointError as exc:
        raise CliError(EXIT_DATA, f"cannot read checkpoint: {exc}") from exc
    if "model_config" not in ckpt.metadata:
        raise CliError(EXIT_CHECKPOINT, "checkpoint metadata has no model_config")
    model_cfg = build_model_config(ckpt.metadata["model_config"])
    params = M.init_model(model_cfg)
    try:
        T.apply_checkpoint(params, ckpt)
    except T.ShapeMismatchError as exc:
        raise CliError(EXIT_CHECKPOINT, str(exc)) from exc
    inputs = _read_inputs(args.input)
    if inputs.images.shape[1:] != tuple(model_cfg.input_shape):
        raise CliError(EXIT_CONFIG, f"input of shape {inputs.images.shape[1:]} does not suit this "
                                    f"{model_cfg.task} model (expects {tuple(model_cfg.input_shape)})")
    if model_cfg.task == M.CLASSIFY:
        preds = [str(int(c)) for c in M.predict_classify(inputs.images, params, model_cfg)]
    else:
        preds = ["".join(str(d) for d in T.targets_to_digits(seq))
                 for seq in M.predict_sequence(inputs.images, params, model_cfg)]
    _emit({"task": model_cfg.task, "predictions": preds})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = checks.gradcheck_suite(args.size, report=_emit)
    failed = [r["component"] for r in rows if not r["passed"]]
    if failed:
        log.error("gradient check failed for: %s", ", ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


def cmd_ctc_oracle(args) -> int:
    try:
        summary = checks.ctc_oracle_grid(args.tmax, args.alphabet, args.max_target_len)
    except (ctc.InstanceTooLargeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    _emit(summary)
    return EXIT_OK if summary["passed"] else EXIT_CHECK


def cmd_plot_svg(args) -> int:
    from .plot import metrics_svg
    try:
        records = T.MetricLog.read(args.metrics).records
        Path(args.out).write_text(metrics_svg(records), encoding="utf-8")
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise CliError(EXIT_DATA, f"cannot render {args.metrics}: {exc}") from exc
    _emit({"svg": str(args.out), "epochs": len(records)})
    return EXIT_OK


def cmd_schema(args) -> int:
    if args.preset:
        _emit(PRESETS[args.preset])
    else:
        _emit(RUN_CONFIG_SCHEMA)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intensivenet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--preset", choices=sorted(PRESETS), help="embedded config (merged under --config)")

    p = sub.add_parser("train", help="train a model; writes checkpoints and metrics.jsonl")
    config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="loss and accuracy of a checkpoint on the configured test set")
    config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="decode an IDX image file or a saved line set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--size", choices=sorted(checks.SIZES), default="small")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ctc-oracle", help="forward-backward CTC against path enumeration")
    p.add_argument("--tmax", type=int, default=8)
    p.add_argument("--alphabet", type=int, default=3)
    p.add_argument("--max-target-len", type=int, default=3)
    p.set_defaults(func=cmd_ctc_oracle)

    p = sub.add_parser("plot-svg", help="render metrics.jsonl as an SVG chart")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_svg)

    p = sub.add_parser("schema", help="print the RunConfig JSON schema or a preset")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_schema)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s", force=True)
    try:
        return args.func(args)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
