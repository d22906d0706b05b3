"""Command line entry point: ``sdreamer synth|train|eval|infer|inspect``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .models import (
    CheckpointError,
    EpochModelConfig,
    PathwayError,
    SequenceModelConfig,
    build_model,
    infer,
    load_checkpoint,
    read_checkpoint,
)
from .signal_prep import (
    STAGE_NAMES,
    RecordFormatError,
    SynthConfig,
    build_dataset,
    load_dataset,
    load_record,
    synth_generate,
    validate_transition_matrix,
    write_dataset,
)
from .training import DistillConfig, TrainConfig, evaluate, train

log = logging.getLogger("sdreamer")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
PATHWAY_CHOICES = ("auto", "eeg", "emg", "mix")


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


# ------------------------------------------------------------------- config

_MODEL_FIELDS = {f.name: f for f in fields(EpochModelConfig)} | {f.name: f for f in fields(SequenceModelConfig)}
_DISTILL_FIELDS = {f.name: f for f in fields(DistillConfig)}
_OPTIM_KEYS = ("lr", "weight_decay", "beta1", "beta2", "eps")
_TRAIN_KEYS = ("steps", "batch_size", "micro_batch", "eval_interval", "stop_at_accuracy")


@dataclass
class RunConfig:
    """Everything a ``train`` run needs, addressable by flat dotted keys.

    Keys look like ``model.dim``, ``distill.alpha``, ``optim.lr``,
    ``train.steps``, ``data.dir`` or ``seed``. A bare trailing name such as
    ``alpha`` is accepted when it identifies exactly one key.
    """

    kind: str = "epoch"
    model: dict[str, Any] = field(default_factory=dict)
    distill: dict[str, Any] = field(default_factory=dict)
    optim: dict[str, Any] = field(default_factory=dict)
    train: dict[str, Any] = field(default_factory=dict)
    data_dir: str = ""
    train_subjects: list[str] | None = None
    test_subjects: list[str] | None = None
    out_dir: str = "run"
    seed: int = 0

    # key table: dotted key -> (section, name)
    @staticmethod
    def keys() -> list[str]:
        out = ["model.kind", "seed", "data.dir", "data.train_subjects", "data.test_subjects", "out.dir"]
        out += [f"model.{n}" for n in _MODEL_FIELDS]
        out += [f"distill.{n}" for n in _DISTILL_FIELDS]
        out += [f"optim.{n}" for n in _OPTIM_KEYS]
        out += [f"train.{n}" for n in _TRAIN_KEYS]
        return out

    @classmethod
    def resolve_key(cls, key: str) -> str:
        known = cls.keys()
        if key in known:
            return key
        matches = [k for k in known if k.rsplit(".", 1)[-1] == key]
        if len(matches) == 1:
            return matches[0]
        if matches:
            raise UsageError(f"ambiguous key {key!r}: could be {', '.join(matches)}")
        raise UsageError(f"unknown config key {key!r}")

    @classmethod
    def from_flat(cls, values: dict[str, Any]) -> "RunConfig":
        """Build and validate; every offending field is reported at once."""
        errors: list[str] = []
        resolved: dict[str, Any] = {}
        for key, value in values.items():
            try:
                resolved[cls.resolve_key(key)] = value
            except UsageError as exc:
                errors.append(str(exc))
        cfg = cls()
        for key, value in resolved.items():
            section, _, name = key.partition(".")
            if key == "model.kind":
                cfg.kind = value
            elif key == "seed":
                cfg.seed = value
            elif key == "data.dir":
                cfg.data_dir = value
            elif key == "data.train_subjects":
                cfg.train_subjects = value
            elif key == "data.test_subjects":
                cfg.test_subjects = value
            elif key == "out.dir":
                cfg.out_dir = value
            else:
                getattr(cfg, section)[name] = value
        errors.extend(cfg.validate())
        if errors:
            raise UsageError("invalid configuration:\n  " + "\n  ".join(errors))
        return cfg

    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "model.kind": self.kind,
            "seed": self.seed,
            "data.dir": self.data_dir,
            "data.train_subjects": self.train_subjects,
            "data.test_subjects": self.test_subjects,
            "out.dir": self.out_dir,
        }
        for section in ("model", "distill", "optim", "train"):
            for name, value in sorted(getattr(self, section).items()):
                out[f"{section}.{name}"] = value
        return out

    # ---------------------------------------------------------- validation
    def validate(self) -> list[str]:
        errors = []
        if self.kind not in ("epoch", "sequence"):
            errors.append(f"model.kind: must be 'epoch' or 'sequence', got {self.kind!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            errors.append(f"seed: must be an integer, got {self.seed!r}")
        if not self.data_dir or not isinstance(self.data_dir, str):
            errors.append("data.dir: required")
        for name in ("train_subjects", "test_subjects"):
            value = getattr(self, name)
            if value is not None and not (isinstance(value, list) and all(isinstance(s, str) for s in value)):
                errors.append(f"data.{name}: must be a list of subject ids")
        if isinstance(self.train_subjects, list) and isinstance(self.test_subjects, list):
            overlap = sorted(set(self.train_subjects) & set(self.test_subjects))
            if overlap:
                errors.append(f"data: train and test subjects overlap: {overlap}")
        allowed = {f.name for f in fields(EpochModelConfig if self.kind == "epoch" else SequenceModelConfig)}
        for name, value in self.model.items():
            if self.kind in ("epoch", "sequence") and name not in allowed:
                errors.append(f"model.{name}: not a field of the {self.kind} model")
            else:
                errors.extend(_type_errors(f"model.{name}", value, _MODEL_FIELDS[name].default))
        for name, value in self.distill.items():
            errors.extend(_type_errors(f"distill.{name}", value, _DISTILL_FIELDS[name].default))
        for name, value in self.optim.items():
            errors.extend(_check_number(f"optim.{name}", value, minimum=0.0))
        for name, value in self.train.items():
            if name == "stop_at_accuracy":
                if value is not None:
                    errors.extend(_check_number(f"train.{name}", value, minimum=0.0, maximum=1.0))
            else:
                errors.extend(_check_number(f"train.{name}", value, minimum=0 if name == "eval_interval" else 1, integer=True))
        if not errors:
            errors.extend(self._semantic_errors())
        return errors

    def _semantic_errors(self) -> list[str]:
        errors = []
        for label, build in (
            ("model", self.model_config),
            ("distill", self.distill_config),
        ):
            try:
                build()
            except (ValueError, TypeError) as exc:
                errors.append(f"{label}: {exc}")
        return errors

    def check_paths(self) -> None:
        if not Path(self.data_dir).is_dir():
            raise UsageError(f"data directory not found: {self.data_dir}")

    # ---------------------------------------------------------- builders
    def model_config(self):
        cls = EpochModelConfig if self.kind == "epoch" else SequenceModelConfig
        return cls(**self.model)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(**self.distill)

    def train_config(self) -> TrainConfig:
        values = dict(self.train)
        values.update(self.optim)
        if self.kind == "sequence":
            K = self.model_config().K
            values.setdefault("batch_size", 16)
            values.setdefault("micro_batch", max(1, 64 // K))
        values.setdefault("eval_pathways", ("mix", "eeg", "emg"))
        return TrainConfig(**values)


def _type_errors(key: str, value: Any, default: Any) -> list[str]:
    if isinstance(default, bool):
        return [] if isinstance(value, bool) else [f"{key}: must be true or false, got {value!r}"]
    if isinstance(default, int):
        return _check_number(key, value, integer=True)
    if isinstance(default, float):
        return _check_number(key, value)
    if isinstance(default, str) and not isinstance(value, str):
        return [f"{key}: must be a string, got {value!r}"]
    return []


def _check_number(key, value, *, minimum=None, maximum=None, integer=False) -> list[str]:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return [f"{key}: must be a number, got {value!r}"]
    if integer and not isinstance(value, int):
        return [f"{key}: must be an integer, got {value!r}"]
    if not math.isfinite(value):
        return [f"{key}: must be finite"]
    if minimum is not None and value < minimum:
        return [f"{key}: must be >= {minimum}, got {value}"]
    if maximum is not None and value > maximum:
        return [f"{key}: must be <= {maximum}, got {value}"]
    return []


def _flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def load_run_config(path: str | None, overrides: Sequence[str] = (), flags: dict[str, Any] | None = None) -> RunConfig:
    """File values, then ``key=value`` overrides, then explicit flags; later wins."""
    values: dict[str, Any] = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        try:
            tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"config {path} is not valid YAML/JSON: {exc}") from exc
        if not isinstance(tree, dict):
            raise UsageError(f"config {path} must be a mapping of keys to values")
        values.update(_flatten(tree))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not of the form key=value")
        values[key.strip()] = yaml.safe_load(raw) if raw.strip() else ""
    values.update({k: v for k, v in (flags or {}).items() if v is not None})
    # an override naming a bare key must replace the file's dotted key
    merged: dict[str, Any] = {}
    for key, value in values.items():
        try:
            merged[RunConfig.resolve_key(key)] = value
        except UsageError:
            merged[key] = value
    return RunConfig.from_flat(merged)


# ----------------------------------------------------------------- commands

def _configure_threads() -> int:
    raw = os.environ.get("SDREAMER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SDREAMER_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SDREAMER_THREADS must be a positive integer, got {raw!r}")
    return n


def _parse_matrix(text: str) -> np.ndarray:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--transition-matrix must be 9 comma-separated reals, got {text!r}") from None
    if len(values) != 9:
        raise UsageError(f"--transition-matrix needs 9 values, got {len(values)}")
    matrix = np.array(values).reshape(3, 3)
    try:
        validate_transition_matrix(matrix)
    except ValueError as exc:
        raise UsageError(f"invalid transition matrix: {exc}") from None
    return matrix


def cmd_synth(args) -> int:
    config = SynthConfig(unlabeled_fraction=args.unlabeled_fraction, sample_rate_hz=args.sample_rate)
    if args.transition_matrix:
        config.transition_matrix = _parse_matrix(args.transition_matrix)
    if args.subjects < 1 or args.seconds < 1:
        raise UsageError("--subjects and --seconds must be positive")
    records = synth_generate(args.subjects, args.seconds, args.seed, config)
    if args.drop_channel:
        from dataclasses import replace

        records = [replace(r, **{args.drop_channel: None}) for r in records]
    paths = write_dataset(records, args.out_dir)
    print(f"wrote {len(paths)} subjects to {args.out_dir}")
    return EXIT_OK


def _split_subjects(cfg: RunConfig, all_ids: list[str]) -> tuple[list[str], list[str]]:
    train_ids, test_ids = cfg.train_subjects, cfg.test_subjects
    if train_ids is None and test_ids is None:
        n_test = max(1, len(all_ids) // 5)
        if len(all_ids) < 2:
            raise UsageError("need at least two subjects for a subject-wise split")
        return all_ids[:-n_test], all_ids[-n_test:]
    if train_ids is None:
        train_ids = [s for s in all_ids if s not in set(test_ids)]
    if test_ids is None:
        test_ids = [s for s in all_ids if s not in set(train_ids)]
    return list(train_ids), list(test_ids)


def _build(records, model_cfg, kind: str):
    if kind == "epoch":
        return build_dataset(records, model_cfg.patch_width)
    return build_dataset(records, model_cfg.patch_width, "sequence", K=model_cfg.K)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.override, {"data.dir": args.data_dir, "out.dir": args.out_dir})
    cfg.check_paths()
    model_cfg = cfg.model_config()
    records = load_dataset(cfg.data_dir)
    by_id = {r.subject_id: r for r in records}
    train_ids, test_ids = _split_subjects(cfg, sorted(by_id))
    missing = sorted(set(train_ids + test_ids) - set(by_id))
    if missing:
        raise UsageError(f"subjects not found in {cfg.data_dir}: {missing}")
    cfg.train_subjects, cfg.test_subjects = train_ids, test_ids
    train_data = _build([by_id[s] for s in train_ids], model_cfg, cfg.kind)
    test_data = _build([by_id[s] for s in test_ids], model_cfg, cfg.kind) if test_ids else None

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg.kind, model_cfg, seed=cfg.seed)
    result = train(
        model,
        train_data,
        test_data,
        cfg.distill_config(),
        cfg.train_config(),
        seed=cfg.seed,
        log_path=out / "train_log.jsonl",
    )
    from .models import save_checkpoint

    save_checkpoint(
        model,
        out / "model.sdrm",
        step=result.optimizer.step,
        extra={"run_config": cfg.to_flat()},
    )
    (out / "run_config.yaml").write_text(yaml.safe_dump(cfg.to_flat(), sort_keys=True))
    if result.evals:
        reports = {p: r.to_dict() for p, r in result.evals[-1]["reports"].items()}
        (out / "eval_report.json").write_text(json.dumps({"step": result.evals[-1]["step"], "reports": reports}, indent=2))
        mix = result.evals[-1]["reports"].get("mix")
        if mix is not None:
            print(mix.format())
    print(f"checkpoint: {out / 'model.sdrm'}")
    return EXIT_OK


def _load_model(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args) -> int:
    model, _ = _load_model(args.checkpoint)
    if not Path(args.data_dir).is_dir():
        raise UsageError(f"data directory not found: {args.data_dir}")
    records = load_dataset(args.data_dir, args.subjects)
    data = _build(records, model.config, model.kind)
    report = evaluate(model, data, args.pathway)
    print(report.format())
    if args.out:
        Path(args.out).write_text(report.to_json())
    return EXIT_OK


def _sequence_predictions(model, data, pathway: str, emit: bool):
    """Per-epoch predictions for a sequence model, from windows covering every epoch."""
    K = model.config.K
    starts = data.cover_windows(K)
    if len(starts) == 0:
        raise ValueError(f"input has no run of {K} consecutive epochs")
    pred = infer(model, data.x[starts[:, None] + np.arange(K)], pathway, return_embeddings=emit)
    n = len(data.labels)
    probs = np.full((n, model.config.n_classes), np.nan)
    emb = None
    filled = np.zeros(n, dtype=bool)
    for w, s in enumerate(starts):
        span = np.arange(s, s + K)
        fresh = ~filled[span]
        probs[span[fresh]] = pred.probabilities[w][fresh]
        if emit:
            if emb is None:
                emb = np.full((n, pred.embeddings.shape[-1]), np.nan)
            emb[span[fresh]] = pred.embeddings[w][fresh]
        filled[span] = True
    return pred.pathway, probs, emb, filled


def cmd_infer(args) -> int:
    model, _ = _load_model(args.checkpoint)
    record = load_record(args.input)
    data = _build([record], model.config, "epoch")
    if model.kind == "epoch":
        pred = infer(model, data.x, args.pathway, return_embeddings=args.emit_embeddings is not None)
        pathway, probs, emb = pred.pathway, pred.probabilities, pred.embeddings
        covered = np.ones(len(probs), dtype=bool)
    else:
        pathway, probs, emb, covered = _sequence_predictions(
            model, data, args.pathway, args.emit_embeddings is not None
        )
    stream = open(args.out, "w") if args.out else sys.stdout
    try:
        for i in range(len(probs)):
            if not covered[i]:
                continue
            p = probs[i]
            label = int(np.argmax(p))
            rec = {
                "index": int(data.positions[i]),
                "label": STAGE_NAMES[label],
                "label_id": label,
                "probabilities": [float(v) for v in p],
                "pathway": pathway,
            }
            stream.write(json.dumps(rec) + "\n")
    finally:
        if args.out:
            stream.close()
    if args.emit_embeddings is not None:
        np.savez(args.emit_embeddings, **{pathway: emb}, index=data.positions[covered])
    return EXIT_OK


def cmd_inspect(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    header, blobs = read_checkpoint(args.checkpoint)
    summary = dict(header)
    summary.pop("rng_state", None)
    summary["n_tensors"] = len(blobs)
    summary["n_parameters"] = int(sum(b.size for b in blobs.values()))
    if args.tensors:
        summary["tensors"] = {name: list(b.shape) for name, b in blobs.items()}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdreamer", description="Sleep staging with self-distilled modality experts.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--seconds", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--transition-matrix", help="9 comma-separated reals, row-major")
    p.add_argument("--unlabeled-fraction", type=float, default=0.0)
    p.add_argument("--sample-rate", type=int, default=512)
    p.add_argument("--drop-channel", choices=("eeg", "emg"), help="write single-channel records")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("config", nargs="?", help="YAML or JSON file of flat dotted keys")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--data-dir")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.add_argument("--pathway", choices=PATHWAY_CHOICES, default="auto")
    p.add_argument("--subjects", nargs="+")
    p.add_argument("--out", help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="per-second predictions for one subject directory")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--pathway", choices=PATHWAY_CHOICES, default="auto")
    p.add_argument("--out", help="JSONL output file (default stdout)")
    p.add_argument("--emit-embeddings", metavar="NPZ", help="write final-layer CLS embeddings")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("inspect", help="print checkpoint metadata")
    p.add_argument("checkpoint")
    p.add_argument("--tensors", action="store_true", help="list tensor names and shapes")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        _configure_threads()
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RecordFormatError, CheckpointError, PathwayError, FileNotFoundError, KeyError, ValueError,
            FloatingPointError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
