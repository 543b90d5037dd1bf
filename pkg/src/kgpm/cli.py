"""Command line entry point: ``kgpm {extract,synth,train,evaluate,predict,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import ingest, synth
from .checks import full_model_grad_check
from .core import (
    KnowledgeGraph, Sample, case_sequence, load_event_log, load_knowledge_graph,
    load_labels, prefix_expand, save_event_log, save_knowledge_graph,
)
from .errors import ConfigMismatch, DataError, NumericalError, TrainingDiverged
from .gnn import GnnConfig
from .head import TaskKind
from .metrics import SplitSpec, split, split_cases
from .model import ModelSpec, ProcessModel, TimeConfig, build_samples, class_vocabulary, model_graph
from .train import (
    TrainConfig, evaluate_model, load_checkpoint, model_from_checkpoint, save_checkpoint, train,
)

logger = logging.getLogger("kgpm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

COMPOSITION = {"mul": "multiply", "add": "add"}
FLOW = {"bwd": "backward", "bidir": "bidirectional"}
NEIGHBOR_NORM = {"sum": "none", "mean": "mean"}
TIME_MODE = {"none": "zero", "sin": "sinusoidal", "param": "parameterized"}

# every key can come from --config; explicit flags win
DEFAULTS = {
    "graph": None,
    "events": None,
    "labels": None,
    "task": "binary",
    "prefix_expand": False,
    "cutoff": None,
    "isolated_policy": "create",
    "dim": 100,
    "epochs": 200,
    "lr": 0.01,
    "batch_size": 32,
    "dropout": 0.0,
    "l2": 0.0,
    "l2_scope": "weights",
    "optimizer": "adam",
    "selection_metric": None,
    "gc_layers": 1,
    "composition": "mul",
    "flow": "bwd",
    "neighbor_norm": "sum",
    "time_embedding": "none",
    "time_buckets": 64,
    "time_bucket_size": 1,
    "time_key": None,
    "time_scale": 1.0,
    "bias": False,
    "type_nodes": True,
    "allow_empty": False,
    "split": "uniform",
    "val_fraction": 0.2,
    "test_fraction": 0.05,
    "seed": 0,
    "workers": 1,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def merge_config(args: argparse.Namespace) -> dict:
    """defaults < --config file < explicit command-line flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            doc = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from None
        unknown = sorted(set(doc) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        cfg.update(doc)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["time_key"] is None:
        cfg["time_key"] = "pos" if cfg["prefix_expand"] else "abs"
    if cfg["prefix_expand"]:
        cfg["task"] = "multiclass"
    if cfg["selection_metric"] is None:
        cfg["selection_metric"] = "val_rmse" if cfg["task"] == "regression" else "val_accuracy"
    return cfg


@dataclass
class Prepared:
    graph: KnowledgeGraph
    task: TaskKind
    classes: tuple[str, ...]
    splits: dict[str, list[Sample]]


def prepare_data(cfg: dict) -> Prepared:
    """Load files, build samples and split them by case."""
    if not cfg["events"]:
        raise UsageError("--events is required")
    graph = load_knowledge_graph(cfg["graph"]) if cfg["graph"] else KnowledgeGraph()
    log = load_event_log(cfg["events"], graph, cfg["isolated_policy"])
    spec = SplitSpec(cfg["split"], cfg["val_fraction"], cfg["test_fraction"], cfg["seed"])
    if cfg["prefix_expand"]:
        classes = tuple(log.types)
        task = TaskKind.multiclass(len(classes))
        end_times = {c: case_sequence(log, c)[-1].timestamp for c in log.cases}
        if spec.strategy == "stratified":
            raise UsageError("stratified splits need case labels; use uniform or temporal_latest")
        parts = split_cases(list(log.cases), spec, end_times=end_times)
        splits = {}
        for name, cases in zip(("train", "val", "test"), parts):
            samples, _ = prefix_expand(log, cases)
            splits[name] = [Sample(s.case_id, s.events, classes.index(s.target)) for s in samples]
    else:
        if not cfg["labels"]:
            raise UsageError("--labels is required unless --prefix-expand is set")
        labels = load_labels(cfg["labels"])
        if cfg["task"] == "multiclass":
            classes = class_vocabulary(labels[c] for c in log.cases if c in labels)
            task = TaskKind.multiclass(len(classes))
        else:
            classes = ()
            task = TaskKind(cfg["task"])
        samples = build_samples(log, labels, task, classes, cutoff=cfg["cutoff"])
        if not cfg["allow_empty"]:
            empty = [s.case_id for s in samples if not s.events]
            if empty:
                raise DataError(
                    f"{len(empty)} case(s) have no events before the cutoff (first: {empty[0]!r}); "
                    "use --allow-empty to keep them"
                )
        splits = dict(zip(("train", "val", "test"), split(samples, spec)))
    return Prepared(model_graph(log, type_nodes=cfg["type_nodes"]), task, classes, splits)


def model_spec_from(cfg: dict, prepared: Prepared) -> ModelSpec:
    return ModelSpec(
        dim=cfg["dim"],
        task=prepared.task,
        gnn=GnnConfig(
            layers=cfg["gc_layers"],
            composition=COMPOSITION[cfg["composition"]],
            flow=FLOW[cfg["flow"]],
            neighbor_normalization=NEIGHBOR_NORM[cfg["neighbor_norm"]],
        ),
        time=TimeConfig(
            mode=TIME_MODE[cfg["time_embedding"]],
            key=cfg["time_key"],
            time_scale=cfg["time_scale"],
            bucket_size=cfg["time_bucket_size"],
            max_buckets=cfg["time_buckets"],
        ),
        classes=prepared.classes,
        bias=cfg["bias"],
        type_nodes=cfg["type_nodes"],
        allow_empty=cfg["allow_empty"],
    )


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["lr"], epochs=cfg["epochs"], embedding_dim=cfg["dim"],
        batch_size=cfg["batch_size"], dropout_rate=cfg["dropout"], l2_weight=cfg["l2"],
        l2_scope=cfg["l2_scope"], optimizer=cfg["optimizer"], seed=cfg["seed"],
        selection_metric=cfg["selection_metric"], workers=cfg["workers"],
    )


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _command_manifest(args, out: Path, **extra) -> None:
    """Write ``<out>.manifest.json`` recording the command and its arguments."""
    argv = {k: v for k, v in vars(args).items() if k != "func"}
    _write_json(out.with_name(out.name + ".manifest.json"), {"command": args.command, "args": argv, **extra})


# -- commands -------------------------------------------------------------------

def cmd_extract(args) -> int:
    mapping = ingest.load_schema(args.schema)
    result = ingest.extract(mapping, args.data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_knowledge_graph(result.graph, out / "graph.tsv")
    save_event_log(result.log, out / "events.csv")
    manifest = {"command": "extract", "schema": str(args.schema), "data_dir": str(args.data_dir),
                **result.manifest}
    _write_json(out / "manifest.json", manifest)
    print(json.dumps({k: manifest[k] for k in ("nodes", "edges", "events", "cases")}, sort_keys=True))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = {"cases": args.cases, "kg_depth": args.kg_depth, "noise": args.noise, "seed": args.seed}
    if args.cases < 20:
        raise UsageError("--cases must be at least 20")
    data = synth.generate(args.cases, args.kg_depth, args.noise, args.seed)
    synth.write(data, args.out, spec)
    print(f"wrote {len(data.log.cases)} cases to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = merge_config(args)
    if not args.out:
        raise UsageError("--out is required")
    prepared = prepare_data(cfg)
    spec = model_spec_from(cfg, prepared)
    tconf = train_config_from(cfg)
    model = ProcessModel.create(spec, prepared.graph, seed=cfg["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_knowledge_graph(prepared.graph, out / "model_graph.tsv")
    manifest = {
        "command": "train",
        "config": cfg,
        "seed": cfg["seed"],
        "config_hash": model.spec.config_hash,
        "model_spec": model.spec.to_dict(),
        "samples": {k: len(v) for k, v in prepared.splits.items()},
        "checkpoint": "checkpoint.json",
    }
    status = EXIT_OK
    try:
        ckpt = train(model, prepared.splits["train"], prepared.splits["val"], tconf)
    except TrainingDiverged as exc:
        logger.error("%s", exc)
        ckpt = exc.checkpoint
        manifest["diverged"] = str(exc)
        manifest["history"] = exc.history
        status = EXIT_NUMERIC
        if ckpt is None:
            _write_json(out / "run_manifest.json", manifest)
            return status
    else:
        manifest["history"] = ckpt.history
    manifest["best_epoch"] = ckpt.epoch
    manifest["best_val_metric"] = ckpt.val_metric
    save_checkpoint(ckpt, out / "checkpoint.json")
    _write_json(out / "run_manifest.json", manifest)
    print(json.dumps({"best_epoch": ckpt.epoch, cfg["selection_metric"]: ckpt.val_metric}))
    return status


def _load_run(args):
    ckpt_path = Path(args.checkpoint)
    ckpt = load_checkpoint(ckpt_path)
    manifest_path = Path(args.manifest) if args.manifest else ckpt_path.with_name("run_manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read run manifest {manifest_path}: {exc}") from None
    spec = ckpt.model_spec()
    if getattr(args, "dim", None) is not None and args.dim != spec.dim:
        raise ConfigMismatch(f"requested dimension {args.dim} != checkpoint dimension {spec.dim}")
    if manifest.get("config_hash") != ckpt.config_hash:
        raise ConfigMismatch(
            f"config hash mismatch: manifest {manifest.get('config_hash')} vs checkpoint {ckpt.config_hash}"
        )
    graph = load_knowledge_graph(ckpt_path.with_name("model_graph.tsv"))
    return ckpt, manifest, model_from_checkpoint(ckpt, graph)


def cmd_evaluate(args) -> int:
    ckpt, manifest, model = _load_run(args)
    cfg = dict(manifest["config"])
    for key in ("graph", "events", "labels"):
        if getattr(args, key, None):
            cfg[key] = getattr(args, key)
    prepared = prepare_data(cfg)
    if tuple(prepared.classes) != tuple(model.spec.classes):
        raise ConfigMismatch("class vocabulary of the data differs from the checkpoint's")
    report = evaluate_model(model, prepared.splits[args.split], args.split, ckpt.epoch)
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        _command_manifest(args, Path(args.out), config_hash=ckpt.config_hash)
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt, manifest, model = _load_run(args)
    log = load_event_log(args.cases, model.graph, "create")
    samples = [Sample(c, tuple(case_sequence(log, c, args.cutoff))) for c in log.cases]
    preds = model.predict(samples)
    task, classes = model.spec.task, model.spec.classes
    lines = []
    for sample, p in zip(samples, preds):
        rec = {"case": sample.case_id}
        if task.kind == "binary":
            rec["probability"] = float(p[0])
            rec["class"] = int(p[0] >= 0.5)
        elif task.kind == "multiclass":
            rec["probabilities"] = [float(x) for x in p]
            rec["class"] = classes[int(np.argmax(p))]
        else:
            rec["value"] = float(p[0])
        lines.append(json.dumps(rec, sort_keys=True))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        _command_manifest(args, Path(args.out), config_hash=ckpt.config_hash)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = full_model_grad_check(
        seed=args.seed, dim=args.dim, layers=args.gc_layers,
        composition=COMPOSITION[args.composition], time_mode=TIME_MODE[args.time_embedding],
    )
    text = json.dumps({"max_rel_error": report.max_rel_error, "checked": report.checked,
                       "excluded_kinks": report.excluded_kinks})
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        _command_manifest(args, Path(args.out))
    return EXIT_OK if report.max_rel_error < args.tolerance else EXIT_NUMERIC


# -- parser -----------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    # defaults are None so that merge_config can tell explicit flags apart
    g = p.add_argument_group("data")
    g.add_argument("--graph", help="triple file (omit for no-KG mode)")
    g.add_argument("--events", help="event log CSV")
    g.add_argument("--labels", help="case,label CSV")
    g.add_argument("--task", choices=("binary", "multiclass", "regression"))
    g.add_argument("--prefix-expand", action="store_const", const=True, default=None,
                   help="next-event prediction over every prefix (implies multiclass)")
    g.add_argument("--cutoff", type=int, help="keep only events with timestamp < cutoff")
    g.add_argument("--isolated-policy", choices=("create", "reject"))
    g.add_argument("--allow-empty", action="store_const", const=True, default=None)
    g.add_argument("--no-type-nodes", dest="type_nodes", action="store_const", const=False, default=None)
    g = p.add_argument_group("model")
    g.add_argument("--dim", type=int)
    g.add_argument("--gc-layers", type=int)
    g.add_argument("--composition", choices=tuple(COMPOSITION))
    g.add_argument("--flow", choices=tuple(FLOW))
    g.add_argument("--neighbor-norm", choices=tuple(NEIGHBOR_NORM))
    g.add_argument("--time-embedding", choices=tuple(TIME_MODE))
    g.add_argument("--time-buckets", type=int)
    g.add_argument("--time-bucket-size", type=int)
    g.add_argument("--time-key", choices=("abs", "pos"))
    g.add_argument("--time-scale", type=float)
    g.add_argument("--bias", action="store_const", const=True, default=None)
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--dropout", type=float)
    g.add_argument("--l2", type=float)
    g.add_argument("--l2-scope", choices=("weights", "all"))
    g.add_argument("--optimizer", choices=("adam", "sgd"))
    g.add_argument("--selection-metric", choices=("val_accuracy", "val_rmse"))
    g.add_argument("--split", choices=("uniform", "stratified", "temporal_latest"))
    g.add_argument("--val-fraction", type=float)
    g.add_argument("--test-fraction", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    p.add_argument("--config", help="YAML/JSON file with defaults for any of the flags above")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgpm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", help="build graph.tsv/events.csv from CSV tables")
    p.add_argument("--schema", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth", help="generate a synthetic multi-hop dataset")
    p.add_argument("--cases", type=int, default=2000)
    p.add_argument("--kg-depth", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoint + run manifest")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "metrics of a checkpoint on one split"),
                                 ("predict", cmd_predict, "one JSON line per case")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", help="run manifest (default: next to the checkpoint)")
        p.add_argument("--dim", type=int, help="expected embedding dimension")
        p.add_argument("--out")
        # prediction is a single vectorized pass; the flag is accepted for symmetry with train
        p.add_argument("--workers", type=int, default=1)
        if name == "evaluate":
            p.add_argument("--split", choices=("train", "val", "test"), default="test")
            p.add_argument("--graph")
            p.add_argument("--events")
            p.add_argument("--labels")
        else:
            p.add_argument("--cases", required=True, help="event log CSV with the cases to score")
            p.add_argument("--cutoff", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="full-model gradient check on a toy instance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--gc-layers", type=int, default=2)
    p.add_argument("--composition", choices=tuple(COMPOSITION), default="mul")
    p.add_argument("--time-embedding", choices=tuple(TIME_MODE), default="sin")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        if isinstance(exc, DataError):
            print(f"kgpm: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"kgpm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"kgpm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"kgpm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
