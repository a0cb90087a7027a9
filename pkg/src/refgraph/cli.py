"""Command-line surface: dataset generation, training, evaluation, ablation,
attention explanation, and gradient checking.

Configuration precedence is flags > ``--config`` JSON file > built-in
defaults; the effective configuration is written into every artifact (dataset
config sidecar, checkpoint header, metrics stream, attention dump, ablation
directory).  Relative paths that do not start with ``./`` or ``../`` are
resolved under ``$REFGRAPH_DATA_DIR`` when that variable is set.

Exit codes:
  0  success
  1  unexpected error
  2  usage error (unknown flags/subcommand)
  3  dataset or config content error (schema violations, bad addresses)
  4  compatibility error (format versions, checkpoint integrity, vocabulary)
  5  numeric failure (training divergence, non-finite values, failed
     gradient check)
  6  scene-generation budget exhausted

Every error path prints a single line ``error: <Class>: <reason>`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import (CheckpointFormatError, config_hash, load_checkpoint)
from .data import (DataFormatError, DatasetVersionError, dataset_vocabulary,
                   load_dataset, save_dataset, save_features)
from .graph_attention import NORMALIZATION_MODES
from .harness import (TrainConfig, TrainingDivergedError,
                      VocabularyMismatchError, ablation_csv, ablation_run,
                      evaluate, format_ablation_table, grad_check,
                      prepare_scenes, train)
from .language import COMPONENTS
from .model import Model, ModelConfig, VARIANTS
from .render import (ablation_bars_figure, loss_curve_figure,
                     render_scene_svg, token_attention_figure)
from .scenegraph import iou
from .synthworld import (ExpressionPolicy, GenerationError, SceneSpec,
                         generate_dataset)
from .tensor import NonFiniteError

__all__ = ["main", "attention_dump", "EXIT_CODES"]

EXIT_CODES = {
    "ok": 0,
    "unexpected": 1,
    "usage": 2,
    "data": 3,
    "compat": 4,
    "numeric": 5,
    "generation": 6,
}

DATA_DIR_ENV = "REFGRAPH_DATA_DIR"


# -- path and config plumbing -------------------------------------------------


def _resolve(value: Optional[str]) -> Optional[Path]:
    """Resolve a CLI path, rebasing bare relative paths onto the data dir."""
    if value is None:
        return None
    path = Path(value)
    base = os.environ.get(DATA_DIR_ENV)
    if base and not path.is_absolute() and \
            not value.startswith(("./", "../")):
        return Path(base) / path
    return path


def _prepare_out(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_config_file(path: Optional[Path]) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"config file {path}: invalid JSON: {exc}")
    if not isinstance(raw, dict):
        raise DataFormatError(f"config file {path}: expected a JSON object")
    known = {"scene", "expressions", "model", "train"}
    unknown = set(raw) - known
    if unknown:
        raise DataFormatError(
            f"config file {path}: unknown section(s) "
            f"{sorted(unknown)}; expected {sorted(known)}")
    return raw


def _effective(cls, section: dict, overrides: dict, label: str):
    """defaults <- config-file section <- non-None flag overrides."""
    merged = cls().to_dict()
    for key, value in section.items():
        if key not in merged:
            raise DataFormatError(
                f"unknown key {key!r} in {label!r} config section")
        merged[key] = value
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return cls.from_dict(merged)


def _model_overrides(args) -> dict:
    return {
        "dim": args.dim,
        "appearance_dim": args.appearance_dim,
        "k": args.k,
        "normalization": args.normalization,
        "dropout": args.dropout,
        "variant": args.variant,
        "init_seed": args.init_seed,
    }


def _train_overrides(args) -> dict:
    return {
        "iterations": args.iterations,
        "batch_scenes": args.batch_scenes,
        "base_lr": args.base_lr,
        "lr_decay_every": args.lr_decay_every,
        "seed": args.seed,
        "validation_fraction": args.validation_fraction,
        "eval_every": args.eval_every,
        "eval_cap": args.eval_cap,
        "checkpoint_every": args.checkpoint_every,
        "stop_at_full_train_accuracy": args.stop_at_full_train_accuracy,
        "patience": args.patience,
    }


def _emit(obj: dict) -> None:
    print(json.dumps(obj))


# -- attention dump -----------------------------------------------------------


def _listify(array: Optional[np.ndarray]):
    if array is None:
        return None
    return [float(v) for v in np.asarray(array).reshape(-1)]


def _edge_list(edges, attention: Optional[np.ndarray]):
    if attention is None:
        return [{"i": i, "j": j, "value": None} for i, j in edges]
    values = np.asarray(attention).reshape(-1)
    return [{"i": i, "j": j, "value": float(v)}
            for (i, j), v in zip(edges, values)]


def attention_dump(model: Model, record, sample_index: int) -> dict:
    """Full inference trace for one sample as an exact-round-trip JSON dict."""
    prepared = prepare_scenes([record], model.vocab, model.config.k)[0]
    if not 0 <= sample_index < len(prepared.items):
        raise DataFormatError(
            f"scene {record.scene_id} has {len(prepared.items)} sample(s); "
            f"index {sample_index} is out of range")
    expr, label, sample = prepared.items[sample_index]
    graph = prepared.graph
    item = model.predict(graph, expr, details=True)
    scene = record.scene

    token_attention = None
    if item.token_attention is not None:
        token_attention = {name: _listify(item.token_attention[name])
                           for name in COMPONENTS}
    component_weights = None
    if item.component_weights is not None:
        values = _listify(item.component_weights)
        component_weights = dict(zip(COMPONENTS, values))
    scores = None
    if item.component_scores is not None:
        scores = {name: _listify(item.component_scores[name])
                  for name in COMPONENTS}

    return {
        "format_version": 1,
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "scene_id": record.scene_id,
        "sample_index": sample_index,
        "tokens": list(sample.tokens),
        "token_attention": token_attention,
        "component_weights": component_weights,
        "node_attention": _listify(item.node_attention),
        "intra_edges": _edge_list(graph.intra_edges, item.intra_attention),
        "inter_edges": _edge_list(graph.inter_edges, item.inter_attention),
        "scores": scores,
        "combined_scores": _listify(item.combined_scores),
        "probabilities": _listify(item.probabilities.data),
        "prediction": {"index": item.predicted,
                       "region_id": scene.regions[item.predicted].region_id},
        "referent": {"index": label,
                     "region_id": scene.regions[label].region_id},
        "graph": {
            "k": graph.k,
            "nodes": [{
                "id": r.region_id,
                "category": r.category,
                "attrs": dict(r.attributes),
                "box": r.box.as_list(),
                "spatial": _listify(graph.node_spatial[i]),
            } for i, r in enumerate(scene.regions)],
            "intra_neighbors": [list(ns) for ns in graph.intra_neighbors],
            "inter_neighbors": [list(ns) for ns in graph.inter_neighbors],
            "intra_edge_features": [_listify(row)
                                    for row in graph.intra_edge_features],
            "inter_edge_features": [_listify(row)
                                    for row in graph.inter_edge_features],
        },
    }


# -- subcommands --------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    sections = _load_config_file(_resolve(args.config))
    regions_range = None
    if args.regions_min is not None or args.regions_max is not None:
        spec_defaults = SceneSpec()
        lo = (args.regions_min if args.regions_min is not None
              else spec_defaults.regions_range[0])
        hi = (args.regions_max if args.regions_max is not None
              else spec_defaults.regions_range[1])
        regions_range = (lo, hi)
    spec = _effective(SceneSpec, sections.get("scene", {}), {
        "width": args.width,
        "height": args.height,
        "regions_range": regions_range,
        "appearance_dim": args.appearance_dim,
        "noise": args.noise,
        "max_iou": args.max_iou,
        "seed": args.seed,
    }, "scene")
    policy = _effective(ExpressionPolicy, sections.get("expressions", {}), {
        "relational_fraction": args.relational_fraction,
        "expressions_per_scene": args.expressions_per_scene,
    }, "expressions")

    records = generate_dataset(spec, policy, args.scenes)
    out = _prepare_out(_resolve(args.out))
    inline = args.features == "inline"
    save_dataset(records, out, inline_features=inline)
    features_path = None
    if not inline:
        features_path = out.with_suffix(out.suffix + ".features.json")
        save_features(records, features_path)

    config_path = out.with_suffix(out.suffix + ".config.json")
    config_path.write_text(json.dumps({
        "format_version": 1,
        "scenes": args.scenes,
        "scene": spec.to_dict(),
        "expressions": policy.to_dict(),
    }, indent=2) + "\n", encoding="utf-8")

    samples = sum(len(r.samples) for r in records)
    relational = sum(1 for r in records for s in r.samples
                     if s.tag == "relational")
    _emit({
        "out": str(out),
        "features": str(features_path) if features_path else "inline",
        "config": str(config_path),
        "scenes": len(records),
        "samples": samples,
        "relational_fraction": relational / samples if samples else 0.0,
        "vocabulary": len(dataset_vocabulary(records)),
    })
    return EXIT_CODES["ok"]


def _cmd_train(args) -> int:
    sections = _load_config_file(_resolve(args.config))
    model_config = _effective(ModelConfig, sections.get("model", {}),
                              _model_overrides(args), "model")
    train_config = _effective(TrainConfig, sections.get("train", {}),
                              _train_overrides(args), "train")

    records = load_dataset(_resolve(args.data),
                           features_path=_resolve(args.features))
    checkpoint_path = _prepare_out(_resolve(args.out))
    report_dir = _resolve(args.report)
    metrics_path = _resolve(args.metrics)
    if metrics_path is None and report_dir is not None:
        metrics_path = report_dir / "metrics.jsonl"
    if metrics_path is not None:
        _prepare_out(metrics_path)

    started = time.monotonic()
    result = train(records, model_config, train_config,
                   checkpoint_path=str(checkpoint_path),
                   metrics_path=str(metrics_path) if metrics_path else None)
    elapsed = time.monotonic() - started

    probes = [m for m in result.metrics if m.get("type") == "accuracy"]
    losses = [m for m in result.metrics if m.get("type") == "loss"]
    summary = {
        "checkpoint": str(checkpoint_path),
        "metrics": str(metrics_path) if metrics_path else None,
        "iterations": result.final_iteration,
        "stopped_early": result.stopped_early,
        "final_loss": losses[-1]["loss"] if losses else None,
        "train_accuracy": probes[-1]["train_accuracy"] if probes else None,
        "val_accuracy": probes[-1].get("val_accuracy") if probes else None,
        "config_hash": config_hash(model_config),
        "wall_seconds": round(elapsed, 3),
    }
    if report_dir is not None:
        report_dir.mkdir(parents=True, exist_ok=True)
        loss_curve_figure(result.metrics, report_dir / "loss.png")
        (report_dir / "train.json").write_text(
            json.dumps({**summary, "model": model_config.to_dict(),
                        "train": train_config.to_dict()}, indent=2) + "\n",
            encoding="utf-8")
        summary["report"] = str(report_dir)
    _emit(summary)
    return EXIT_CODES["ok"]


def _cmd_eval(args) -> int:
    records = load_dataset(_resolve(args.data),
                           features_path=_resolve(args.features))
    loaded = load_checkpoint(_resolve(args.checkpoint))
    report = evaluate(records, model=loaded.model)

    summary = report.to_dict()
    summary["checkpoint_iteration"] = loaded.iteration
    summary["config_hash"] = config_hash(loaded.model.config)
    report_dir = _resolve(args.report)
    if report_dir is not None:
        report_dir.mkdir(parents=True, exist_ok=True)
        payload = report.to_dict()
        payload["per_sample"] = report.per_sample
        payload["config"] = loaded.model.config.to_dict()
        payload["config_hash"] = summary["config_hash"]
        payload["checkpoint_iteration"] = loaded.iteration
        (report_dir / "eval.json").write_text(
            json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        summary["report"] = str(report_dir / "eval.json")
    _emit(summary)
    return EXIT_CODES["ok"]


def _cmd_ablate(args) -> int:
    sections = _load_config_file(_resolve(args.config))
    model_config = _effective(ModelConfig, sections.get("model", {}),
                              _model_overrides(args), "model")
    train_config = _effective(TrainConfig, sections.get("train", {}),
                              _train_overrides(args), "train")
    variants = tuple(args.variants.split(",")) if args.variants else VARIANTS
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise DataFormatError(
            f"unknown variant(s) {unknown}; choose from {list(VARIANTS)}")

    train_records = load_dataset(_resolve(args.train_data))
    test_records = load_dataset(_resolve(args.test_data))
    out_dir = _resolve(args.out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics").mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps({"model": model_config.to_dict(),
                    "train": train_config.to_dict(),
                    "variants": list(variants)}, indent=2) + "\n",
        encoding="utf-8")

    def progress(variant, row):
        print(f"done {variant}: overall {row.overall:.3f} "
              f"({row.train_seconds:.1f}s)", file=sys.stderr)

    rows = ablation_run(train_records, test_records, model_config,
                        train_config, variants=variants,
                        checkpoint_dir=str(out_dir / "checkpoints"),
                        metrics_dir=str(out_dir / "metrics"),
                        progress=progress)
    table = format_ablation_table(rows)
    (out_dir / "ablation.csv").write_text(ablation_csv(rows),
                                          encoding="utf-8")
    (out_dir / "table.txt").write_text(table + "\n", encoding="utf-8")
    ablation_bars_figure(rows, out_dir / "ablation.png")
    print(table)
    return EXIT_CODES["ok"]


def _cmd_explain(args) -> int:
    records = load_dataset(_resolve(args.data),
                           features_path=_resolve(args.features))
    loaded = load_checkpoint(_resolve(args.checkpoint))
    scene_id = args.scene if args.scene is not None else records[0].scene_id
    record = next((r for r in records if r.scene_id == scene_id), None)
    if record is None:
        raise DataFormatError(f"scene {scene_id} not present in dataset")

    dump = attention_dump(loaded.model, record, args.sample)
    out_dir = _resolve(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"explain-{scene_id}-{args.sample}"
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps(dump, indent=2) + "\n", encoding="utf-8")

    prepared = prepare_scenes([record], loaded.model.vocab,
                              loaded.model.config.k)[0]
    expr, label, _ = prepared.items[args.sample]
    item = loaded.model.predict(prepared.graph, expr, details=True)
    svg_path = out_dir / f"{stem}.svg"
    svg_path.write_text(
        render_scene_svg(record.scene, prepared.graph, item,
                         predicted=item.predicted, referent=label),
        encoding="utf-8")
    figure_path = None
    if dump["token_attention"] is not None:
        figure_path = out_dir / f"{stem}-tokens.png"
        token_attention_figure(dump["tokens"], dump["token_attention"],
                               figure_path)

    predicted_box = record.scene.regions[item.predicted].box
    referent_box = record.scene.regions[label].box
    _emit({
        "scene": scene_id,
        "sample": args.sample,
        "tokens": dump["tokens"],
        "predicted_region": dump["prediction"]["region_id"],
        "referent_region": dump["referent"]["region_id"],
        "correct": iou(predicted_box, referent_box) > 0.5,
        "json": str(json_path),
        "svg": str(svg_path),
        "token_figure": str(figure_path) if figure_path else None,
    })
    return EXIT_CODES["ok"]


def _cmd_gradcheck(args) -> int:
    spec = SceneSpec(regions_range=(args.regions, args.regions),
                     duplicate_group_sizes=(2,),
                     appearance_dim=args.appearance_dim, seed=args.seed)
    policy = ExpressionPolicy(expressions_per_scene=1)
    records = generate_dataset(spec, policy, 1)
    vocab = dataset_vocabulary(records)
    config = ModelConfig(dim=args.dim, appearance_dim=args.appearance_dim,
                         k=args.k, normalization=args.normalization,
                         dropout=0.0, variant=args.variant,
                         init_seed=args.seed)
    model = Model(config, vocab)
    prepared = prepare_scenes(records, vocab, config.k)[0]
    items = [(prepared.graph, expr, label)
             for expr, label, _ in prepared.items]
    report = grad_check(model, items, h=args.h, train=not args.eval_mode,
                        max_elements_per_group=args.max_elements,
                        seed=args.seed)
    print(report.format())
    ok = report.passed(args.tolerance)
    print(f"max relative error {report.max_rel_err:.3e} "
          f"(tolerance {args.tolerance:.0e}): {'PASS' if ok else 'FAIL'}")
    return EXIT_CODES["ok"] if ok else EXIT_CODES["numeric"]


# -- parser -------------------------------------------------------------------


def _add_model_flags(sp) -> None:
    g = sp.add_argument_group("model configuration")
    g.add_argument("--dim", type=int, help="hidden width")
    g.add_argument("--appearance-dim", type=int,
                   help="appearance feature width expected from the data")
    g.add_argument("--k", type=int, help="neighbors per relation type")
    g.add_argument("--normalization", choices=NORMALIZATION_MODES)
    g.add_argument("--dropout", type=float)
    g.add_argument("--variant", choices=VARIANTS)
    g.add_argument("--init-seed", type=int, help="parameter init seed")


def _add_train_flags(sp) -> None:
    g = sp.add_argument_group("training configuration")
    g.add_argument("--iterations", type=int)
    g.add_argument("--batch-scenes", type=int)
    g.add_argument("--base-lr", type=float)
    g.add_argument("--lr-decay-every", type=int)
    g.add_argument("--seed", type=int, help="batch order / dropout seed")
    g.add_argument("--validation-fraction", type=float)
    g.add_argument("--eval-every", type=int)
    g.add_argument("--eval-cap", type=int)
    g.add_argument("--checkpoint-every", type=int)
    g.add_argument("--stop-at-full-train-accuracy",
                   action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--patience", type=int,
                   help="probes without val improvement before stopping")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refgraph",
        description="Language-guided graph attention for referring "
                    "expressions on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", default="dataset.jsonl")
    p.add_argument("--scenes", type=int, default=5000)
    p.add_argument("--seed", type=int, help="generation seed")
    p.add_argument("--width", type=float)
    p.add_argument("--height", type=float)
    p.add_argument("--regions-min", type=int)
    p.add_argument("--regions-max", type=int)
    p.add_argument("--appearance-dim", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--max-iou", type=float)
    p.add_argument("--relational-fraction", type=float)
    p.add_argument("--expressions-per-scene", type=int)
    p.add_argument("--features", choices=("inline", "sidecar"),
                   default="inline")
    p.add_argument("--config", help="JSON file with scene/expressions "
                                    "sections")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model, write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--features", help="sidecar feature file")
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--metrics", help="JSONL metrics path")
    p.add_argument("--report", help="directory for loss curve + summary")
    p.add_argument("--config", help="JSON file with model/train sections")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", help="directory for the full report")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and score every variant")
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--variants", help="comma-separated subset of "
                                      + ",".join(VARIANTS))
    p.add_argument("--config")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("explain",
                       help="attention dump + SVG overlay for one sample")
    p.add_argument("--data", required=True)
    p.add_argument("--features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", type=int, help="scene id (default: first)")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("gradcheck",
                       help="finite-difference audit of the gradients")
    p.add_argument("--regions", type=int, default=4)
    p.add_argument("--dim", type=int, default=12)
    p.add_argument("--appearance-dim", type=int, default=16)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--variant", choices=VARIANTS, default="LGRANs")
    p.add_argument("--normalization", choices=NORMALIZATION_MODES,
                   default="layer")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-elements", type=int, default=4,
                   help="sampled elements per parameter group")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-mode", action="store_true",
                   help="check the dropout-free evaluation pass instead")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DatasetVersionError, CheckpointFormatError,
            VocabularyMismatchError) as exc:
        return _fail(exc, EXIT_CODES["compat"])
    except DataFormatError as exc:
        return _fail(exc, EXIT_CODES["data"])
    except (TrainingDivergedError, NonFiniteError) as exc:
        return _fail(exc, EXIT_CODES["numeric"])
    except GenerationError as exc:
        return _fail(exc, EXIT_CODES["generation"])
    except Exception as exc:  # CLI boundary: everything exits cleanly
        return _fail(exc, EXIT_CODES["unexpected"])


def _fail(exc: Exception, code: int) -> int:
    message = str(exc).replace("\n", " ")
    print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
