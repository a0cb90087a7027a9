"""Training loop, evaluation, ablation sweep, and finite-difference checking.

Training is deterministic for a fixed dataset and configuration: scene order
comes from a seeded generator, dropout from the model's own seeded stream, so
two runs produce bit-identical loss traces.  Metrics are line-delimited JSON.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import config_hash, save_checkpoint
from .data import dataset_vocabulary
from .language import Expression, Vocabulary
from .model import VARIANTS, ItemResult, Model, ModelConfig
from .optim import AdamState, adam_step, learning_rate
from .scenegraph import ObjectGraph, build_graph, iou
from .synthworld import LabeledSample, SceneRecord, is_identical_duplicate_sample
from .tensor import NonFiniteError, Tape

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "VocabularyMismatchError",
    "PreparedScene",
    "prepare_scenes",
    "split_validation",
    "train",
    "EvalReport",
    "evaluate",
    "AblationRow",
    "ablation_run",
    "format_ablation_table",
    "ablation_csv",
    "GradCheckReport",
    "grad_check",
    "iou",
]


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite; carries a diagnostic snapshot."""

    def __init__(self, msg: str, diagnostics: Optional[dict] = None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


class VocabularyMismatchError(ValueError):
    """The dataset's wording has no overlap with the model's vocabulary."""


# -- dataset preparation ---------------------------------------------------


@dataclass
class PreparedScene:
    record: SceneRecord
    graph: ObjectGraph
    items: list[tuple[Expression, int, LabeledSample]]  # (expr, label index, raw)


def _expression(tokens: tuple[str, ...], vocab: Vocabulary) -> Expression:
    indices = tuple(vocab.index_of(t) if t in vocab else vocab.unk_index
                    for t in tokens)
    return Expression(indices, " ".join(tokens))


def prepare_scenes(records: list[SceneRecord], vocab: Vocabulary,
                   k: int) -> list[PreparedScene]:
    prepared = []
    for record in records:
        graph = build_graph(record.scene, k=k)
        items = []
        for sample in record.samples:
            expr = _expression(sample.tokens, vocab)
            if all(i == vocab.unk_index for i in expr.indices):
                raise VocabularyMismatchError(
                    f"scene {record.scene_id}: expression "
                    f"{' '.join(sample.tokens)!r} shares no tokens with the "
                    "model vocabulary")
            label = record.scene.region_index(sample.referent_id)
            items.append((expr, label, sample))
        prepared.append(PreparedScene(record, graph, items))
    return prepared


def split_validation(records: list[SceneRecord], fraction: float,
                     seed: int) -> tuple[list[SceneRecord], list[SceneRecord]]:
    """Seed-stable split on a hash of the scene id; ~``fraction`` becomes val."""
    if not 0 <= fraction < 1:
        raise ValueError("validation fraction must be in [0, 1)")
    train_part, val_part = [], []
    for record in records:
        digest = hashlib.sha256(f"{seed}:{record.scene_id}".encode()).digest()
        bucket = int.from_bytes(digest[:8], "little") / 2**64
        (val_part if bucket < fraction else train_part).append(record)
    if not train_part:
        raise ValueError("validation split consumed every scene")
    return train_part, val_part


# -- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_scenes: int = 30
    base_lr: float = 0.001
    lr_decay_every: int = 6000
    seed: int = 0
    validation_fraction: float = 0.1
    eval_every: int = 200
    eval_cap: int = 500            # samples used for periodic accuracy probes
    checkpoint_every: int = 0      # 0: only at the end
    stop_at_full_train_accuracy: bool = False
    patience: int = 0              # 0: no early stopping on stalled accuracy

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.batch_scenes < 1:
            raise ValueError("batch_scenes must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be positive")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in [0, 1)")
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "batch_scenes": self.batch_scenes,
            "base_lr": self.base_lr,
            "lr_decay_every": self.lr_decay_every,
            "seed": self.seed,
            "validation_fraction": self.validation_fraction,
            "eval_every": self.eval_every,
            "eval_cap": self.eval_cap,
            "checkpoint_every": self.checkpoint_every,
            "stop_at_full_train_accuracy": self.stop_at_full_train_accuracy,
            "patience": self.patience,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    model: Model
    adam: AdamState
    metrics: list[dict]
    vocab: Vocabulary
    final_iteration: int
    stopped_early: bool


def _batch_accuracy(model: Model, scenes: list[PreparedScene],
                    cap: Optional[int] = None,
                    chunk: int = 64) -> tuple[int, int]:
    items: list[tuple] = []
    for scene in scenes:
        for expr, label, _ in scene.items:
            items.append((scene.graph, expr, label))
            if cap is not None and len(items) >= cap:
                break
        if cap is not None and len(items) >= cap:
            break
    correct = 0
    for start in range(0, len(items), chunk):
        part = items[start:start + chunk]
        result = model.forward_batch([(g, e, None) for g, e, _ in part],
                                     train=False)
        correct += sum(item.predicted == label
                       for item, (_, _, label) in zip(result.items, part))
    return correct, len(items)


def _param_norms(model: Model) -> dict:
    return {name: float(np.sqrt(np.sum(t.data ** 2)))
            for name, t in model.named_parameters().items()}


def train(records: list[SceneRecord], model_config: ModelConfig,
          train_config: TrainConfig,
          checkpoint_path: Optional[str] = None,
          metrics_path: Optional[str] = None,
          vocab: Optional[Vocabulary] = None) -> TrainResult:
    """Train a model on scene batches; deterministic given configs + data."""
    if not records:
        raise ValueError("training requires at least one scene")
    if vocab is None:
        vocab = dataset_vocabulary(records)
    model = Model(model_config, vocab)
    adam = AdamState()
    params = model.named_parameters()

    train_records, val_records = split_validation(
        records, train_config.validation_fraction, train_config.seed)
    train_scenes = prepare_scenes(train_records, vocab, model_config.k)
    val_scenes = prepare_scenes(val_records, vocab, model_config.k)

    full_hash = config_hash(model_config)
    metrics: list[dict] = []
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None

    def log(entry: dict) -> None:
        metrics.append(entry)
        if sink is not None:
            sink.write(json.dumps(entry, separators=(",", ":")) + "\n")
            sink.flush()

    log({"type": "config", "model": model_config.to_dict(),
         "train": train_config.to_dict(), "config_hash": full_hash,
         "n_train_scenes": len(train_scenes), "n_val_scenes": len(val_scenes)})

    order_rng = np.random.default_rng(train_config.seed)
    epoch_order: list[int] = []
    cursor = 0
    best_probe = -1.0
    stale_probes = 0
    stopped_early = False
    iteration = 0
    t0 = time.perf_counter()

    def periodic_checkpoint(it: int) -> None:
        if checkpoint_path is None:
            return
        p = Path(checkpoint_path)
        save_checkpoint(p.with_name(f"{p.stem}-it{it}{p.suffix}"), model,
                        iteration=it, adam=adam, extra_rng=order_rng)

    try:
        while iteration < train_config.iterations:
            if cursor >= len(epoch_order):
                epoch_order = list(order_rng.permutation(len(train_scenes)))
                cursor = 0
            batch_ids = epoch_order[cursor:cursor + train_config.batch_scenes]
            cursor += len(batch_ids)
            items = []
            for i in batch_ids:
                scene = train_scenes[i]
                items.extend((scene.graph, expr, label)
                             for expr, label, _ in scene.items)

            try:
                with Tape() as tape:
                    result = model.forward_batch(items, train=True)
                tape.backward(result.loss)
            except NonFiniteError as exc:
                diag = {"type": "diverged", "iteration": iteration,
                        "error": str(exc),
                        "lr": learning_rate(train_config.base_lr, iteration,
                                            train_config.lr_decay_every),
                        "param_norms": _param_norms(model)}
                log(diag)
                raise TrainingDivergedError(
                    f"non-finite loss at iteration {iteration}: {exc}",
                    diagnostics=diag)

            loss_value = float(result.loss.data[0, 0])
            lr = learning_rate(train_config.base_lr, iteration,
                               train_config.lr_decay_every)
            adam_step(params, adam, lr)
            for t in params.values():
                t.grad = None

            log({"type": "loss", "iteration": iteration, "loss": loss_value,
                 "lr": lr, "batch_items": len(items),
                 "wall_time": time.perf_counter() - t0,
                 "config_hash": full_hash})
            iteration += 1

            probe_due = (iteration % train_config.eval_every == 0
                         or iteration == train_config.iterations)
            if probe_due:
                c, n = _batch_accuracy(model, train_scenes,
                                       cap=train_config.eval_cap)
                train_acc = c / n if n else 0.0
                entry = {"type": "accuracy", "iteration": iteration,
                         "train_accuracy": train_acc, "train_samples": n,
                         "wall_time": time.perf_counter() - t0}
                probe = train_acc
                if val_scenes:
                    cv, nv = _batch_accuracy(model, val_scenes,
                                             cap=train_config.eval_cap)
                    entry["val_accuracy"] = cv / nv if nv else 0.0
                    entry["val_samples"] = nv
                    probe = entry["val_accuracy"]
                log(entry)
                if (train_config.stop_at_full_train_accuracy
                        and n > 0 and c == n):
                    stopped_early = True
                    break
                if train_config.patience > 0:
                    if probe > best_probe + 1e-12:
                        best_probe = probe
                        stale_probes = 0
                    else:
                        stale_probes += 1
                        if stale_probes >= train_config.patience:
                            stopped_early = True
                            break

            if (train_config.checkpoint_every > 0
                    and iteration % train_config.checkpoint_every == 0
                    and iteration < train_config.iterations):
                periodic_checkpoint(iteration)

        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, iteration=iteration,
                            adam=adam, extra_rng=order_rng)
    finally:
        if sink is not None:
            sink.close()

    return TrainResult(model=model, adam=adam, metrics=metrics, vocab=vocab,
                       final_iteration=iteration, stopped_early=stopped_early)


# -- evaluation ----------------------------------------------------------------


@dataclass
class EvalReport:
    total: int
    correct: int
    relational_total: int
    relational_correct: int
    identical_dup_total: int
    identical_dup_correct: int
    unk_tokens: int
    per_sample: list[dict] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    @property
    def relational_accuracy(self) -> Optional[float]:
        if self.relational_total == 0:
            return None
        return self.relational_correct / self.relational_total

    @property
    def identical_dup_accuracy(self) -> Optional[float]:
        if self.identical_dup_total == 0:
            return None
        return self.identical_dup_correct / self.identical_dup_total

    def to_dict(self) -> dict:
        return {
            "total": self.total, "correct": self.correct,
            "accuracy": self.accuracy,
            "relational_total": self.relational_total,
            "relational_correct": self.relational_correct,
            "relational_accuracy": self.relational_accuracy,
            "identical_dup_total": self.identical_dup_total,
            "identical_dup_correct": self.identical_dup_correct,
            "identical_dup_accuracy": self.identical_dup_accuracy,
            "unk_tokens": self.unk_tokens,
        }


def evaluate(records: list[SceneRecord], model: Optional[Model] = None,
             predict: Optional[Callable[[SceneRecord, LabeledSample], int]]
             = None,
             keep_per_sample: bool = True) -> EvalReport:
    """Score predictions by overlap: correct iff IoU(predicted, referent) > 0.5.

    ``predict`` (record, sample) -> region index overrides the model — used
    for oracle and baseline probes.  Exactly one of ``model``/``predict``
    must be provided.
    """
    if (model is None) == (predict is None):
        raise ValueError("provide exactly one of model or predict")

    report = EvalReport(0, 0, 0, 0, 0, 0, 0)
    prepared: list[PreparedScene]
    if model is not None:
        prepared = prepare_scenes(records, model.vocab, model.config.k)
        report.unk_tokens = sum(
            1 for s in prepared for expr, _, _ in s.items
            for i in expr.indices if i == model.vocab.unk_index)
    else:
        prepared = [PreparedScene(r, None, [(None, r.scene.region_index(
            s.referent_id), s) for s in r.samples]) for r in records]

    for scene in prepared:
        predictions: list[int]
        if model is not None:
            result = model.forward_batch(
                [(scene.graph, expr, None) for expr, _, _ in scene.items],
                train=False)
            predictions = [item.predicted for item in result.items]
        else:
            predictions = [predict(scene.record, sample)
                           for _, _, sample in scene.items]
        regions = scene.record.scene.regions
        for (expr, label, sample), pred in zip(scene.items, predictions):
            if not 0 <= pred < len(regions):
                raise ValueError(
                    f"prediction {pred} out of range for scene "
                    f"{scene.record.scene_id} with {len(regions)} regions")
            hit = iou(regions[pred].box, regions[label].box) > 0.5
            report.total += 1
            report.correct += hit
            if sample.tag == "relational":
                report.relational_total += 1
                report.relational_correct += hit
            if sample.ast is not None and is_identical_duplicate_sample(
                    scene.record.scene, sample.ast):
                report.identical_dup_total += 1
                report.identical_dup_correct += hit
            if keep_per_sample:
                report.per_sample.append({
                    "scene_id": scene.record.scene_id,
                    "referent_id": sample.referent_id,
                    "predicted_id": regions[pred].region_id,
                    "correct": bool(hit), "tag": sample.tag,
                })
    return report


# -- ablation --------------------------------------------------------------------


@dataclass
class AblationRow:
    variant: str
    overall: float
    relational: Optional[float]
    identical_dup: Optional[float]
    train_seconds: float
    iterations: int

    def to_dict(self) -> dict:
        return {"variant": self.variant, "overall": self.overall,
                "relational": self.relational,
                "identical_dup": self.identical_dup,
                "train_seconds": self.train_seconds,
                "iterations": self.iterations}


def ablation_run(train_records: list[SceneRecord],
                 test_records: list[SceneRecord],
                 model_config: ModelConfig, train_config: TrainConfig,
                 variants: tuple[str, ...] = VARIANTS,
                 checkpoint_dir: Optional[str] = None,
                 metrics_dir: Optional[str] = None,
                 progress: Optional[Callable[[str, AblationRow], None]] = None,
                 ) -> list[AblationRow]:
    """Train each variant with identical data and settings; score on test."""
    vocab = dataset_vocabulary(train_records)
    rows = []
    for variant in variants:
        config = replace(model_config, variant=variant)
        ckpt = (str(Path(checkpoint_dir) / f"{variant}.ckpt")
                if checkpoint_dir else None)
        mpath = (str(Path(metrics_dir) / f"{variant}-metrics.jsonl")
                 if metrics_dir else None)
        t0 = time.perf_counter()
        result = train(train_records, config, train_config,
                       checkpoint_path=ckpt, metrics_path=mpath, vocab=vocab)
        seconds = time.perf_counter() - t0
        report = evaluate(test_records, model=result.model,
                          keep_per_sample=False)
        row = AblationRow(variant=variant, overall=report.accuracy,
                          relational=report.relational_accuracy,
                          identical_dup=report.identical_dup_accuracy,
                          train_seconds=seconds,
                          iterations=result.final_iteration)
        rows.append(row)
        if progress is not None:
            progress(variant, row)
    return rows


def _fmt_acc(value: Optional[float]) -> str:
    return "--" if value is None else f"{100 * value:6.2f}"


def format_ablation_table(rows: list[AblationRow]) -> str:
    header = (f"{'variant':<10} {'overall%':>8} {'relational%':>12} "
              f"{'identical-dup%':>15} {'train_s':>8} {'iters':>6}")
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.variant:<10} {_fmt_acc(r.overall):>8} "
                     f"{_fmt_acc(r.relational):>12} "
                     f"{_fmt_acc(r.identical_dup):>15} "
                     f"{r.train_seconds:8.1f} {r.iterations:6d}")
    return "\n".join(lines)


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "overall_accuracy", "relational_accuracy",
                     "identical_dup_accuracy", "train_seconds", "iterations"])
    for r in rows:
        writer.writerow([
            r.variant, f"{r.overall:.6f}",
            "" if r.relational is None else f"{r.relational:.6f}",
            "" if r.identical_dup is None else f"{r.identical_dup:.6f}",
            f"{r.train_seconds:.3f}", r.iterations])
    return buf.getvalue()


# -- finite-difference gradient checking --------------------------------------


@dataclass
class GradCheckReport:
    groups: dict
    h: float

    @property
    def max_rel_err(self) -> float:
        if not self.groups:
            return 0.0
        return max(g["max_rel_err"] for g in self.groups.values())

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_err < tolerance

    def format(self) -> str:
        width = max(len(n) for n in self.groups) if self.groups else 10
        lines = [f"{'parameter group':<{width}} {'max rel err':>12} "
                 f"{'checked':>8}"]
        for name in sorted(self.groups):
            g = self.groups[name]
            lines.append(f"{name:<{width}} {g['max_rel_err']:>12.3e} "
                         f"{g['elements']:>8d}")
        lines.append(f"{'OVERALL':<{width}} {self.max_rel_err:>12.3e}")
        return "\n".join(lines)


def grad_check(model: Model, items: list, h: float = 1e-5,
               train: bool = True,
               max_elements_per_group: Optional[int] = None,
               seed: int = 0) -> GradCheckReport:
    """Compare taped gradients against central finite differences.

    Runs the same forward used in training; models configured with dropout
    are rejected because a stochastic loss cannot be differenced — rebuild
    the model with dropout set to 0 to run the check.
    """
    if train and model.config.dropout > 0:
        raise ValueError(
            "dropout is active: finite differences need a deterministic "
            "loss; rebuild the model with dropout=0 (stochastic-free) "
            "to run the gradient check")
    params = model.named_parameters()

    def loss_value() -> float:
        data = model.forward_batch(items, train=train).loss.data
        return float(np.asarray(data).reshape(-1)[0])

    for t in params.values():
        t.grad = None
    with Tape() as tape:
        result = model.forward_batch(items, train=train)
    tape.backward(result.loss)
    analytic = {name: (np.zeros_like(t.data) if t.grad is None
                       else t.grad.copy())
                for name, t in params.items()}
    for t in params.values():
        t.grad = None

    rng = np.random.default_rng(seed)
    groups = {}
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        n = flat.shape[0]
        if max_elements_per_group is not None and n > max_elements_per_group:
            idx = rng.choice(n, size=max_elements_per_group, replace=False)
        else:
            idx = np.arange(n)
        worst = 0.0
        for i in idx:
            original = flat[i]
            flat[i] = original + h
            up = loss_value()
            flat[i] = original - h
            down = loss_value()
            flat[i] = original
            numeric = (up - down) / (2 * h)
            a = analytic[name].reshape(-1)[i]
            rel = abs(numeric - a) / max(1.0, abs(numeric), abs(a))
            worst = max(worst, rel)
        groups[name] = {"max_rel_err": float(worst), "elements": int(len(idx))}
    return GradCheckReport(groups=groups, h=h)
