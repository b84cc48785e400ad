"""Training loops, the validation/checkpoint schedule, and the result grid.

All five regimes share the same skeleton: seeded setup, one training step
per batch, validation every val_interval_steps global steps plus once at the
final step, and retention of the parameters with the best selection-metric
accuracy (earliest step wins ties). Because parameter updates are
functional, "retaining a checkpoint" is keeping a reference; nothing is
copied or mutated afterwards.

Selection metric: target validation accuracy, except bsm which has no
target-side objective and selects on source validation accuracy.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adversarial import (
    AdversarialGrads,
    AdversarialNet,
    LossWeights,
    build_adversarial,
    build_probe,
    build_vanilla,
    dirac_losses,
    faraday_losses,
    forward_pair,
    predict_classes,
    route_gradients,
)
from .dataset import DomainDataset, batches, concat_datasets, subsample
from .errors import ConfigError, DataError
from .nn import (
    NetworkParams,
    adam_apply,
    backward,
    cross_entropy,
    forward,
    init_adam,
    onehot,
    set_mode,
)
from .numcore import Rng

MODEL_KINDS = ("bsm", "bmm", "bfm", "faraday", "dirac")
VANILLA_KINDS = ("bsm", "bmm", "bfm")


@dataclass(frozen=True)
class TrainConfig:
    model: str
    epochs: int = 20
    batch_size: int = 128
    val_interval_steps: int = 40
    lr: float | None = None  # default 1e-3 vanilla, 2e-4 adversarial
    beta1: float | None = None  # default 0.9 vanilla, 0.5 adversarial
    weights: LossWeights = field(default_factory=LossWeights)
    disc_steps: int = 1  # dirac: discriminator-only passes per step
    seed: int = 0
    n_source: int | None = None  # train-split subsample sizes (None = all)
    n_target: int | None = None

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.epochs < 1 or self.val_interval_steps < 1 or self.disc_steps < 1:
            raise ConfigError("epochs, val_interval_steps, and disc_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def is_vanilla(self) -> bool:
        return self.model in VANILLA_KINDS

    @property
    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-3 if self.is_vanilla else 2e-4

    @property
    def resolved_beta1(self) -> float:
        if self.beta1 is not None:
            return self.beta1
        return 0.9 if self.is_vanilla else 0.5


def _derive_seeds(cfg: TrainConfig) -> dict[str, int]:
    r = Rng(cfg.seed)
    names = ("init", "sub_source", "sub_target", "shuffle_source",
             "shuffle_target", "dropout")
    return {name: r.next_u64() for name in names}


@dataclass
class ValidationPoint:
    step: int
    phase: int
    source_val_acc: float | None
    target_val_acc: float | None
    losses: dict[str, float]


@dataclass
class TrainHistory:
    points: list[ValidationPoint]
    best_step: int
    best_val_acc: float
    selection: str  # source_val | target_val

    @property
    def best_target_val_acc(self) -> float:
        accs = [p.target_val_acc for p in self.points if p.target_val_acc is not None]
        if not accs:
            raise DataError("history has no target validation points")
        return max(accs)


def _accuracy_from_probs(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(probs.argmax(axis=1) == labels))


def _val_steps(total_steps: int, interval: int) -> list[int]:
    steps = list(range(interval, total_steps + 1, interval))
    if not steps or steps[-1] != total_steps:
        steps.append(total_steps)
    return steps


class _BestTracker:
    """argmax with earliest-tie retention over the selection metric."""

    def __init__(self):
        self.best_acc = -1.0
        self.best_step = 0
        self.best_model = None

    def offer(self, step: int, acc: float, model):
        if acc > self.best_acc:
            self.best_acc = acc
            self.best_step = step
            self.best_model = model


def _maybe_subsample(ds: DomainDataset, n: int | None, seed: int) -> DomainDataset:
    return ds if n is None else subsample(ds, n, seed)


# ---------------------------------------------------------------------------
# Vanilla regimes.
# ---------------------------------------------------------------------------


def _vanilla_val(net: NetworkParams, ds: DomainDataset | None) -> float | None:
    if ds is None or ds.n("val") == 0:
        return None
    x, y = ds.arrays("val")
    probs, _ = forward(set_mode(net, "infer"), x)
    return _accuracy_from_probs(probs, y)


def _run_vanilla_phase(net, train_ds, cfg, *, phase, lr, shuffle_seed, dropout_rng,
                       source_val, target_val, selection, frozen_layers=(),
                       val_fn=None, points=None, tracker=None):
    n_train = train_ds.n("train")
    if n_train == 0:
        raise DataError(f"{cfg.model}: empty training split")
    total_steps = cfg.epochs * math.ceil(n_train / cfg.batch_size)
    val_at = set(_val_steps(total_steps, cfg.val_interval_steps))
    state = init_adam(net, lr, cfg.resolved_beta1)
    stream = batches(train_ds, "train", cfg.batch_size, shuffle_seed, epochs=cfg.epochs)
    points = points if points is not None else []
    tracker = tracker if tracker is not None else _BestTracker()
    last_loss = math.nan
    for step, (x, y) in enumerate(stream, start=1):
        probs, cache = forward(net, x, dropout_rng)
        loss, dlogits = cross_entropy(probs, onehot(y))
        grads, _ = backward(net, cache, dlogits)
        for i in frozen_layers:
            grads.weights[i][:] = 0.0
            grads.biases[i][:] = 0.0
        net, state = adam_apply(net, grads, state)
        last_loss = loss
        if step in val_at:
            if val_fn is not None:
                s_acc, t_acc = val_fn(net, step, phase)
            else:
                s_acc = _vanilla_val(net, source_val)
                t_acc = _vanilla_val(net, target_val)
            points.append(ValidationPoint(step, phase, s_acc, t_acc,
                                          {"classification": last_loss}))
            metric = s_acc if selection == "source_val" else t_acc
            if metric is None:
                raise DataError(f"{cfg.model}: selection metric {selection} unavailable")
            tracker.offer(step, metric, net)
    return net, points, tracker


def train_vanilla(cfg: TrainConfig, source: DomainDataset,
                  target: DomainDataset | None = None,
                  val_fn=None) -> tuple[NetworkParams, TrainHistory]:
    """bsm: source only. bmm: concatenated domains. bfm: bsm phase, then
    fine-tune the last dense and output layers on target with the first
    dense layer frozen, starting from the best phase-1 checkpoint."""
    if cfg.model not in VANILLA_KINDS:
        raise ConfigError(f"train_vanilla cannot run model {cfg.model!r}")
    if cfg.model in ("bmm", "bfm") and target is None:
        raise DataError(f"{cfg.model} needs a target dataset")
    seeds = _derive_seeds(cfg)
    source = _maybe_subsample(source, cfg.n_source, seeds["sub_source"])
    if target is not None:
        target = _maybe_subsample(target, cfg.n_target, seeds["sub_target"])
    net = set_mode(build_vanilla(in_dim=source.dim, seed=seeds["init"]), "train")
    dropout_rng = Rng(seeds["dropout"])
    lr = cfg.resolved_lr

    if cfg.model == "bsm":
        _, points, tracker = _run_vanilla_phase(
            net, source, cfg, phase=1, lr=lr, shuffle_seed=seeds["shuffle_source"],
            dropout_rng=dropout_rng, source_val=source, target_val=target,
            selection="source_val", val_fn=val_fn)
        selection = "source_val"
    elif cfg.model == "bmm":
        mixed = concat_datasets(source, target)
        _, points, tracker = _run_vanilla_phase(
            net, mixed, cfg, phase=1, lr=lr, shuffle_seed=seeds["shuffle_source"],
            dropout_rng=dropout_rng, source_val=source, target_val=target,
            selection="target_val", val_fn=val_fn)
        selection = "target_val"
    else:  # bfm
        _, points, tracker1 = _run_vanilla_phase(
            net, source, cfg, phase=1, lr=lr, shuffle_seed=seeds["shuffle_source"],
            dropout_rng=dropout_rng, source_val=source, target_val=target,
            selection="source_val", val_fn=val_fn)
        tracker = _BestTracker()
        _, points, tracker = _run_vanilla_phase(
            tracker1.best_model, target, cfg, phase=2, lr=lr,
            shuffle_seed=seeds["shuffle_target"], dropout_rng=dropout_rng,
            source_val=source, target_val=target, selection="target_val",
            frozen_layers=(0,), val_fn=val_fn, points=points, tracker=tracker)
        selection = "target_val"
    history = TrainHistory(points, tracker.best_step, tracker.best_acc, selection)
    return set_mode(tracker.best_model, "infer"), history


def train_probe(ds: DomainDataset, epochs: int = 20, batch_size: int = 128,
                lr: float = 1e-3, beta1: float = 0.9,
                val_interval_steps: int = 40,
                seed: int = 0) -> tuple[NetworkParams, TrainHistory]:
    """Single-domain probe classifier used to compare feature transforms.

    Trains in -> 512 sigmoid -> 2 softmax on the train split and keeps the
    best validation-accuracy parameters.
    """
    cfg = TrainConfig(model="bsm", epochs=epochs, batch_size=batch_size,
                      lr=lr, beta1=beta1, val_interval_steps=val_interval_steps,
                      seed=seed)
    seeds = _derive_seeds(cfg)
    net = set_mode(build_probe(in_dim=ds.dim, seed=seeds["init"]), "train")
    _, points, tracker = _run_vanilla_phase(
        net, ds, cfg, phase=1, lr=lr, shuffle_seed=seeds["shuffle_source"],
        dropout_rng=Rng(seeds["dropout"]), source_val=ds, target_val=None,
        selection="source_val")
    history = TrainHistory(points, tracker.best_step, tracker.best_acc, "source_val")
    return set_mode(tracker.best_model, "infer"), history


# ---------------------------------------------------------------------------
# Adversarial regimes.
# ---------------------------------------------------------------------------


def _adversarial_val(net: AdversarialNet, ds: DomainDataset | None, domain: str):
    if ds is None or ds.n("val") == 0:
        return None
    x, y = ds.arrays("val")
    return _accuracy_from_probs(predict_classes(net, x, domain), y)


def _apply_part_grads(net: AdversarialNet, grads: AdversarialGrads,
                      states: dict, names) -> AdversarialNet:
    updates = {}
    for name in names:
        new_part, states[name] = adam_apply(getattr(net, name),
                                            getattr(grads, name), states[name])
        updates[name] = new_part
    return replace(net, **updates)


def _train_adversarial(cfg: TrainConfig, source: DomainDataset, target: DomainDataset,
                       val_fn=None) -> tuple[AdversarialNet, TrainHistory]:
    seeds = _derive_seeds(cfg)
    source = _maybe_subsample(source, cfg.n_source, seeds["sub_source"])
    target = _maybe_subsample(target, cfg.n_target, seeds["sub_target"])
    n_train = source.n("train")
    if n_train == 0 or target.n("train") == 0:
        raise DataError(f"{cfg.model}: empty training split")
    net = build_adversarial(in_dim=source.dim, seed=seeds["init"], mode=cfg.model)
    loss_fn = faraday_losses if cfg.model == "faraday" else dirac_losses
    states = {name: init_adam(part, cfg.resolved_lr, cfg.resolved_beta1)
              for name, part in net.parts().items()}
    total_steps = cfg.epochs * math.ceil(n_train / cfg.batch_size)
    val_at = set(_val_steps(total_steps, cfg.val_interval_steps))
    src_stream = batches(source, "train", cfg.batch_size, seeds["shuffle_source"],
                         epochs=cfg.epochs)
    tgt_stream = batches(target, "train", cfg.batch_size, seeds["shuffle_target"],
                         cycle=True)
    points: list[ValidationPoint] = []
    tracker = _BestTracker()
    for step, (x_s, y_s) in enumerate(src_stream, start=1):
        x_t, y_t = next(tgt_stream)
        ys1, yt1 = onehot(y_s), onehot(y_t)
        if cfg.model == "dirac":
            # critic passes: same batch, fresh forward, only D moves
            for _ in range(cfg.disc_steps):
                cap = forward_pair(net, x_s, x_t)
                losses = loss_fn(cap, ys1, yt1, cfg.weights)
                grads = route_gradients(net, cap, losses, cfg.weights, cfg.model)
                net = _apply_part_grads(net, grads, states, ("discriminator",))
            cap = forward_pair(net, x_s, x_t)
            losses = loss_fn(cap, ys1, yt1, cfg.weights)
            grads = route_gradients(net, cap, losses, cfg.weights, cfg.model)
            net = _apply_part_grads(
                net, grads, states,
                ("private_source", "private_target", "shared", "classifier"))
        else:
            cap = forward_pair(net, x_s, x_t)
            losses = loss_fn(cap, ys1, yt1, cfg.weights)
            grads = route_gradients(net, cap, losses, cfg.weights, cfg.model)
            net = _apply_part_grads(net, grads, states, net.parts().keys())
        if step in val_at:
            if val_fn is not None:
                s_acc, t_acc = val_fn(net, step, 1)
            else:
                s_acc = _adversarial_val(net, source, "source")
                t_acc = _adversarial_val(net, target, "target")
            if t_acc is None:
                raise DataError(f"{cfg.model}: empty target validation split")
            points.append(ValidationPoint(step, 1, s_acc, t_acc, {
                "classification": losses.classification,
                "discriminator": losses.discriminator,
                "generator": losses.generator,
            }))
            tracker.offer(step, t_acc, net)
    history = TrainHistory(points, tracker.best_step, tracker.best_acc, "target_val")
    return tracker.best_model, history


def train_faraday(cfg: TrainConfig, source: DomainDataset, target: DomainDataset,
                  val_fn=None) -> tuple[AdversarialNet, TrainHistory]:
    if cfg.model != "faraday":
        raise ConfigError(f"train_faraday cannot run model {cfg.model!r}")
    return _train_adversarial(cfg, source, target, val_fn)


def train_dirac(cfg: TrainConfig, source: DomainDataset, target: DomainDataset,
                val_fn=None) -> tuple[AdversarialNet, TrainHistory]:
    if cfg.model != "dirac":
        raise ConfigError(f"train_dirac cannot run model {cfg.model!r}")
    return _train_adversarial(cfg, source, target, val_fn)


def train_model(cfg: TrainConfig, source: DomainDataset,
                target: DomainDataset | None = None, val_fn=None):
    if cfg.is_vanilla:
        return train_vanilla(cfg, source, target, val_fn)
    if target is None:
        raise DataError(f"{cfg.model} needs a target dataset")
    return _train_adversarial(cfg, source, target, val_fn)


# ---------------------------------------------------------------------------
# Evaluation.
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray  # rows = true label, cols = predicted
    per_class_recall: tuple[float | None, float | None]
    n: int


def evaluate(model, ds: DomainDataset, split_name: str = "test") -> EvalReport:
    """Accuracy, confusion matrix, and recalls on one split.

    Adversarial models route the batch through the private encoder matching
    ds.domain; vanilla networks consume features directly.
    """
    x, y = ds.arrays(split_name)
    if x.shape[0] == 0:
        raise DataError(f"empty {split_name} split")
    if isinstance(model, AdversarialNet):
        if ds.domain not in ("source", "target"):
            raise DataError(f"adversarial evaluation needs a single-domain dataset, got {ds.domain!r}")
        probs = predict_classes(model, x, ds.domain)
    else:
        probs, _ = forward(set_mode(model, "infer"), x)
    pred = probs.argmax(axis=1)
    confusion = np.zeros((2, 2), dtype=np.int64)
    for t, p in zip(y, pred):
        confusion[t, p] += 1
    recalls = tuple(
        (confusion[c, c] / confusion[c].sum()) if confusion[c].sum() else None
        for c in (0, 1)
    )
    return EvalReport(float(np.mean(pred == y)), confusion, recalls, int(x.shape[0]))


# ---------------------------------------------------------------------------
# Experiment grid.
# ---------------------------------------------------------------------------


def run_grid(source: DomainDataset, target: DomainDataset, models,
             source_sizes, target_sizes, base_cfg: TrainConfig | None = None,
             repeats: int = 3, base_seed: int = 0):
    """Train/evaluate every (model, n_source, n_target) cell `repeats` times
    with seeds base_seed, base_seed+1, ...

    Returns (runs, cells): per-run rows and per-cell aggregates. A run that
    fails with a data error becomes a row with an error message instead of
    accuracies, and its cell aggregates over the surviving runs.
    """
    runs, cells = [], []
    for model in models:
        for n_s in source_sizes:
            for n_t in target_sizes:
                accs = []
                for r in range(repeats):
                    seed = base_seed + r
                    cfg = replace(
                        base_cfg if base_cfg is not None else TrainConfig(model=model),
                        model=model, seed=seed, n_source=n_s, n_target=n_t)
                    row = {"model": model, "n_source": n_s, "n_target": n_t,
                           "seed": seed, "split": "target_test"}
                    try:
                        trained, history = train_model(cfg, source, target)
                        report = evaluate(trained, target, "test")
                        row["accuracy"] = report.accuracy
                        row["best_val_acc"] = history.best_val_acc
                        row["error"] = ""
                        accs.append(report.accuracy)
                    except DataError as exc:
                        row["accuracy"] = None
                        row["best_val_acc"] = None
                        row["error"] = str(exc)
                    runs.append(row)
                cell = {"model": model, "n_source": n_s, "n_target": n_t,
                        "n_runs": len(accs)}
                if accs:
                    cell["mean_accuracy"] = float(np.mean(accs))
                    cell["std_accuracy"] = float(np.std(accs))  # population std
                else:
                    cell["mean_accuracy"] = None
                    cell["std_accuracy"] = None
                cells.append(cell)
    return runs, cells


_RUN_COLUMNS = ("model", "n_source", "n_target", "seed", "split",
                "accuracy", "best_val_acc", "error")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_runs_csv(runs, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_RUN_COLUMNS)
        for row in runs:
            writer.writerow([_fmt(row[c]) for c in _RUN_COLUMNS])


def write_grid_json(runs, cells, path) -> None:
    doc = {"runs": runs, "cells": cells}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_history_jsonl(history: TrainHistory, path) -> None:
    lines = []
    for p in history.points:
        lines.append(json.dumps({
            "type": "val", "step": p.step, "phase": p.phase,
            "source_val_acc": p.source_val_acc, "target_val_acc": p.target_val_acc,
            "losses": p.losses}, sort_keys=True))
    lines.append(json.dumps({
        "type": "summary", "best_step": history.best_step,
        "best_val_acc": history.best_val_acc, "selection": history.selection},
        sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def read_history_jsonl(path) -> tuple[list[dict], dict]:
    points, summary = [], {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        if doc.get("type") == "summary":
            summary = doc
        else:
            points.append(doc)
    return points, summary
