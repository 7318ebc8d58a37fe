"""Training loop, fine-tuning, evaluation and the protocol runner.

A run is deterministic given (manifest, protocol spec, seeds): shuffling,
validation carving and augmentation all derive from explicit seeds.  The
best-epoch rule keeps the weights of the epoch with the highest validation
accuracy (earliest epoch on ties), evaluated after every completed epoch.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .data import (
    ATTACK,
    LENS_CLASSES,
    AugmentConfig,
    ProtocolSpec,
    augment,
    decode_and_resize,
    make_protocol_splits,
)
from .errors import DataError, NumericError
from .layers import INFER, TRAIN, bce_loss, cross_entropy_loss
from .metrics import MetricsReport, binary_metrics, format_report, multiclass_metrics
from .model import DFCANetConfig, build_model
from .optim import Adam
from .tensor import Tensor, no_grad


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    val_fraction: float = 0.1
    threshold: float = 0.5
    augment: AugmentConfig | None = None
    eval_batch: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0,1), got {self.val_fraction}")


class ArrayDataset:
    """Decoded-in-memory dataset; augmentation (train stream only) is applied
    per batch with seeds derived from (epoch, record index)."""

    def __init__(self, records, image_size, task="pad", class_names=None):
        self.records = list(records)
        self.task = task
        if task == "lens":
            self.class_names = tuple(class_names) if class_names else tuple(
                c for c in LENS_CLASSES if any(r.lens_class == c for r in self.records))
            index = {c: i for i, c in enumerate(self.class_names)}
            self.labels = np.array([index[r.lens_class] for r in self.records], dtype=np.int64)
        else:
            self.class_names = ("bonafide", "attack")
            self.labels = np.array([1 if r.label == ATTACK else 0 for r in self.records],
                                   dtype=np.int64)
        self.images = [decode_and_resize(r.path, (image_size, image_size))
                       for r in self.records]

    def __len__(self):
        return len(self.records)

    def batch(self, indices, augment_cfg: AugmentConfig | None = None, epoch: int = 0):
        if augment_cfg is not None:
            imgs = [augment(self.images[i], augment_cfg, epoch * 1_000_003 + int(i))
                    for i in indices]
        else:
            imgs = [self.images[i] for i in indices]
        return np.stack(imgs).astype(np.float32), self.labels[list(indices)]


def stratified_split(records, fraction, seed, key=lambda r: r.label):
    """Split off a seeded stratified ``fraction`` (second return value)."""
    if fraction == 0.0:
        return list(records), []
    groups = {}
    for r in sorted(records, key=lambda r: r.path):
        groups.setdefault(key(r), []).append(r)
    big, small = [], []
    for gi, gkey in enumerate(sorted(groups)):
        members = groups[gkey]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7, gi]))
        order = rng.permutation(len(members))
        n_small = max(1, int(round(fraction * len(members)))) if len(members) > 1 else 0
        for pos, idx in enumerate(order):
            (small if pos < n_small else big).append(members[idx])
    return big, small


def select_best_epoch(history) -> int:
    """1-based epoch with maximal validation accuracy, earliest on ties."""
    if not history:
        raise ValueError("empty training history")
    best, best_acc = 1, -1.0
    for row in history:
        if row["val_acc"] > best_acc:
            best, best_acc = row["epoch"], row["val_acc"]
    return best


@dataclass
class TrainResult:
    history: list
    best_epoch: int | None
    best_state: dict
    transfer: ckpt.TransferReport | None = None


def _loss_and_scores(model, x, y, task):
    xt = Tensor(x)
    if task == "pad":
        p = model(xt)
        loss = bce_loss(p, y.astype(np.float32)[:, None])
        return loss, p.data[:, 0]
    logits = model(xt, return_logits=True)
    loss = cross_entropy_loss(logits, y)
    return loss, logits.data


def _eval_pass(model, ds, cfg):
    """Mean loss, accuracy and raw scores over a dataset in infer mode."""
    model.set_mode(INFER)
    losses, scores = [], []
    with no_grad():
        for start in range(0, len(ds), cfg.eval_batch):
            idx = range(start, min(start + cfg.eval_batch, len(ds)))
            x, y = ds.batch(idx)
            loss, s = _loss_and_scores(model, x, y, ds.task)
            losses.append(float(loss.data) * len(y))
            scores.append(s)
    scores = np.concatenate(scores)
    if ds.task == "pad":
        pred = (scores >= cfg.threshold).astype(np.int64)
    else:
        pred = scores.argmax(axis=1)
    acc = 100.0 * float(np.count_nonzero(pred == ds.labels)) / len(ds)
    return sum(losses) / len(ds), acc, scores


def train(model, train_ds: ArrayDataset, val_ds: ArrayDataset, cfg: TrainConfig) -> TrainResult:
    """Minibatch Adam optimization with best-validation-accuracy selection.

    With ``lr == 0`` no parameter is ever updated (the optimizer is not
    stepped), which gives a cheap no-op baseline.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise DataError("train() needs non-empty train and validation sets")
    if hasattr(model, "drop"):
        model.drop.reseed(cfg.seed)
    optimizer = Adam(model.named_parameters(), lr=cfg.lr, betas=cfg.betas) if cfg.lr > 0 else None
    history = []
    best_epoch, best_acc, best_state = None, -1.0, None
    for epoch in range(1, cfg.epochs + 1):
        model.set_mode(TRAIN)
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 11, epoch])).permutation(len(train_ds))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = train_ds.batch(idx, cfg.augment, epoch)
            loss, _ = _loss_and_scores(model, x, y, train_ds.task)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            epoch_loss += float(loss.data) * len(y)
            if optimizer is not None:
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
        val_loss, val_acc, _ = _eval_pass(model, val_ds, cfg)
        history.append({"epoch": epoch, "train_loss": epoch_loss / len(train_ds),
                        "val_loss": val_loss, "val_acc": val_acc})
        if val_acc > best_acc:
            best_epoch, best_acc = epoch, val_acc
            best_state = {name: arr.copy() for name, arr in model.named_state()}
    if best_state is not None:
        ckpt.apply_entries(model, best_state, mode="strict")
    else:
        best_state = {name: arr.copy() for name, arr in model.named_state()}
    return TrainResult(history=history, best_epoch=best_epoch, best_state=best_state)


def finetune(model, entries: dict, train_ds, val_ds, cfg: TrainConfig) -> TrainResult:
    """Like :func:`train` but starting from transferred weights; the
    transfer report lists loaded vs skipped vs freshly initialized tensors."""
    report = ckpt.apply_entries(model, entries, mode="transfer")
    result = train(model, train_ds, val_ds, cfg) if cfg.epochs > 0 else TrainResult(
        history=[], best_epoch=None,
        best_state={name: arr.copy() for name, arr in model.named_state()})
    result.transfer = report
    return result


def evaluate(model, ds: ArrayDataset, threshold: float = 0.5, eval_batch: int = 64) -> MetricsReport:
    """Score a dataset with a frozen model and compute the metrics report."""
    model.set_mode(INFER)
    scores = []
    with no_grad():
        for start in range(0, len(ds), eval_batch):
            idx = range(start, min(start + eval_batch, len(ds)))
            x, y = ds.batch(idx)
            if ds.task == "pad":
                scores.append(model(Tensor(x)).data[:, 0])
            else:
                scores.append(model(Tensor(x)).data)
    scores = np.concatenate(scores)
    if ds.task == "pad":
        return binary_metrics(scores, ds.labels, threshold)
    return multiclass_metrics(scores, ds.labels, len(ds.class_names))


def history_csv(history) -> str:
    lines = ["epoch,train_loss,val_loss,val_acc"]
    for row in history:
        lines.append(f"{row['epoch']},{row['train_loss']:.6f},{row['val_loss']:.6f},{row['val_acc']:.4f}")
    return "\n".join(lines) + "\n"


@dataclass
class ProtocolRunResult:
    report: MetricsReport
    train_result: TrainResult
    report_path: str
    checkpoint_path: str
    history_path: str
    train_rows: list = field(default_factory=list)
    test_rows: list = field(default_factory=list)


def _sensor_counts(rows):
    counts = {}
    for r in rows:
        counts[r.sensor] = counts.get(r.sensor, 0) + 1
    return ";".join(f"{s}:{n}" for s, n in sorted(counts.items()))


def run_protocol(spec: ProtocolSpec, records, model_cfg: DFCANetConfig,
                 train_cfg: TrainConfig, out_dir) -> ProtocolRunResult:
    """Split, train (or fine-tune), evaluate and write the run artifacts
    (report.txt, history.csv, best.ckpt) under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    train_rows, test_rows = make_protocol_splits(records, spec)
    train_part, val_part = stratified_split(train_rows, train_cfg.val_fraction, train_cfg.seed)
    if not val_part:
        raise DataError("validation slice came out empty; increase the training set")
    task = "lens" if spec.kind == "lens_detection" else "pad"
    class_names = None
    if task == "lens":
        class_names = tuple(c for c in LENS_CLASSES if any(r.lens_class == c for r in records))
        if model_cfg.num_classes != len(class_names):
            raise DataError(
                f"model expects {model_cfg.num_classes} classes but manifest has {len(class_names)}")
    size = model_cfg.input_size
    train_ds = ArrayDataset(train_part, size, task, class_names)
    val_ds = ArrayDataset(val_part, size, task, class_names)
    test_ds = ArrayDataset(test_rows, size, task, class_names)

    model = build_model(model_cfg)
    if spec.kind == "incremental":
        entries = ckpt.load_entries(spec.checkpoint)
        result = finetune(model, entries, train_ds, val_ds, train_cfg)
    else:
        result = train(model, train_ds, val_ds, train_cfg)

    report = evaluate(model, test_ds, train_cfg.threshold, train_cfg.eval_batch)
    extra = {
        "protocol": spec.kind,
        "task": task,
        "positive_class": "attack",
        "soft_lens_as": spec.soft_lens_as,
        "train_sensors": ";".join(sorted({r.sensor for r in train_rows})),
        "test_sensors": ";".join(sorted({r.sensor for r in test_rows})),
        "train_sensor_counts": _sensor_counts(train_rows),
        "test_sensor_counts": _sensor_counts(test_rows),
        "train_rows": len(train_part),
        "val_rows": len(val_part),
        "test_rows": len(test_rows),
        "param_count": model.parameter_count(),
        "ifcnet": "on" if model_cfg.use_ifcnet else "off",
        "cam": "on" if model_cfg.use_cam else "off",
        "best_epoch": result.best_epoch,
    }
    if result.transfer is not None:
        extra["transferred"] = len(result.transfer.loaded)
        extra["transfer_skipped"] = len(result.transfer.skipped)
        extra["transfer_reinitialized"] = len(result.transfer.reinitialized)

    report_path = os.path.join(out_dir, "report.txt")
    with open(report_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_report(report, extra))
    history_path = os.path.join(out_dir, "history.csv")
    with open(history_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(history_csv(result.history))
    checkpoint_path = os.path.join(out_dir, "best.ckpt")
    ckpt.save_checkpoint(checkpoint_path, model)
    return ProtocolRunResult(report=report, train_result=result, report_path=report_path,
                             checkpoint_path=checkpoint_path, history_path=history_path,
                             train_rows=train_rows, test_rows=test_rows)
