"""Training loop (BCE + RMSProp), evaluation, and the three-scenario protocol."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .dataset import DatasetManifest, combine_manifests, load_batch, epoch_iterator
from .model import ArchConfig, Model, model_init

log = logging.getLogger(__name__)

SCENARIOS = {
    "model1_inpaint": ("none", "inpaint"),
    "model2_copymove": ("none", "copy_move"),
    "model3_combined": ("none", "copy_move", "inpaint"),
}


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 1e-4
    rho: float = 0.9
    epsilon: float = 1e-8
    init_seed: int = 0
    shuffle_seed: int = 0
    split_seed: int = 0
    scenario: str = "model3_combined"
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for train-mode batchnorm")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; pick one of {sorted(SCENARIOS)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d


def scenario_manifest(scenario: str, manifests: list[DatasetManifest], split_seed: int) -> DatasetManifest:
    """Model-1/2 keep their manifest's own split; Model-3 concatenates and re-splits."""
    kinds = SCENARIOS[scenario]
    if scenario == "model3_combined" and len(manifests) > 1:
        merged = combine_manifests(manifests, split_seed)
    elif len(manifests) == 1:
        merged = manifests[0]
    else:
        raise ValueError(f"{scenario} takes exactly one manifest, got {len(manifests)}")
    records = [r for r in merged.records if r.forgery_kind in kinds]
    if not any(r.label == 1 for r in records):
        raise ValueError(f"manifest has no forged records of kinds {kinds[1:]} for {scenario}")
    return DatasetManifest(records, merged.seed, merged.root)


def _load_split(manifest: DatasetManifest, split: str, size: int):
    ids = manifest.split_ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    batch = load_batch(manifest, ids, size)
    return {rid: k for k, rid in enumerate(ids)}, batch.images, batch.labels


def train(config: TrainConfig, manifest: DatasetManifest, model: Model | None = None,
          progress=None) -> Model:
    """Train from scratch (or continue ``model``); history lands on ``model.history``."""
    if model is None:
        model = model_init(config.arch, config.init_seed)
        model.init_optimizer(config.learning_rate, config.rho, config.epsilon)
    elif not model.opt_state:
        model.init_optimizer(config.learning_rate, config.rho, config.epsilon)
    size = model.arch.input_size
    pos, x_train, y_train = _load_split(manifest, "train", size)
    _, x_val, y_val = _load_split(manifest, "val", size)

    for _ in range(config.epochs):
        epoch = model.epoch
        total, seen = 0.0, 0
        batches = epoch_iterator(manifest, "train", config.batch_size, config.shuffle_seed, epoch)
        for b, ids in enumerate(batches):
            rows = [pos[i] for i in ids]
            logits, cache = model.forward(x_train[rows], "train")
            loss = T.bce_with_logit(logits, y_train[rows])
            if not math.isfinite(loss.value):
                raise TrainingAborted(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            grads = model.backward(cache, loss.grad_wrt_logit)
            model.apply_gradients(grads)
            total += loss.value * len(rows)
            seen += len(rows)
        val_logits = model.predict_logits(x_val)
        val_acc = float(np.mean((val_logits > 0) == (y_val > 0.5)))
        model.epoch += 1
        row = {"epoch": model.epoch, "train_loss": total / seen, "val_acc": val_acc}
        model.history.append(row)
        log.debug("epoch %d  train_loss %.4f  val_acc %.3f", row["epoch"], row["train_loss"], val_acc)
        if progress is not None:
            progress(row)
    return model


@dataclass
class EvalReport:
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    loss: float
    per_kind: dict[str, dict] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: Model, manifest: DatasetManifest, split: str = "val",
             batch_size: int = 64) -> EvalReport:
    """Infer-mode accuracy, confusion counts, and per-kind accuracy on ``split``."""
    ids = manifest.split_ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    batch = load_batch(manifest, ids, model.arch.input_size)
    logits = model.predict_logits(batch.images, batch_size)
    return report_from_logits(logits, batch.labels, [manifest.records[i].forgery_kind for i in ids])


def report_from_logits(logits, labels, kinds) -> EvalReport:
    logits = np.asarray(logits, dtype=np.float64)
    truth = np.asarray(labels) > 0.5
    pred = logits > 0
    tp = int(np.sum(pred & truth))
    tn = int(np.sum(~pred & ~truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    per_kind = {}
    kinds = np.asarray(kinds)
    for kind in sorted(set(kinds.tolist())):
        sel = kinds == kind
        correct = int(np.sum(pred[sel] == truth[sel]))
        total = int(sel.sum())
        per_kind[kind] = {"correct": correct, "total": total, "accuracy": correct / total}
    loss = T.bce_with_logit(logits, truth.astype(np.float64)).value
    return EvalReport((tp + tn) / len(truth), tp, fp, tn, fn, loss, per_kind)
