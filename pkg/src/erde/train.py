"""Joint multi-exit training loops.

All exits train simultaneously: the objective is the plain sum of the per-exit
losses, selected by mode (cross-entropy for teachers and plain students, the
distillation pair for KD students, the gated total for entropy-regularized
students).  Early stopping watches final-exit validation accuracy and restores
the best weights.  Determinism: batch order comes from the seeded epoch
shuffle, and each batch's dropout/augmentation stream is derived from
(seed, epoch, batch index), so runs with equal configs are bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, augment_batch
from .losses import LossWeights, ce_joint, erde_total, kd_baseline
from .optim import Adam
from .tensor import Tape, Tensor

MODES = ("teacher", "student_no_kd", "student_kd", "student_erde")

_LOSS_FORMULA = {
    "teacher": "ce_joint",
    "student_no_kd": "ce_joint",
    "student_kd": "kd_baseline",
    "student_erde": "erde_total",
}


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    early_stop_patience: int = 20
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    exit_map: tuple = None
    # the plain single-exit baseline: CE on the final exit only, intermediate
    # heads left untrained
    final_exit_ce_only: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if min(self.epochs, self.batch_size) < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size, and learning_rate must be positive")
        if self.final_exit_ce_only and self.mode not in ("teacher", "student_no_kd"):
            raise ValueError("final_exit_ce_only applies to cross-entropy modes only")

    @property
    def loss_formula(self):
        return _LOSS_FORMULA[self.mode]


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = -1.0
    loss_formula: str = ""

    def append(self, epoch, train_loss, val_acc_per_exit, best_so_far):
        self.records.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "val_acc_per_exit": val_acc_per_exit,
            "best_so_far": best_so_far,
        })

    def to_ndjson(self, path):
        with open(path, "w") as f:
            for record in self.records:
                f.write(json.dumps(record, sort_keys=True))
                f.write("\n")


def evaluate_exit_accuracy(net, dataset, batch_size=256):
    """Eval-mode accuracy of every exit over a dataset."""
    n = net.n
    correct = np.zeros(n, dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        stop = min(start + batch_size, len(dataset))
        x = Tensor(dataset.images[start:stop], dtype=net.dtype)
        labels = dataset.labels[start:stop]
        for i, logits in enumerate(net.forward_all_exits(x, mode="eval")):
            correct[i] += int((logits.data.argmax(axis=1) == labels).sum())
    return (correct / len(dataset)).tolist()


def _teacher_exit_logits(teacher, x):
    return [l.data.astype(np.float64) for l in teacher.forward_all_exits(x, mode="eval")]


def _batch_loss(net, teacher, images, labels, config, rng):
    x = Tensor(images, dtype=net.dtype)
    teacher_logits = None
    if teacher is not None:
        teacher_logits = _teacher_exit_logits(teacher, x)
    with Tape() as tape:
        exits = net.forward_all_exits(x, mode="train", rng=rng)
        if config.mode in ("teacher", "student_no_kd"):
            loss = ce_joint(exits[-1:] if config.final_exit_ce_only else exits, labels)
        elif config.mode == "student_kd":
            loss = kd_baseline(exits, teacher_logits, labels, config.weights,
                               exit_map=config.exit_map).total
        else:
            loss = erde_total(exits, teacher_logits, labels, config.weights,
                              exit_map=config.exit_map).total
        tape.backward(loss)
    return loss.item()


def train(net, teacher, splits, config):
    """Train `net` in place on splits.train, validating on splits.val.

    Returns a TrainLog; on completion the network holds the weights of the
    best-validation-accuracy epoch (final exit criterion).
    """
    if config.mode in ("student_kd", "student_erde") and teacher is None:
        raise ValueError(f"mode {config.mode!r} requires a teacher network")
    if len(splits.train) == 0:
        raise ValueError("training split is empty")

    params = net.named_parameters()
    if config.final_exit_ce_only:
        final_head = f"head{net.n}."
        params = {name: p for name, p in params.items()
                  if name.startswith("block") or name.startswith(final_head)}
    optimizer = Adam(params, lr=config.learning_rate)
    order_rng = np.random.default_rng(config.seed)
    log = TrainLog(loss_formula=config.loss_formula)

    best_state = net.copy_state()
    best_acc = -1.0
    best_epoch = -1
    since_best = 0

    n_train = len(splits.train)
    for epoch in range(config.epochs):
        order = order_rng.permutation(n_train)
        epoch_loss = 0.0
        batch_count = 0
        for batch_index, start in enumerate(range(0, n_train, config.batch_size)):
            idx = order[start:start + config.batch_size]
            images = splits.train.images[idx]
            labels = splits.train.labels[idx]
            stream = np.random.default_rng([config.seed, epoch, batch_index])
            if config.augment.any_enabled():
                images = augment_batch(images, stream, config.augment)
            optimizer.zero_grad()
            epoch_loss += _batch_loss(net, teacher, images, labels, config, stream)
            optimizer.step()
            batch_count += 1

        val_acc = evaluate_exit_accuracy(net, splits.val) if len(splits.val) else [0.0] * net.n
        final_acc = val_acc[-1]
        improved = final_acc > best_acc
        if improved:
            best_acc = final_acc
            best_epoch = epoch
            best_state = net.copy_state()
            since_best = 0
        else:
            since_best += 1
        log.append(epoch, epoch_loss / max(batch_count, 1), val_acc, best_acc)
        if since_best > config.early_stop_patience:
            break

    net.load_state(best_state)
    log.best_epoch = best_epoch
    log.best_val_accuracy = best_acc
    return log
