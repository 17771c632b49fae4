"""Training loop, per-epoch logging and overfitting detection.

One epoch = one seeded shuffle of the training set, minibatch SGD over it
(the final partial batch is trained on, not dropped), then a full inference
pass over the train and validation sets to log loss and pixel accuracy.
Everything is deterministic given (seed, config, data).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, EvaluationError, TrainingError
from .fcn8 import NetworkGraph, forward, loss_and_gradients, predict_labels, trainable_names
from .kernels import ParameterSet, sgd_step, softmax_ce_loss, zero_velocity

Dataset = list[tuple[np.ndarray, np.ndarray]]  # [(1,3,h,w) image, (h,w) label]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int
    epochs: int
    lr: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ConfigurationError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.eval_every < 1:
            raise ConfigurationError(f"eval_every must be >= 1, got {self.eval_every}")


# the three training regimes shipped as named presets
PRESETS = {
    "bs17e70": dict(batch_size=17, epochs=70),
    "bs2e70": dict(batch_size=2, epochs=70),
    "bs1e7": dict(batch_size=1, epochs=7),
}


def preset(name: str, **overrides) -> TrainConfig:
    """A shipped regime by name, with optional field overrides."""
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    fields = dict(PRESETS[name])
    fields.update(overrides)
    return TrainConfig(**fields)


@dataclass(frozen=True)
class EpochStats:
    epoch: int  # 1-based
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainLog:
    entries: list[EpochStats]

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path) -> None:
        lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
        for e in self.entries:
            lines.append(
                f"{e.epoch},{e.train_loss!r},{e.train_acc!r},{e.val_loss!r},{e.val_acc!r}")
        Path(path).write_text("\n".join(lines) + "\n", "utf-8")

    @staticmethod
    def load(path) -> "TrainLog":
        lines = Path(path).read_text("utf-8").splitlines()
        entries = []
        for line in lines[1:]:
            epoch, tl, ta, vl, va = line.split(",")
            entries.append(EpochStats(int(epoch), float(tl), float(ta), float(vl), float(va)))
        return TrainLog(entries)


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Split a permutation into batch_size chunks; the last may be partial."""
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def _stack(dataset: Dataset, idx) -> tuple[np.ndarray, np.ndarray]:
    images = np.concatenate([dataset[i][0] for i in idx], axis=0)
    labels = np.stack([dataset[i][1] for i in idx], axis=0)
    return images, labels


def evaluate(graph: NetworkGraph, params: ParameterSet, dataset: Dataset) -> tuple[float, float]:
    """Mean loss and pixel accuracy over a dataset, model in inference mode."""
    total_loss = 0.0
    correct = 0
    pixels = 0
    for image, label in dataset:
        logits = forward(graph, params, image)
        loss, _ = softmax_ce_loss(logits, label[None])
        total_loss += loss
        pred = predict_labels(logits)[0]
        correct += int((pred == label).sum())
        pixels += label.size
    return total_loss / len(dataset), correct / pixels


def run_training(
    graph: NetworkGraph,
    params: ParameterSet,
    train_set: Dataset,
    val_set: Dataset,
    cfg: TrainConfig,
) -> tuple[ParameterSet, TrainLog]:
    """Train in place for cfg.epochs and return the per-epoch log.

    Validation metrics are recomputed at epoch 1 and then every
    cfg.eval_every epochs; in between, the last computed values carry
    forward so every epoch entry is complete.
    """
    if not train_set or not val_set:
        raise ConfigurationError("train and validation sets must be non-empty")
    if cfg.batch_size > len(train_set):
        raise ConfigurationError(
            f"batch_size {cfg.batch_size} exceeds training-set size {len(train_set)}")
    num_classes = graph.config.num_classes
    top = max(int(label.max()) for _, label in [*train_set, *val_set])
    if top >= num_classes:
        raise ConfigurationError(
            f"data contains class id {top} but the model has {num_classes} classes")

    updatable = set(trainable_names(graph))
    velocity = zero_velocity({k: v for k, v in params.items() if k in updatable})
    rng = np.random.default_rng(cfg.seed)
    entries: list[EpochStats] = []
    val_loss = val_acc = None

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        for b, idx in enumerate(_batches(order, cfg.batch_size)):
            images, labels = _stack(train_set, idx)
            loss, grads = loss_and_gradients(graph, params, images, labels)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            step_params = {k: params[k] for k in velocity}
            step_grads = {k: grads[k] for k in velocity}
            sgd_step(step_params, step_grads, cfg.lr, cfg.momentum, velocity)

        train_loss, train_acc = evaluate(graph, params, train_set)
        if val_loss is None or (epoch - 1) % cfg.eval_every == 0:
            val_loss, val_acc = evaluate(graph, params, val_set)
        entries.append(EpochStats(epoch, train_loss, train_acc, val_loss, val_acc))
    return params, TrainLog(entries)


def detect_overfitting(log: TrainLog, window: int = 5) -> int | None:
    """First epoch where validation loss rises strictly for `window` steps
    while training loss does not rise; None when no such epoch exists."""
    if window < 1:
        raise ConfigurationError(f"window must be >= 1, got {window}")
    entries = log.entries
    if len(entries) < window + 1:
        raise EvaluationError(
            f"log has {len(entries)} epochs; overfitting detection needs "
            f"at least window + 1 = {window + 1}")
    for start in range(len(entries) - window):
        span = entries[start : start + window + 1]
        val_rising = all(b.val_loss > a.val_loss for a, b in zip(span, span[1:]))
        train_ok = all(b.train_loss <= a.train_loss for a, b in zip(span, span[1:]))
        if val_rising and train_ok:
            return span[0].epoch
    return None
