"""Mini-batch Adam training with early stopping on validation loss."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .netcore import NetworkSpec, backward, batch_losses, forward_packed, loss_kind, pack
from .validation import check_bags

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 20
    max_epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    early_stop_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.early_stop_patience < 0:
            raise ValueError(f"early_stop_patience must be >= 0, got {self.early_stop_patience}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _labels(dataset, labels):
    if labels is not None:
        return np.asarray(labels, dtype=int)
    return np.array([ex.label for ex in dataset], dtype=int)


def evaluate(spec: NetworkSpec, bags, depth: int, labels, batch_size: int = 500):
    """Mean loss, accuracy and class probabilities over normalised bags."""
    probas, losses = [], []
    for start in range(0, len(bags), batch_size):
        chunk = bags[start : start + batch_size]
        trace = forward_packed(spec, pack(chunk, depth))
        probas.append(trace.proba)
        if labels is not None:
            losses.append(batch_losses(trace, labels[start : start + batch_size], spec))
    proba = np.concatenate(probas, axis=0)
    if labels is None:
        return None, None, proba
    pred = proba.argmax(axis=1)
    return float(np.concatenate(losses).mean()), float(np.mean(pred == labels)), proba


@dataclass
class TrainResult:
    spec: NetworkSpec
    history: list
    best_epoch: int
    stopped_epoch: int


def train(
    spec: NetworkSpec,
    train_set,
    valid_set=None,
    config: TrainConfig | None = None,
    *,
    train_labels=None,
    valid_labels=None,
) -> TrainResult:
    """Train a copy of ``spec``; return the weights of the best validation epoch.

    After every epoch the validation loss is recorded. Training stops after
    ``max_epochs`` or once the validation loss has failed to improve for more
    than ``early_stop_patience`` consecutive epochs. Without a validation set
    the training loss drives early stopping. The final partial batch is kept.
    """
    config = config or TrainConfig()
    loss_kind(spec)
    spec = spec.copy()
    bags, depth, _ = check_bags(train_set, depth=spec.depth, feature_dim=spec.input_dim)
    y = _labels(train_set, train_labels)
    if len(y) != len(bags):
        raise ValueError(f"length mismatch: {len(bags)} examples, {len(y)} labels")
    if np.any((y < 0) | (y >= spec.num_classes)):
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    if valid_set is not None:
        vbags, _, _ = check_bags(valid_set, depth=spec.depth, feature_dim=spec.input_dim)
        vy = _labels(valid_set, valid_labels)
    rng = np.random.default_rng(config.seed)
    params = spec.parameters()
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    best_loss, best_params, best_epoch, bad = np.inf, [p.copy() for p in params], 0, 0
    history = []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(bags))
        total = 0.0
        for b, start in enumerate(range(0, len(bags), config.batch_size)):
            idx = order[start : start + config.batch_size]
            trace = forward_packed(spec, pack([bags[i] for i in idx], depth))
            batch_loss = batch_losses(trace, y[idx], spec)
            if not np.all(np.isfinite(batch_loss)):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
            total += float(batch_loss.sum())
            opt.step(backward(trace, y[idx], spec))
        train_loss = total / len(bags)
        if valid_set is not None:
            valid_loss, valid_acc, _ = evaluate(spec, vbags, depth, vy)
        else:
            valid_loss, valid_acc = train_loss, float("nan")
        if not np.isfinite(valid_loss):
            raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
        history.append(
            {"epoch": epoch, "train_loss": train_loss, "valid_loss": valid_loss, "valid_accuracy": valid_acc}
        )
        logger.info("epoch %d train_loss %.5f valid_loss %.5f valid_acc %.4f", epoch, train_loss, valid_loss, valid_acc)
        if valid_loss < best_loss:
            best_loss, best_epoch, bad = valid_loss, epoch, 0
            best_params = [p.copy() for p in params]
        else:
            bad += 1
            if bad > config.early_stop_patience:
                break
    spec.set_parameters(best_params)
    return TrainResult(spec, history, best_epoch, epoch)


def predict(spec: NetworkSpec, dataset, batch_size: int = 500):
    """Predicted labels (argmax, ties to the smaller class) and class probabilities."""
    bags, depth, _ = check_bags(dataset, depth=spec.depth, feature_dim=spec.input_dim)
    _, _, proba = evaluate(spec, bags, depth, None, batch_size)
    return proba.argmax(axis=1), proba


def accuracy(predictions, dataset_or_labels) -> float:
    if hasattr(dataset_or_labels, "labels"):
        truth = dataset_or_labels.labels
    else:
        truth = np.asarray(dataset_or_labels)
        if truth.dtype == object:
            truth = np.array([ex.label for ex in dataset_or_labels])
    predictions = np.asarray(predictions)
    if predictions.shape[0] != truth.shape[0]:
        raise ValueError(f"length mismatch: {predictions.shape[0]} predictions, {truth.shape[0]} examples")
    if truth.shape[0] == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(predictions == truth))


def write_history(history, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "valid_loss", "valid_accuracy"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["valid_loss"]), repr(row["valid_accuracy"])])
