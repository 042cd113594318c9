"""Training loop: gradient descent on the net and prototypes, interleaved
with the derivative-free multiplicative update of the leaf logits.

Each epoch snapshots the leaf logits. Mini-batches run forward against
that snapshot, backprop into the backbone and prototypes, and fold their
contribution into a running replacement vector; the replacement is
committed as the new logits when the epoch ends. With the gradient-
trained parameters frozen, the scheme telescopes to the exact full-pass
update for any batch partition, which is what the oracle tests pin down.
Leaf logits never receive gradients.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import tree as tr
from .autodiff import Tensor
from .data import AugmentConfig, Dataset, augment
from .model import ProtoTreeModel

PREDICTION_FLOOR = 1e-9  # guards the elementwise division of the leaf update

# latents are sigmoid outputs, so prototypes outside the unit box can only
# drift away from every patch, saturating the routing and its gradients
CLAMP_PROTOTYPES = True


class TrainingError(RuntimeError):
    """Raised when an epoch aborts, e.g. on a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr_body: float = 1e-3
    lr_head: float = 1e-3
    lr_prototypes: float = 1e-3
    milestones: tuple[int, ...] = ()
    gamma: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    frozen_epochs: int = 0          # body excluded from updates early on
    leaf_norm: str = "softmax"      # "l1" documented alternative
    augment: AugmentConfig = field(
        default_factory=lambda: AugmentConfig(enabled=False))

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        for rate in (self.lr_body, self.lr_head, self.lr_prototypes):
            if rate <= 0:
                raise ValueError(f"learning rates must be > 0, got {rate}")
        if any(b >= a for a, b in zip(self.milestones[1:], self.milestones)):
            raise ValueError(f"milestones must increase strictly: "
                             f"{self.milestones}")
        if self.leaf_norm not in ("softmax", "l1"):
            raise ValueError(f"unknown leaf_norm {self.leaf_norm!r}")
        self.augment.validate()

    def learning_rate(self, base: float, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if epoch >= m)
        return base * self.gamma ** passed


class Adam:
    """Adaptive moment estimation over named parameter groups."""

    def __init__(self, groups: dict[str, list[Tensor]], config: TrainConfig):
        self.groups = groups
        self.config = config
        self.step_count = 0
        self.moments = {name: [(np.zeros_like(t.values), np.zeros_like(t.values))
                               for t in tensors]
                        for name, tensors in groups.items()}

    def step(self, rates: dict[str, float]) -> None:
        cfg = self.config
        self.step_count += 1
        correct1 = 1.0 - cfg.beta1 ** self.step_count
        correct2 = 1.0 - cfg.beta2 ** self.step_count
        for name, tensors in self.groups.items():
            lr = rates.get(name, 0.0)
            for tensor, (m, v) in zip(tensors, self.moments[name]):
                g = tensor.grad
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * g * g
                if lr == 0.0:
                    continue
                m_hat = m / correct1
                v_hat = v / correct2
                tensor.values -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)

    def zero_grad(self) -> None:
        for tensors in self.groups.values():
            for tensor in tensors:
                tensor.zero_grad()


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(y_hat: Tensor, y: np.ndarray) -> Tensor:
    """Mean cross-entropy between predicted distributions and one-hot rows."""
    target = np.asarray(y, dtype=y_hat.dtype)
    if target.ndim == 1:
        target = target[None]
    # single distributions are promoted to a batch of one, detached
    hat = Tensor(y_hat.values[None]) if y_hat.values.ndim == 1 else y_hat
    if hat.values.ndim != 2:
        raise ValueError(f"expected N x K predictions, got {y_hat.shape}")
    if target.shape != hat.shape:
        raise ValueError(f"label shape {target.shape} != prediction shape "
                         f"{hat.shape}")
    ok = np.isin(target, (0.0, 1.0)).all() and \
        np.abs(target.sum(axis=1) - 1.0).max() == 0.0
    if not ok:
        raise ValueError("labels must be exact one-hot rows")
    # evaluate the log only at true-class entries: mathematically equal to
    # -sum(y * log yhat) for one-hot y, and exact when other entries are 0
    values = hat.values
    n = values.shape[0]
    rows = np.arange(n)
    cols = target.argmax(axis=1)
    picked = values[rows, cols]
    loss = np.asarray(-np.log(picked).sum() / n, dtype=values.dtype)

    def bwd(g):
        if hat.requires_grad:
            grad = np.zeros_like(values)
            grad[rows, cols] = -g / (picked * n)
            hat.grad += grad

    return ad.record_op(loss, [hat], bwd)


class EpochLeafAccumulator:
    """Running replacement vector for the leaf logits over one epoch.

    Accumulates in float64 so the result does not depend on the batch
    partition at float32 granularity.
    """

    def __init__(self, leaves: tr.LeafParams, num_batches: int):
        self.snapshot = leaves.logits.astype(np.float64)
        self.snapshot_dist = leaves.distributions(self.snapshot)
        self.running = self.snapshot.copy()
        self.num_batches = num_batches

    def committed(self) -> np.ndarray:
        # telescoping leaves at most rounding residue below zero
        return np.maximum(self.running, 0.0)


def leaf_update_batch(acc: EpochLeafAccumulator, pi: np.ndarray,
                      y: np.ndarray, y_hat: np.ndarray) -> None:
    """Fold one batch into the running leaf replacement.

    Per leaf: subtract the 1/B share of the epoch-start logits, then add
    the batch's share of the multiplicative update, using the epoch-start
    distributions and the batch's freshly computed predictions. The
    division is floored to dodge float32 underflow of tiny predictions.
    """
    weights = y.astype(np.float64) / np.maximum(y_hat, PREDICTION_FLOOR)
    acc.running -= acc.snapshot / acc.num_batches
    acc.running += acc.snapshot_dist * (pi.astype(np.float64).T @ weights)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, 0x5109, epoch)))


def _item_rng(seed: int, epoch: int, item: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, 0xA46, epoch,
                                                         item)))


def _assemble(images: np.ndarray, indices: np.ndarray, config: TrainConfig,
              epoch: int) -> np.ndarray:
    if not config.augment.enabled:
        return images[indices]
    return np.stack([augment(images[i], config.augment,
                             _item_rng(config.seed, epoch, int(i)))
                     for i in indices])


def train_epoch(model: ProtoTreeModel, dataset: Dataset, config: TrainConfig,
                epoch: int, adam: Adam | None) -> dict[str, float]:
    """One pass over the shuffled dataset; returns mean loss and accuracy.

    With ``adam=None`` the gradient-trained parameters stay frozen and
    only the interleaved leaf update runs, which is the configuration the
    equivalence oracle checks.
    """
    n = len(dataset)
    perm = _epoch_rng(config.seed, epoch).permutation(n)
    batches = [perm[s:s + config.batch_size]
               for s in range(0, n, config.batch_size)]
    acc = EpochLeafAccumulator(model.leaves, len(batches))
    rates = {
        "body": 0.0 if epoch <= config.frozen_epochs
        else config.learning_rate(config.lr_body, epoch),
        "head": config.learning_rate(config.lr_head, epoch),
        "prototypes": config.learning_rate(config.lr_prototypes, epoch),
    }
    total_loss = 0.0
    correct = 0
    labels = one_hot(dataset.labels, model.num_classes)
    for batch_no, indices in enumerate(batches):
        images = _assemble(dataset.images, indices, config, epoch)
        y = labels[indices]
        if adam is None:
            y_hat, trace = model.predict_batch(images)
            loss_value = cross_entropy(y_hat, y).item()
        else:
            with ad.Tape() as tape:
                y_hat, trace = model.predict_batch(images)
                loss = cross_entropy(y_hat, y)
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise TrainingError(
                        f"non-finite loss {loss_value} at epoch {epoch}, "
                        f"batch {batch_no}")
                tape.backward(loss)
            adam.step(rates)
            adam.zero_grad()
            if CLAMP_PROTOTYPES:
                np.clip(model.prototypes.tensor.values, 0.0, 1.0,
                        out=model.prototypes.tensor.values)
        leaf_update_batch(acc, trace.leaf_probabilities.values, y,
                          y_hat.values)
        total_loss += loss_value * len(indices)
        correct += int((y_hat.values.argmax(axis=1)
                        == dataset.labels[indices]).sum())
    model.leaves.logits = acc.committed().astype(model.leaves.logits.dtype)
    return {"loss": total_loss / n, "train_acc": correct / n}


def fit(model: ProtoTreeModel, train_set: Dataset, test_set: Dataset | None,
        config: TrainConfig, csv_path: str | None = None,
        verbose: bool = False) -> list[dict[str, float]]:
    """Full training run; optionally logs per-epoch metrics to a CSV."""
    config.validate()
    adam = Adam(model.parameters(), config)
    history: list[dict[str, float]] = []
    writer = None
    if csv_path:
        os.makedirs(os.path.dirname(os.path.abspath(csv_path)), exist_ok=True)
        writer = open(csv_path, "w")
        writer.write("epoch,loss,train_acc,test_acc\n")
    try:
        for epoch in range(1, config.epochs + 1):
            metrics = train_epoch(model, train_set, config, epoch, adam)
            metrics["test_acc"] = model.accuracy(test_set) if test_set else float("nan")
            history.append(metrics)
            if writer:
                writer.write(f"{epoch},{metrics['loss']:.8f},"
                             f"{metrics['train_acc']:.6f},"
                             f"{metrics['test_acc']:.6f}\n")
                writer.flush()
            if verbose:
                print(f"epoch {epoch:3d}  loss {metrics['loss']:.4f}  "
                      f"train {metrics['train_acc']:.4f}  "
                      f"test {metrics['test_acc']:.4f}", flush=True)
    finally:
        if writer:
            writer.close()
    return history


def leaf_update_full_pass(model: ProtoTreeModel, dataset: Dataset,
                          batch_size: int = 256) -> np.ndarray:
    """Two-pass reference update: predictions for the whole set first,
    then the summed multiplicative rule. Used by the self-test as the
    slow counterpart of the interleaved scheme."""
    labels = one_hot(dataset.labels, model.num_classes, dtype=np.float64)
    sigma = model.leaves.distributions().astype(np.float64)
    total = np.zeros(model.leaves.logits.shape, dtype=np.float64)
    for start in range(0, len(dataset), batch_size):
        y = labels[start:start + batch_size]
        y_hat, trace = model.predict_batch(dataset.images[start:start + batch_size])
        weights = y / np.maximum(y_hat.values, PREDICTION_FLOOR)
        total += sigma * (trace.leaf_probabilities.values.T @ weights)
    return total
