"""Single-hidden-layer MLP probes over cached representations.

The probe is a ReLU MLP with exactly one hidden layer, trained with
cross-entropy, AdamW-style decoupled weight decay, and a per-step learning
rate schedule: linear warmup over the first epoch (lr = 0 at step 0, peak at
the end of epoch 1) followed by linear decay to 0. Batches are drawn at the
representation level: a batch of n is n cached feature vectors, independent
of which documents they came from. The checkpoint with the best dev-split
metric is kept (token micro-F1 excluding O for typing probes, binary F1 for
the attention probes).

Forward and backward passes are written out explicitly in numpy, so the
analytic gradients can be checked against central finite differences.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigError, EmptyStoreError, TrainingDivergedError
from .model.serialization import MAGIC_PROBE, load_container, save_container
from .tap import TASK_TYPING, FeatureStore
from .validation import check_feature_matrix, check_labels

log = logging.getLogger(__name__)

HIDDEN_SIZES = (32, 1024, 4096)
LEARNING_RATES = (5e-4, 1e-4, 5e-5)
BATCH_RANGE = (1024, 4096)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 1024
    epochs: int = 25
    n_neurons: int = 1024
    weight_decay: float = 0.01
    warmup_epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lr not in LEARNING_RATES:
            raise ConfigError(f"lr must be one of {LEARNING_RATES}, got {self.lr}")
        if not BATCH_RANGE[0] <= self.batch_size <= BATCH_RANGE[1]:
            raise ConfigError(f"batch_size must lie in {BATCH_RANGE}")
        if self.n_neurons not in HIDDEN_SIZES:
            raise ConfigError(f"n_neurons must be one of {HIDDEN_SIZES}")
        if self.warmup_epochs != 1:
            raise ConfigError("warmup is fixed at one epoch")
        if self.epochs <= self.warmup_epochs:
            raise ConfigError("epochs must exceed the warmup epoch")


def lr_at_step(step: int, steps_per_epoch: int, total_steps: int, peak: float) -> float:
    """Linear warmup over epoch 1, then linear decay to zero."""
    warmup = steps_per_epoch
    if step < warmup:
        return peak * step / warmup
    if total_steps <= warmup:
        return peak
    return peak * max(0.0, 1.0 - (step - warmup) / (total_steps - warmup))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def mlp_forward(W1, b1, W2, b2, X):
    h = np.maximum(X @ W1 + b1, 0.0)
    return softmax(h @ W2 + b2), h


def mlp_loss(W1, b1, W2, b2, X, y) -> float:
    """Mean cross-entropy; the reference for finite-difference checks."""
    probs, _ = mlp_forward(W1, b1, W2, b2, X)
    return float(-np.mean(np.log(probs[np.arange(len(y)), y] + 1e-300)))


def mlp_loss_and_grads(W1, b1, W2, b2, X, y):
    """Analytic gradients of the mean cross-entropy loss."""
    n = len(X)
    probs, h = mlp_forward(W1, b1, W2, b2, X)
    loss = float(-np.mean(np.log(probs[np.arange(n), y] + 1e-300)))
    dz2 = probs.copy()
    dz2[np.arange(n), y] -= 1.0
    dz2 /= n
    gW2 = h.T @ dz2
    gb2 = dz2.sum(axis=0)
    dh = dz2 @ W2.T
    dh[h <= 0.0] = 0.0
    gW1 = X.T @ dh
    gb1 = dh.sum(axis=0)
    return loss, (gW1, gb1, gW2, gb2)


class _AdamW:
    def __init__(self, shapes, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0
        self.wd = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params, grads, lr, decay_mask):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v, decay in zip(params, grads, self.m, self.v, decay_mask):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if decay:
                update = update + self.wd * p
            p -= lr * update


class ProbeClassifier(BaseEstimator):
    """sklearn-style estimator wrapping the numpy MLP probe."""

    def __init__(self, n_neurons=1024, lr=1e-4, batch_size=1024, epochs=25,
                 weight_decay=0.01, warmup_epochs=1, seed=0, metric="auto"):
        self.n_neurons = n_neurons
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.seed = seed
        self.metric = metric

    def _config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
            n_neurons=self.n_neurons, weight_decay=self.weight_decay,
            warmup_epochs=self.warmup_epochs, seed=self.seed,
        )

    def _metric_fn(self, n_classes: int):
        name = self.metric
        if name == "auto":
            name = "binary_f1" if n_classes == 2 else "micro_f1_non_o"
        return name, METRICS[name]

    def fit(self, X, y, X_dev=None, y_dev=None, n_classes: int | None = None):
        cfg = self._config()
        X = check_feature_matrix(X)
        y = check_labels(y)
        if len(X) == 0:
            raise EmptyStoreError("cannot fit a probe on zero records")
        if len(X) != len(y):
            raise ValueError("X and y disagree on record count")
        if n_classes is None:
            n_classes = int(y.max()) + 1
        if n_classes < 2:
            raise ConfigError("probes need at least 2 classes")
        have_dev = X_dev is not None and y_dev is not None and len(X_dev) > 0
        if have_dev:
            X_dev = check_feature_matrix(X_dev, X.shape[1])
            y_dev = check_labels(y_dev, n_classes)
        rng = np.random.default_rng(cfg.seed)
        d_in, d_h = X.shape[1], cfg.n_neurons
        W1 = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_h))
        b1 = np.zeros(d_h)
        W2 = rng.normal(0.0, np.sqrt(2.0 / d_h), size=(d_h, n_classes))
        b2 = np.zeros(n_classes)
        params = [W1, b1, W2, b2]
        opt = _AdamW([p.shape for p in params], cfg.weight_decay)
        decay_mask = [True, False, True, False]

        batch = min(cfg.batch_size, len(X))
        steps_per_epoch = (len(X) + batch - 1) // batch
        total_steps = steps_per_epoch * cfg.epochs
        metric_name, metric_fn = self._metric_fn(n_classes)

        best = None
        history = []
        step = 0
        for epoch in range(cfg.epochs):
            perm = rng.permutation(len(X))
            epoch_loss = 0.0
            for s in range(steps_per_epoch):
                idx = perm[s * batch : (s + 1) * batch]
                loss, grads = mlp_loss_and_grads(*params, X[idx], y[idx])
                if not np.isfinite(loss):
                    raise TrainingDivergedError(step)
                opt.step(params, grads, lr_at_step(step, steps_per_epoch, total_steps, cfg.lr), decay_mask)
                epoch_loss += loss
                step += 1
            dev_score = None
            if have_dev:
                pred = np.argmax(self._proba_with(params, X_dev), axis=1)
                dev_score = metric_fn(y_dev, pred)
            history.append({
                "epoch": epoch,
                "train_loss": epoch_loss / steps_per_epoch,
                "dev_metric": dev_score,
            })
            if dev_score is not None and (best is None or dev_score > best[0]):
                best = (dev_score, epoch, [p.copy() for p in params])
        if best is not None:
            self.dev_metric_, self.best_epoch_, params = best
        else:
            self.dev_metric_, self.best_epoch_ = None, cfg.epochs - 1
        self.W1_, self.b1_, self.W2_, self.b2_ = params
        self.n_classes_ = n_classes
        self.in_dim_ = d_in
        self.history_ = history
        self.metric_name_ = metric_name
        return self

    @staticmethod
    def _proba_with(params, X):
        probs, _ = mlp_forward(*params, X)
        return probs

    def predict_proba(self, X) -> np.ndarray:
        if not hasattr(self, "W1_"):
            raise RuntimeError("probe is not fitted")
        X = check_feature_matrix(X, self.in_dim_)
        return self._proba_with([self.W1_, self.b1_, self.W2_, self.b2_], X)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X, y) -> float:
        y = check_labels(y, getattr(self, "n_classes_", None))
        return float(np.mean(self.predict(X) == y))


def micro_f1_non_o(y_true: np.ndarray, y_pred: np.ndarray, o_index: int = 0) -> float:
    """Token-level micro F1 over non-O classes (class 0 is O by convention)."""
    tp = int(np.sum((y_pred == y_true) & (y_true != o_index)))
    fp = int(np.sum((y_pred != o_index) & (y_pred != y_true)))
    fn = int(np.sum((y_true != o_index) & (y_pred != y_true)))
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 1.0
    return 2 * p * r / (p + r) if p + r else 0.0


def binary_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    return micro_f1_non_o(y_true, y_pred, o_index=0)


def accuracy(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    return float(np.mean(y_true == y_pred))


METRICS = {
    "micro_f1_non_o": micro_f1_non_o,
    "binary_f1": binary_f1,
    "accuracy": accuracy,
}


def train_probe(store: FeatureStore, cfg: TrainConfig) -> ProbeClassifier:
    """Fit a probe on a store's train split, checkpointing on the dev split."""
    X, y = store.train_arrays()
    if len(X) == 0:
        raise EmptyStoreError(f"store for task {store.task!r} has no trainable records")
    X_dev, y_dev = store.dev_arrays()
    probe = ProbeClassifier(
        n_neurons=cfg.n_neurons, lr=cfg.lr, batch_size=cfg.batch_size,
        epochs=cfg.epochs, weight_decay=cfg.weight_decay,
        warmup_epochs=cfg.warmup_epochs, seed=cfg.seed,
    )
    probe.fit(X, y, X_dev, y_dev, n_classes=len(store.labels))
    return probe


@dataclass
class SweepResult:
    best_layer: int
    scores: list[float]


def sweep_layers(stores_by_layer: list[FeatureStore], cfg: TrainConfig):
    """Train one typing probe per tap point; pick the best dev layer.

    Ties resolve to the lower layer index. Returns (result, probes).
    """
    if len(stores_by_layer) < 2:
        raise ValueError("layer sweep needs at least two tap points")
    scores, probes = [], []
    for store in stores_by_layer:
        probe = train_probe(store, cfg)
        score = probe.dev_metric_ if probe.dev_metric_ is not None else 0.0
        scores.append(float(score))
        probes.append(probe)
        log.info("layer %d dev metric %.4f", store.meta.get("layer", -1), score)
    best_layer = 0
    for l, s in enumerate(scores):
        if s > scores[best_layer]:
            best_layer = l
    return SweepResult(best_layer=best_layer, scores=scores), probes


@dataclass
class GridEntry:
    task: str
    layer: int
    cfg: TrainConfig
    dev_metric: float


def grid_search(
    stores: dict[str, FeatureStore],
    grid: list[TrainConfig],
    out_csv: str | Path | None = None,
):
    """Exhaustive (store x config) sweep; returns the best probe per task."""
    if not grid:
        raise ValueError("empty hyperparameter grid")
    rows: list[GridEntry] = []
    best: dict[str, tuple[ProbeClassifier, TrainConfig, float]] = {}
    for task, store in stores.items():
        for cfg in grid:
            probe = train_probe(store, cfg)
            metric = probe.dev_metric_ if probe.dev_metric_ is not None else 0.0
            rows.append(GridEntry(task, store.meta.get("layer", 0), cfg, float(metric)))
            if task not in best or metric > best[task][2]:
                best[task] = (probe, cfg, float(metric))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task", "layer", "n_neurons", "lr", "batch", "dev_metric"])
            for r in rows:
                w.writerow([r.task, r.layer, r.cfg.n_neurons, r.cfg.lr,
                            r.cfg.batch_size, f"{r.dev_metric:.6f}"])
    return best, rows


def save_probe(probe: ProbeClassifier, path: str | Path, meta: dict | None = None) -> None:
    info = {
        "params": probe.get_params(),
        "in_dim": probe.in_dim_,
        "n_classes": probe.n_classes_,
        "dev_metric": probe.dev_metric_,
        **(meta or {}),
    }
    arrays = [
        ("W1", probe.W1_), ("b1", probe.b1_),
        ("W2", probe.W2_), ("b2", probe.b2_),
    ]
    save_container(path, MAGIC_PROBE, info, arrays)


def load_probe(path: str | Path) -> tuple[ProbeClassifier, dict]:
    meta, arrays = load_container(path, expect_magic=MAGIC_PROBE)
    probe = ProbeClassifier(**meta["params"])
    probe.W1_ = arrays["W1"]
    probe.b1_ = arrays["b1"]
    probe.W2_ = arrays["W2"]
    probe.b2_ = arrays["b2"]
    probe.in_dim_ = int(meta["in_dim"])
    probe.n_classes_ = int(meta["n_classes"])
    probe.dev_metric_ = meta.get("dev_metric")
    probe.history_ = []
    return probe, meta
