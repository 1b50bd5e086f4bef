"""Personalised classifier trained on the actively labelled windows."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn, params
from .dataset import SensorWindow
from .encoder import ConvBackend, EncoderModel, StatisticalBackend, extract_stat_features
from .errors import ConfigError, DataError, PipelineError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FineTuneConfig:
    epochs: int = 50
    batch_size: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 5
    validation_fraction: float = 0.1  # 0 disables validation and early stopping
    unfreeze_encoder: bool = True
    hidden: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ConfigError("finetune epochs, batch_size and hidden must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in [0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")


class FineTuneHead:
    """Dense(hidden) + ReLU + Dense(one unit per class); softmax applied on output."""

    def __init__(self, n_in: int, labels: Sequence[str], hidden: int = 1024, seed: int = 0):
        self.labels = tuple(labels)
        rng = np.random.default_rng(seed)
        self.net = nn.Sequential(
            [nn.Dense(n_in, hidden, rng), nn.ReLU(), nn.Dense(hidden, len(self.labels), rng)],
            ["fc1", "relu", "out"])

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x)

    def probabilities(self, x: np.ndarray) -> np.ndarray:
        return nn.softmax(self.net.forward(x))


def build_head(labeled_samples, n_in: int, hidden: int = 1024, seed: int = 0) -> FineTuneHead:
    if not labeled_samples:
        raise PipelineError("cannot build a classification head without labelled samples")
    labels = sorted({label for _, label in labeled_samples})
    return FineTuneHead(n_in, labels, hidden, seed)


def split_validation(labels: Sequence[str], fraction: float, rng: np.random.Generator):
    """Stratified hold-out that never takes a class's last training sample.

    When no class has a sample to spare the hold-out is drawn at random
    instead, which may leave a class without training data; ``fine_tune``
    reports that case. Returns ``(train_idx, val_idx)``.
    """
    n = len(labels)
    if fraction == 0:
        return np.arange(n), np.arange(0)
    if n < 2:
        raise PipelineError("validation split needs at least 2 labelled samples")
    classes = sorted(set(labels))
    by_class = {c: [i for i, l in enumerate(labels) if l == c] for c in classes}
    n_val = max(1, int(round(fraction * n)))
    quota = {c: 0 for c in classes}
    for _ in range(n_val):
        open_ = [c for c in classes if quota[c] < len(by_class[c]) - 1]
        if not open_:
            break
        # class furthest below its proportional share; label order breaks ties
        c = max(open_, key=lambda c: fraction * len(by_class[c]) - quota[c])
        quota[c] += 1
    if sum(quota.values()) == 0:
        val = np.sort(rng.choice(n, size=min(n_val, n - 1), replace=False))
        return np.setdiff1d(np.arange(n), val), val
    val = []
    for c in classes:
        if quota[c]:
            val.extend(rng.choice(by_class[c], size=quota[c], replace=False).tolist())
    val = np.sort(np.array(val, dtype=int))
    train = np.setdiff1d(np.arange(n), val)
    return train, val


class Classifier:
    """Encoder backend, input standardisation and a fine-tuned head."""

    def __init__(self, backend, head: FineTuneHead, in_mean: np.ndarray, in_scale: np.ndarray):
        self.backend = backend
        self.head = head
        self.in_mean = in_mean
        self.in_scale = in_scale
        self.history: dict = {}

    @property
    def labels(self) -> tuple:
        return self.head.labels

    def _inputs(self, windows: Sequence[SensorWindow]) -> np.ndarray:
        if isinstance(self.backend, ConvBackend):
            x = np.stack([w.values for w in windows])
            emb = self.backend.model.forward(x, training=False)
        else:
            emb = np.stack([extract_stat_features(w) for w in windows])
        return (emb - self.in_mean) / self.in_scale

    def predict_proba(self, windows: Sequence[SensorWindow], chunk: int = 256) -> np.ndarray:
        if not windows:
            return np.zeros((0, self.head.n_classes))
        return np.concatenate([self.head.probabilities(self._inputs(windows[i:i + chunk]))
                               for i in range(0, len(windows), chunk)])

    def predict_batch(self, windows: Sequence[SensorWindow]) -> list[tuple[str, float]]:
        proba = self.predict_proba(windows)
        idx = proba.argmax(axis=1)
        return [(self.labels[i], float(proba[k, i])) for k, i in enumerate(idx)]

    def _state(self) -> dict:
        state = {"head." + k: v.copy() for k, v in self.head.net.named_params()}
        if isinstance(self.backend, ConvBackend):
            state.update({"encoder." + k: v.copy() for k, v in self.backend.model.net.named_params()})
        return state

    def _restore(self, state: dict):
        self.head.net.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("head.")})
        if isinstance(self.backend, ConvBackend):
            self.backend.model.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("encoder.")})

    def save(self, path):
        tensors = self._state()
        tensors["input.mean"] = self.in_mean
        tensors["input.scale"] = self.in_scale
        meta = {"labels": list(self.labels), "backend": self.backend.name,
                "hidden": int(self.head.net.layers[0].params["W"].shape[1])}
        if isinstance(self.backend, ConvBackend):
            m = self.backend.model
            meta.update(filters=list(m.filters), kernels=list(m.kernels), dropout=m.dropout,
                        center_input=m.center_input)
        params.save(path, "classifier", tensors, meta)

    @classmethod
    def load(cls, path) -> "Classifier":
        tensors, meta = params.load(path, "classifier")
        if meta["backend"] == "conv":
            backend = ConvBackend(EncoderModel(meta["filters"], meta["kernels"], meta["dropout"], seed=None,
                                               center_input=meta.get("center_input", True)))
        else:
            backend = StatisticalBackend()
        n_in = tensors["input.mean"].shape[0]
        head = FineTuneHead(n_in, meta["labels"], meta["hidden"], seed=0)
        clf = cls(backend, head, tensors["input.mean"], tensors["input.scale"])
        try:
            clf._restore(tensors)
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: parameters do not fit the declared architecture ({exc})") from None
        return clf


def predict(classifier: Classifier, window: SensorWindow) -> tuple[str, float]:
    """Most probable label (smallest class index on ties) and its probability."""
    return classifier.predict_batch([window])[0]


def fine_tune(backend, labeled_samples, config: FineTuneConfig = FineTuneConfig()) -> Classifier:
    """Train the head (and, for the conv backend, the encoder) with Adam on cross-entropy.

    Validation loss is checked once per epoch; training stops after
    ``patience`` epochs without improvement and the best-validation
    parameters are restored.
    """
    if not labeled_samples:
        raise PipelineError("fine-tuning needs at least one labelled sample")
    windows = [w for w, _ in labeled_samples]
    labels = [l for _, l in labeled_samples]
    rng = np.random.default_rng([config.seed, 3])
    train_idx, val_idx = split_validation(labels, config.validation_fraction, rng)
    missing = sorted(set(labels) - {labels[i] for i in train_idx})
    if missing:
        raise PipelineError(f"class {missing[0]!r} has zero training samples after the validation split")

    conv = isinstance(backend, ConvBackend)
    if conv:
        backend = ConvBackend(backend.model.copy())
        train_encoder = config.unfreeze_encoder
        x_all = np.stack([w.values for w in windows])
        n_in = backend.dim
        in_mean, in_scale = np.zeros(n_in), np.ones(n_in)
    else:
        if config.unfreeze_encoder:
            log.info("statistical backend has no encoder to unfreeze; training the head only")
        train_encoder = False
        x_all = np.stack([extract_stat_features(w) for w in windows])
        n_in = x_all.shape[1]
        in_mean = x_all[train_idx].mean(axis=0)
        in_scale = x_all[train_idx].std(axis=0)
        in_scale = np.where(in_scale > 1e-8, in_scale, 1.0)

    head = build_head(labeled_samples, n_in, config.hidden, seed=config.seed)
    clf = Classifier(backend, head, in_mean, in_scale)
    y_all = np.array([head.labels.index(l) for l in labels])
    opt = nn.Adam(config.lr, config.beta1, config.beta2, config.adam_eps)

    if train_encoder:
        def forward(idx):
            emb = backend.model.forward(x_all[idx], training=False)
            return head.net.forward((emb - in_mean) / in_scale)
    else:
        feats = ((backend.model.forward(x_all) if conv else x_all) - in_mean) / in_scale

        def forward(idx):
            return head.net.forward(feats[idx])

    history = {"train_loss": [], "val_loss": []}
    best_loss, best_state, best_epoch, wait = np.inf, None, 0, 0
    for epoch in range(config.epochs):
        perm = train_idx[rng.permutation(len(train_idx))]
        losses = []
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s:s + config.batch_size]
            logits = forward(idx)
            loss, dlogits = nn.cross_entropy(logits, y_all[idx])
            demb = head.net.backward(dlogits)
            p = {"head." + k: v for k, v in head.net.named_params()}
            g = {"head." + k: v for k, v in head.net.named_grads()}
            if train_encoder:
                backend.model.net.backward(demb / in_scale)
                p.update({"enc." + k: v for k, v in backend.model.net.named_params()})
                g.update({"enc." + k: v for k, v in backend.model.net.named_grads()})
            opt.step(p, g)
            losses.append(loss * len(idx))
        history["train_loss"].append(float(np.sum(losses) / len(train_idx)))
        if len(val_idx):
            val_loss, _ = nn.cross_entropy(forward(val_idx), y_all[val_idx])
            history["val_loss"].append(val_loss)
            if val_loss < best_loss:
                best_loss, best_state, best_epoch, wait = val_loss, clf._state(), epoch, 0
            else:
                wait += 1
                if wait >= config.patience:
                    break
    if best_state is not None:
        clf._restore(best_state)
    history["epochs_run"] = len(history["train_loss"])
    history["best_epoch"] = best_epoch if len(val_idx) else history["epochs_run"] - 1
    history["val_indices"] = val_idx.tolist()
    clf.history = history
    return clf
