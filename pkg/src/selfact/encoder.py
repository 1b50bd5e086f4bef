"""Window embeddings: statistical features and a contrastively pre-trained 1D CNN."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn, params
from .dataset import SensorWindow
from .errors import ConfigError, DataError, PipelineError

log = logging.getLogger(__name__)

STAT_FEATURES = 18


# ------------------------------------------------------------ statistical


def extract_stat_features(window: SensorWindow) -> np.ndarray:
    """Per-axis mean, std, min, max and energy, then corr(x,y), corr(x,z), corr(y,z).

    Layout: ``[mean x3, std x3, min x3, max x3, energy x3, corr x3]``. Std is the
    population std; correlation is 0 whenever either axis is constant.
    """
    v = window.values
    mean = v.mean(axis=0)
    constant = np.ptp(v, axis=0) == 0
    centered = np.where(constant, 0.0, v - mean)
    std = np.sqrt((centered ** 2).mean(axis=0))
    energy = (v ** 2).mean(axis=0)
    corr = []
    for i, j in ((0, 1), (0, 2), (1, 2)):
        if constant[i] or constant[j]:
            corr.append(0.0)
        else:
            c = (centered[:, i] * centered[:, j]).mean() / (std[i] * std[j])
            corr.append(float(np.clip(c, -1.0, 1.0)))
    return np.concatenate([mean, std, v.min(axis=0), v.max(axis=0), energy, corr])


# ---------------------------------------------------------- augmentation


def random_rotation_matrix(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a normalised Gaussian quaternion."""
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def apply_rotation(window: SensorWindow, matrix: np.ndarray) -> SensorWindow:
    return SensorWindow(window.values @ np.asarray(matrix).T, window.user_id, window.start_index, window.oracle_label)


def random_rotation(window: SensorWindow, rng: np.random.Generator) -> SensorWindow:
    return apply_rotation(window, random_rotation_matrix(rng))


# ---------------------------------------------------------------- models


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 64
    base_lr: float = 0.1
    momentum: float = 0.9
    temperature: float = 0.1
    seed: int = 0
    filters: tuple = (32, 64, 96)
    kernels: tuple = (24, 16, 8)
    dropout: float = 0.1

    def __post_init__(self):
        if len(self.filters) != len(self.kernels) or not self.filters:
            raise ConfigError("encoder filters and kernels must be non-empty and equally long")
        if min(self.filters) < 1 or min(self.kernels) < 1:
            raise ConfigError("encoder filters and kernels must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError("encoder dropout must lie in [0, 1)")
        if self.epochs < 1:
            raise ConfigError("pretrain epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("pretrain batch_size must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0")


STANDARD_GRAVITY = 9.80665


def normalize_input(x: np.ndarray) -> np.ndarray:
    """Remove each window's per-axis mean and express it in units of g."""
    return (x - x.mean(axis=-2, keepdims=True)) / STANDARD_GRAVITY


class EncoderModel:
    """Three ReLU conv stages, dropout between them, global max pooling.

    With ``center_input`` each window is centred per axis and divided by g
    before the first convolution. Without it, rotated raw windows are
    dominated by gravity and pre-training collapses to a constant projection.
    """

    def __init__(self, filters=(32, 64, 96), kernels=(24, 16, 8), dropout=0.1, seed: int | None = 0,
                 center_input: bool = True):
        if len(filters) != len(kernels) or not filters:
            raise ConfigError("filters and kernels must be non-empty and equally long")
        self.filters = tuple(int(f) for f in filters)
        self.kernels = tuple(int(k) for k in kernels)
        self.dropout = float(dropout)
        self.center_input = bool(center_input)
        rng = np.random.default_rng(seed) if seed is not None else None
        drop_rng = np.random.default_rng(None if seed is None else [seed, 1])
        layers, names, in_ch = [], [], 3
        for i, (f, k) in enumerate(zip(self.filters, self.kernels)):
            if i:
                layers.append(nn.Dropout(self.dropout, drop_rng))
                names.append(f"drop{i}")
            layers += [nn.Conv1D(in_ch, f, k, rng), nn.ReLU()]
            names += [f"conv{i + 1}", f"relu{i + 1}"]
            in_ch = f
        layers.append(nn.GlobalMaxPool1D())
        names.append("pool")
        self.net = nn.Sequential(layers, names)
        self.loss_history: tuple = ()

    @property
    def embedding_dim(self) -> int:
        return self.filters[-1]

    @property
    def min_window_len(self) -> int:
        return sum(k - 1 for k in self.kernels) + 1

    def _check_len(self, length: int):
        if length < self.min_window_len:
            raise DataError(f"window_len {length} is too short for kernel sizes {self.kernels} "
                            f"(needs >= {self.min_window_len})")

    def forward(self, x: np.ndarray, training=False) -> np.ndarray:
        self._check_len(x.shape[1])
        if self.center_input:
            x = normalize_input(np.asarray(x, dtype=float))
        return self.net.forward(x, training)

    def encode_batch(self, windows: Sequence[SensorWindow], chunk: int = 256) -> np.ndarray:
        if not windows:
            return np.zeros((0, self.embedding_dim))
        x = np.stack([w.values for w in windows])
        return np.concatenate([self.forward(x[i:i + chunk]) for i in range(0, len(x), chunk)])

    def state_dict(self) -> dict:
        return self.net.state_dict()

    def load_state_dict(self, state: dict):
        self.net.load_state_dict(state)

    def copy(self) -> "EncoderModel":
        other = EncoderModel(self.filters, self.kernels, self.dropout, seed=None, center_input=self.center_input)
        other.load_state_dict(self.state_dict())
        other.loss_history = self.loss_history
        return other

    def save(self, path):
        params.save(path, "encoder", self.state_dict(),
                    {"filters": list(self.filters), "kernels": list(self.kernels), "dropout": self.dropout,
                     "center_input": self.center_input, "loss_history": list(self.loss_history)})

    @classmethod
    def load(cls, path, filters=None, kernels=None) -> "EncoderModel":
        tensors, meta = params.load(path, "encoder")
        if filters is not None and tuple(filters) != tuple(meta["filters"]) or \
                kernels is not None and tuple(kernels) != tuple(meta["kernels"]):
            raise DataError(f"{path}: architecture filters={meta['filters']} kernels={meta['kernels']} "
                            f"does not match the requested one")
        model = cls(meta["filters"], meta["kernels"], meta["dropout"], seed=None,
                    center_input=meta.get("center_input", True))
        try:
            model.load_state_dict(tensors)
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: parameters do not fit the declared architecture ({exc})") from None
        model.loss_history = tuple(meta.get("loss_history", ()))
        return model


def encode(model: EncoderModel, window: SensorWindow) -> np.ndarray:
    return model.forward(window.values[None])[0]


class ProjectionHead:
    """Dense layers used only while pre-training; ReLU between them."""

    def __init__(self, n_in: int, sizes=(256, 128, 50), seed: int = 0):
        rng = np.random.default_rng(seed)
        layers, names = [], []
        for i, n_out in enumerate(sizes):
            if i:
                layers.append(nn.ReLU())
                names.append(f"relu{i}")
            layers.append(nn.Dense(n_in, n_out, rng))
            names.append(f"fc{i + 1}")
            n_in = n_out
        self.net = nn.Sequential(layers, names)


def nt_xent_loss(view_a, view_b, temperature: float) -> float:
    return nn.nt_xent(view_a, view_b, temperature)[0]


def pretrain(windows: Sequence[SensorWindow], config: PretrainConfig = PretrainConfig(),
             encoder: EncoderModel | None = None) -> EncoderModel:
    """Contrastive pre-training with two randomly rotated views per window.

    SGD with a per-step cosine-decayed learning rate. Labels are ignored.
    The returned encoder carries ``loss_history`` (mean loss per epoch).
    """
    if not windows:
        raise DataError("pre-training needs at least one window")
    x = np.stack([w.values for w in windows])
    root = config.seed
    model = encoder.copy() if encoder is not None else \
        EncoderModel(config.filters, config.kernels, config.dropout, seed=root)
    model._check_len(x.shape[1])
    head = ProjectionHead(model.embedding_dim, seed=root + 7919)
    order_rng = np.random.default_rng([root, 11])
    aug_rng = np.random.default_rng([root, 13])
    opt = nn.SGD(config.base_lr, config.momentum)

    n = len(x)
    bs = min(config.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = config.epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        losses = []
        for s in range(steps_per_epoch):
            idx = perm[s * bs:(s + 1) * bs]
            batch = x[idx]
            ra = np.stack([random_rotation_matrix(aug_rng) for _ in idx])
            rb = np.stack([random_rotation_matrix(aug_rng) for _ in idx])
            views = np.concatenate([np.einsum("blc,bdc->bld", batch, ra), np.einsum("blc,bdc->bld", batch, rb)])
            emb = model.forward(views, training=True)
            proj = head.net.forward(emb, training=True)
            k = len(idx)
            try:
                loss, ga, gb = nn.nt_xent(proj[:k], proj[k:], config.temperature)
            except ValueError as exc:
                raise PipelineError(f"pre-training diverged at epoch {epoch + 1}: {exc}") from None
            demb = head.net.backward(np.concatenate([ga, gb]))
            model.net.backward(demb)
            lr = nn.cosine_lr(config.base_lr, step, total)
            p = dict(model.net.named_params())
            g = dict(model.net.named_grads())
            p.update({"head." + k_: v for k_, v in head.net.named_params()})
            g.update({"head." + k_: v for k_, v in head.net.named_grads()})
            opt.step(p, g, lr=lr)
            losses.append(loss)
            step += 1
        if not np.isfinite(np.mean(losses)):
            raise PipelineError(f"pre-training diverged at epoch {epoch + 1}")
        history.append(float(np.mean(losses)))
        log.debug("pretrain epoch %d/%d loss %.4f", epoch + 1, config.epochs, history[-1])
    model.loss_history = tuple(history)
    model.steps = step
    return model


# --------------------------------------------------------------- backends


class StatisticalBackend:
    name = "statistical"
    dim = STAT_FEATURES

    def embed(self, window: SensorWindow) -> np.ndarray:
        return extract_stat_features(window)

    def embed_batch(self, windows: Sequence[SensorWindow]) -> np.ndarray:
        if not windows:
            return np.zeros((0, self.dim))
        return np.stack([extract_stat_features(w) for w in windows])


class ConvBackend:
    name = "conv"

    def __init__(self, model: EncoderModel):
        self.model = model
        self.dim = model.embedding_dim

    def embed(self, window: SensorWindow) -> np.ndarray:
        return encode(self.model, window)

    def embed_batch(self, windows: Sequence[SensorWindow]) -> np.ndarray:
        return self.model.encode_batch(windows)
