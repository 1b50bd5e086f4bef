"""Minimal numpy layers with hand-written backward passes.

Tensors are channels-last: a batch of sequences is ``(batch, time, channels)``.
Each layer caches what its backward pass needs during ``forward`` and
stores parameter gradients in ``self.grads`` under the same keys as
``self.params``.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv1D(Layer):
    """Valid (unpadded) stride-1 convolution. Weight shape: (kernel, in_channels, filters)."""

    def __init__(self, in_channels: int, filters: int, kernel: int, rng=None):
        super().__init__()
        self.kernel = kernel
        fan_in = kernel * in_channels
        W = kaiming_uniform(rng, (kernel, in_channels, filters), fan_in) if rng is not None \
            else np.zeros((kernel, in_channels, filters))
        self.params = {"W": W, "b": np.zeros(filters)}

    def forward(self, x, training=False):
        B, L, C = x.shape
        k = self.kernel
        if L < k:
            raise ValueError(f"sequence length {L} is shorter than kernel size {k}")
        # (B, L', C, k) -> (B, L', k, C)
        win = sliding_window_view(x, k, axis=1).transpose(0, 1, 3, 2)
        cols = win.reshape(B * (L - k + 1), k * C)
        W2 = self.params["W"].reshape(k * C, -1)
        out = cols @ W2 + self.params["b"]
        self._cache = (x.shape, cols)
        return out.reshape(B, L - k + 1, -1)

    def backward(self, dout):
        (B, L, C), cols = self._cache
        k = self.kernel
        Lo = L - k + 1
        F = dout.shape[-1]
        d2 = dout.reshape(B * Lo, F)
        W = self.params["W"]
        self.grads["W"] = (cols.T @ d2).reshape(W.shape)
        self.grads["b"] = d2.sum(axis=0)
        dcols = (d2 @ W.reshape(k * C, F).T).reshape(B, Lo, k, C)
        dx = np.zeros((B, L, C))
        for j in range(k):
            dx[:, j:j + Lo, :] += dcols[:, :, j, :]
        return dx


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng=None):
        super().__init__()
        W = kaiming_uniform(rng, (n_in, n_out), n_in) if rng is not None else np.zeros((n_in, n_out))
        self.params = {"W": W, "b": np.zeros(n_out)}

    def forward(self, x, training=False):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        x = self._x
        self.grads["W"] = x.reshape(-1, x.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
        self.grads["b"] = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
        return dout @ self.params["W"].T


class ReLU(Layer):
    def forward(self, x, training=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class Dropout(Layer):
    """Inverted dropout; the identity outside training."""

    def __init__(self, rate: float, rng: np.random.Generator):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self.rng = rng
        self._mask = None

    def forward(self, x, training=False):
        if not training or self.rate == 0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


class GlobalMaxPool1D(Layer):
    """Max over the time axis; gradient goes to the first arg-max."""

    def forward(self, x, training=False):
        self._shape = x.shape
        self._idx = x.argmax(axis=1)
        return np.take_along_axis(x, self._idx[:, None, :], axis=1)[:, 0, :]

    def backward(self, dout):
        dx = np.zeros(self._shape)
        np.put_along_axis(dx, self._idx[:, None, :], dout[:, None, :], axis=1)
        return dx


class Sequential:
    def __init__(self, layers: list, names: list[str]):
        self.layers = layers
        self.names = names

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def named_params(self):
        for name, layer in zip(self.names, self.layers):
            for key, arr in layer.params.items():
                yield f"{name}.{key}", arr

    def named_grads(self):
        for name, layer in zip(self.names, self.layers):
            for key in layer.params:
                yield f"{name}.{key}", layer.grads[key]

    def state_dict(self) -> dict:
        return {k: v.copy() for k, v in self.named_params()}

    def load_state_dict(self, state: dict):
        for name, layer in zip(self.names, self.layers):
            for key in layer.params:
                src = state[f"{name}.{key}"]
                if src.shape != layer.params[key].shape:
                    raise ValueError(f"{name}.{key}: expected shape {layer.params[key].shape}, got {src.shape}")
                layer.params[key] = np.array(src, dtype=float)


# ---------------------------------------------------------------- losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), targets].mean()
    d = np.exp(logp)
    d[np.arange(n), targets] -= 1.0
    return float(loss), d / n


def nt_xent(view_a: np.ndarray, view_b: np.ndarray, temperature: float):
    """NT-Xent contrastive loss over 2N samples, with gradients for both views.

    Row i of ``view_a`` and row i of ``view_b`` are positives; every other
    sample in the joint batch is a negative. Similarity is cosine; each
    anchor's denominator runs over the 2N-1 other samples. The loss is the
    mean over all 2N anchors.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    a = np.asarray(view_a, dtype=float)
    b = np.asarray(view_b, dtype=float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] < 1:
        raise ValueError(f"views must be equal-shaped non-empty (N, d) batches, got {a.shape} and {b.shape}")
    n = a.shape[0]
    z = np.concatenate([a, b])
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding has no cosine similarity")
    zn = z / norms
    logits = zn @ zn.T / temperature
    np.fill_diagonal(logits, -np.inf)
    pos = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
    logp = log_softmax(logits)
    loss = -logp[np.arange(2 * n), pos].mean()

    g = np.exp(logp)
    g[np.arange(2 * n), pos] -= 1.0
    g /= 2 * n
    dzn = (g + g.T) @ zn / temperature
    dz = (dzn - zn * np.sum(zn * dzn, axis=1, keepdims=True)) / norms
    return float(loss), dz[:n], dz[n:]


# ------------------------------------------------------------ optimizers


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity = {}

    def step(self, params: dict, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        for k, p in params.items():
            g = grads[k]
            if self.momentum:
                v = self._velocity.get(k)
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[k] = v
                g = v
            p -= lr * g


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m = self._m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self._v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self._m[k], self._v[k] = m, v
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps))."""
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / max(total_steps, 1)))
