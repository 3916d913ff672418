"""Layers with explicit forward/backward passes, on plain numpy arrays.

Activations flow as [batch, channels, length] arrays (or [batch, features]
after the flatten in the head). Each layer caches what its backward pass
needs; a layer instance therefore belongs to exactly one position in a
network and one in-flight batch.
"""

from __future__ import annotations

import numpy as np


class Parameter:
    """A trainable tensor together with its gradient buffer."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data: np.ndarray, name: str = ""):
        self.data = data
        self.grad = np.zeros_like(data)
        self.name = name

    @property
    def shape(self):
        return self.data.shape


def kaiming_normal(rng, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """He initialization: zero-mean normal with variance 2/fan_in."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Layer:
    def params(self) -> list[Parameter]:
        return []


class Embedding(Layer):
    """Character lookup table; index 0 is PAD and stays a frozen zero vector."""

    def __init__(self, vocab_size: int, dim: int, rng, dtype=np.float32):
        table = rng.normal(0.0, 1.0, size=(vocab_size, dim)).astype(dtype)
        table[0] = 0.0
        self.weight = Parameter(table, "embedding")
        self._idx = None

    def params(self):
        return [self.weight]

    def forward(self, idx: np.ndarray) -> np.ndarray:
        self._idx = idx
        return self.weight.data[idx].transpose(0, 2, 1)  # [B, dim, L]

    def backward(self, dout: np.ndarray) -> None:
        flat = dout.transpose(0, 2, 1).reshape(-1, dout.shape[1])
        np.add.at(self.weight.grad, self._idx.ravel(), flat)
        self.weight.grad[0] = 0.0  # PAD row frozen


class Conv1d(Layer):
    """1-D convolution, kernel 3, stride 1, padding 1 (length preserving)."""

    KERNEL = 3

    def __init__(self, in_channels: int, out_channels: int, rng, dtype=np.float32):
        fan_in = in_channels * self.KERNEL
        self.weight = Parameter(
            kaiming_normal(rng, (out_channels, in_channels, self.KERNEL), fan_in, dtype),
            "conv.weight",
        )
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), "conv.bias")
        self._cols = None
        self._in_shape = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, length = x.shape
        self._in_shape = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
        windows = np.lib.stride_tricks.sliding_window_view(xp, self.KERNEL, axis=2)
        # [B, C, L, K] -> [B*L, C*K]
        cols = windows.transpose(0, 2, 1, 3).reshape(b * length, c * self.KERNEL)
        self._cols = cols
        out_c = self.weight.data.shape[0]
        wf = self.weight.data.reshape(out_c, c * self.KERNEL)
        y = cols @ wf.T + self.bias.data
        return y.reshape(b, length, out_c).transpose(0, 2, 1)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        b, c, length = self._in_shape
        out_c = dout.shape[1]
        dflat = dout.transpose(0, 2, 1).reshape(b * length, out_c)
        wf = self.weight.data.reshape(out_c, c * self.KERNEL)
        self.weight.grad += (dflat.T @ self._cols).reshape(self.weight.data.shape)
        self.bias.grad += dflat.sum(axis=0)
        dcols = (dflat @ wf).reshape(b, length, c, self.KERNEL)
        dxp = np.zeros((b, c, length + 2), dtype=dout.dtype)
        for k in range(self.KERNEL):
            dxp[:, :, k : k + length] += dcols[:, :, :, k].transpose(0, 2, 1)
        return dxp[:, :, 1 : 1 + length]


class BatchNorm1d(Layer):
    """Per-channel batch normalization over (batch, length).

    Training normalizes with batch statistics (biased variance) and updates
    the running estimates; eval normalizes with the running estimates.
    """

    def __init__(self, channels: int, rng=None, dtype=np.float32,
                 eps: float = 1e-5, momentum: float = 0.1):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype), "bn.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), "bn.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if train:
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mean).astype(x.dtype)
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var).astype(x.dtype)
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
        self._cache = (xhat, inv_std, train)
        return self.gamma.data[None, :, None] * xhat + self.beta.data[None, :, None]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv_std, train = self._cache
        self.gamma.grad += (dout * xhat).sum(axis=(0, 2))
        self.beta.grad += dout.sum(axis=(0, 2))
        dxhat = dout * self.gamma.data[None, :, None]
        if not train:
            return dxhat * inv_std[None, :, None]
        m = dout.shape[0] * dout.shape[2]
        term = (
            m * dxhat
            - dxhat.sum(axis=(0, 2), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
        )
        return inv_std[None, :, None] * term / m


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dout, 0)


class MaxPool1d(Layer):
    """1x2 max-pool, stride 2, ceil mode: length L maps to ceil(L/2)."""

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, length = x.shape
        out_len = (length + 1) // 2
        if length % 2:
            pad_value = np.finfo(x.dtype).min
            x = np.pad(x, ((0, 0), (0, 0), (0, 1)), constant_values=pad_value)
        xr = x.reshape(b, c, out_len, 2)
        argmax = xr.argmax(axis=3)
        self._cache = (argmax, length)
        return np.take_along_axis(xr, argmax[..., None], axis=3)[..., 0]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        argmax, length = self._cache
        b, c, out_len = dout.shape
        dxr = np.zeros((b, c, out_len, 2), dtype=dout.dtype)
        np.put_along_axis(dxr, argmax[..., None], dout[..., None], axis=3)
        return dxr.reshape(b, c, 2 * out_len)[:, :, :length]


def kmax_pool(x: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest values per (batch, channel), in original order.

    Ties are broken in favor of earlier positions. Raises if the temporal
    length is shorter than k.
    """
    layer = KMaxPool(k)
    return layer.forward(x)


class KMaxPool(Layer):
    def __init__(self, k: int):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        length = x.shape[2]
        if length < self.k:
            raise ValueError(f"k-max pooling needs length >= k, got {length} < {self.k}")
        # Stable argsort of -x puts earlier positions first among ties.
        order = np.argsort(-x, axis=2, kind="stable")[:, :, : self.k]
        keep = np.sort(order, axis=2)  # restore original temporal order
        self._cache = (keep, length)
        return np.take_along_axis(x, keep, axis=2)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        keep, length = self._cache
        dx = np.zeros(dout.shape[:2] + (length,), dtype=dout.dtype)
        np.put_along_axis(dx, keep, dout, axis=2)  # kept indices are unique
        return dx


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout.reshape(self._shape)


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng, dtype=np.float32):
        self.weight = Parameter(
            kaiming_normal(rng, (out_features, in_features), in_features, dtype),
            "fc.weight",
        )
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), "fc.bias")
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, dout: np.ndarray) -> np.ndarray:
        self.weight.grad += dout.T @ self._x
        self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.data


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class SoftmaxCrossEntropy:
    """Mean softmax cross-entropy over a batch of logits."""

    def __init__(self):
        self._cache = None

    def forward(self, logits: np.ndarray, labels: np.ndarray) -> float:
        probs = softmax(logits)
        self._cache = (probs, labels)
        picked = probs[np.arange(len(labels)), labels]
        return float(-np.log(np.maximum(picked, np.finfo(probs.dtype).tiny)).mean())

    def backward(self) -> np.ndarray:
        probs, labels = self._cache
        d = probs.copy()
        d[np.arange(len(labels)), labels] -= 1.0
        return d / len(labels)
