"""Minimal float64 conv-net layers with explicit backward passes.

Everything operates on single frames laid out (C, H, W); the training loop
accumulates gradients across frames instead of batching tensors.  Layers
cache forward activations, so one layer instance serves one forward/backward
pair at a time.
"""

import numpy as np

from .errors import ContractError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LOGIT_CLIP = 30.0


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, scale: float = 1.0) -> np.ndarray:
    """Fan-in-scaled uniform init, optionally shrunk by ``scale``."""
    bound = scale * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2D:
    """kxk convolution via im2col; stride >= 1, 'same' padding for odd k."""

    def __init__(self, rng, cin: int, cout: int, ksize: int, stride: int = 1,
                 weight_scale: float = 1.0, bias_init: float = 0.0):
        self.cin, self.cout, self.ksize, self.stride = cin, cout, ksize, stride
        self.pad = (ksize - 1) // 2
        self.W = fan_in_uniform(rng, (cout, cin, ksize, ksize), cin * ksize * ksize,
                                weight_scale)
        self.b = np.full(cout, float(bias_init))
        self._cols = None
        self._in_shape = None

    def out_shape(self, h: int, w: int):
        ho = (h + 2 * self.pad - self.ksize) // self.stride + 1
        wo = (w + 2 * self.pad - self.ksize) // self.stride + 1
        return ho, wo

    def forward(self, x: np.ndarray) -> np.ndarray:
        c, h, w = x.shape
        if c != self.cin:
            raise ContractError(f"expected {self.cin} input channels, got {c}")
        k, s, p = self.ksize, self.stride, self.pad
        ho, wo = self.out_shape(h, w)
        xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
        cols = np.empty((c, k, k, ho, wo))
        for di in range(k):
            for dj in range(k):
                cols[:, di, dj] = xp[:, di:di + (ho - 1) * s + 1:s,
                                     dj:dj + (wo - 1) * s + 1:s]
        cols2 = cols.reshape(c * k * k, ho * wo)
        y = self.W.reshape(self.cout, -1) @ cols2 + self.b[:, None]
        self._cols = cols2
        self._in_shape = (h, w)
        return y.reshape(self.cout, ho, wo)

    def backward(self, dy: np.ndarray):
        """Returns (dx, dW, db) for the cached forward input."""
        h, w = self._in_shape
        k, s, p = self.ksize, self.stride, self.pad
        ho, wo = dy.shape[1:]
        dy2 = dy.reshape(self.cout, -1)
        dW = (dy2 @ self._cols.T).reshape(self.W.shape)
        db = dy2.sum(axis=1)
        dcols = (self.W.reshape(self.cout, -1).T @ dy2).reshape(
            self.cin, k, k, ho, wo)
        dxp = np.zeros((self.cin, h + 2 * p, w + 2 * p))
        for di in range(k):
            for dj in range(k):
                dxp[:, di:di + (ho - 1) * s + 1:s, dj:dj + (wo - 1) * s + 1:s] += dcols[:, di, dj]
        dx = dxp[:, p:p + h, p:p + w] if p else dxp
        return dx, dW, db


class BatchNorm2D:
    """Per-channel normalization over the spatial extent of one frame.

    In training mode statistics come from the current frame and the running
    estimates are updated; in inference mode (also used for frozen groups)
    the running estimates are applied and never touched.
    """

    def __init__(self, channels: int):
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._cache = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        if training:
            mu = x.mean(axis=(1, 2))
            var = x.var(axis=(1, 2))
            ivar = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x - mu[:, None, None]) * ivar[:, None, None]
            self.running_mean = (1 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * mu
            self.running_var = (1 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * var
        else:
            ivar = 1.0 / np.sqrt(self.running_var + BN_EPS)
            xhat = (x - self.running_mean[:, None, None]) * ivar[:, None, None]
        self._cache = (xhat, ivar, training, x.shape[1] * x.shape[2])
        return self.gamma[:, None, None] * xhat + self.beta[:, None, None]

    def backward(self, dy: np.ndarray):
        """Returns (dx, dgamma, dbeta)."""
        xhat, ivar, training, m = self._cache
        dgamma = (dy * xhat).sum(axis=(1, 2))
        dbeta = dy.sum(axis=(1, 2))
        dxhat = dy * self.gamma[:, None, None]
        if not training:
            return dxhat * ivar[:, None, None], dgamma, dbeta
        # batch statistics were part of the forward graph
        sum_dxhat = dxhat.sum(axis=(1, 2))[:, None, None]
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(1, 2))[:, None, None]
        dx = (ivar[:, None, None] / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        return dx, dgamma, dbeta


class ReLU:
    def __init__(self):
        self._mask = None
        self.last_margin = np.inf  # min |preactivation|, for kink-safe FD checks

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        self.last_margin = float(np.abs(x).min()) if x.size else np.inf
        return x * self._mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * self._mask


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically-safe logistic squash; logits clipped to +-LOGIT_CLIP."""
    zc = np.clip(z, -LOGIT_CLIP, LOGIT_CLIP)
    out = np.empty_like(zc)
    pos = zc >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-zc[pos]))
    ez = np.exp(zc[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_backward(dy: np.ndarray, f: np.ndarray, z: np.ndarray) -> np.ndarray:
    inside = np.abs(z) < LOGIT_CLIP
    return dy * f * (1.0 - f) * inside
