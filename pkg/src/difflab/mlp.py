"""A small fully-connected ReLU network with hand-written backprop and Adam."""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ConfigError
from .rng import as_stream

MAGIC = b"DLAB"
FORMAT_VERSION = 1
N_FOURIER = 8


def time_features(t, n, fourier=False):
    """Column(s) appended to the state: raw ``t`` and, optionally, 8 sin/cos pairs."""
    t = np.asarray(t, dtype=float)
    t = np.full((n, 1), float(t)) if t.ndim == 0 else t.reshape(n, 1)
    if not fourier:
        return t
    k = np.arange(1, N_FOURIER + 1)[None, :] * np.pi
    return np.concatenate([t, np.sin(k * t), np.cos(k * t)], axis=1)


class Mlp:
    """ReLU MLP on input ``[x; t]`` with identity output layer.

    ``widths`` lists every layer width including input and output, e.g.
    ``[d + 1, 128, 128, 128, d]``.
    """

    def __init__(self, widths, seed=0, fourier=False, zero=False):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ConfigError(f"bad layer widths {widths}")
        self.widths = widths
        self.fourier = fourier
        rng = as_stream(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            if zero:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @classmethod
    def for_dim(cls, d, hidden=(128, 128, 128), seed=0, fourier=False):
        n_in = d + 1 + (2 * N_FOURIER if fourier else 0)
        return cls([n_in, *hidden, d], seed=seed, fourier=fourier)

    @property
    def dim(self) -> int:
        return self.widths[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def inputs(self, x, t):
        x = np.asarray(x, dtype=float)
        x2 = x.reshape(-1, x.shape[-1]) if x.ndim else x.reshape(1, 1)
        feats = np.concatenate([x2, time_features(t, len(x2), self.fourier)], axis=1)
        if feats.shape[1] != self.widths[0]:
            raise ConfigError(f"input has {feats.shape[1]} features, network expects {self.widths[0]}")
        return feats

    def forward(self, h, cache=None):
        """Forward pass on a prepared input matrix; fills ``cache`` for :meth:`backward`."""
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if cache is not None:
                cache.append(h)
            z = h @ w + b
            h = z if i == last else np.maximum(z, 0.0)
        return h

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        out = self.forward(self.inputs(x, t))
        return out if x.ndim == 2 else out.reshape(x.shape)

    def backward(self, cache, grad_out):
        """Gradients of a scalar loss w.r.t. all parameters, given ``dL/d output``."""
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            h = cache[i]
            gw[i] = h.T @ g
            gb[i] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i].T) * (h > 0.0)
        return gw, gb

    def loss_and_grad(self, x, t, target):
        """Mean squared error ``mean_n ||f(x_n, t_n) - y_n||^2`` and its gradient."""
        cache = []
        pred = self.forward(self.inputs(x, t), cache)
        target = np.asarray(target, dtype=float).reshape(pred.shape)
        diff = pred - target
        n = len(diff)
        loss = float((diff**2).sum() / n)
        gw, gb = self.backward(cache, 2.0 * diff / n)
        return loss, gw, gb

    # flat parameter vector, for checkpoints and finite-difference checks
    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for w, b in zip(self.weights, self.biases) for p in (w, b)])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ConfigError(f"expected {self.n_params} parameters, got {flat.size}")
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = flat[pos:pos + b.size].copy()
            pos += b.size

    @staticmethod
    def flatten_grads(gw, gb) -> np.ndarray:
        return np.concatenate([p.ravel() for w, b in zip(gw, gb) for p in (w, b)])

    def copy(self) -> Mlp:
        other = Mlp(self.widths, fourier=self.fourier, zero=True)
        other.set_flat(self.get_flat())
        return other


class Adam:
    def __init__(self, n_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.step_count = 0

    def step(self, params, grad):
        self.step_count += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        mhat = self.m / (1 - self.beta1**self.step_count)
        vhat = self.v / (1 - self.beta2**self.step_count)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict:
        return {"step": self.step_count, "lr": self.lr}

    def save(self, path) -> None:
        np.savez(path, m=self.m, v=self.v, step=self.step_count,
                 hyper=np.array([self.lr, self.beta1, self.beta2, self.eps]))

    @classmethod
    def load(cls, path) -> Adam:
        with np.load(path) as z:
            lr, b1, b2, eps = z["hyper"]
            opt = cls(len(z["m"]), lr, b1, b2, eps)
            opt.m, opt.v, opt.step_count = z["m"].copy(), z["v"].copy(), int(z["step"])
        return opt


def save_checkpoint(path, model: Mlp, meta: dict | None = None) -> None:
    """Binary layout: ``DLAB``, u32 version, u32 layer count, u32 widths,
    u64 parameter count, f64 parameters, u32 JSON length, JSON metadata
    (all little-endian)."""
    meta = dict(meta or {})
    meta.setdefault("fourier", model.fourier)
    blob = json.dumps(meta, sort_keys=True).encode()
    flat = model.get_flat().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(model.widths)))
        fh.write(struct.pack(f"<{len(model.widths)}I", *model.widths))
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def load_checkpoint(path):
    """Return ``(model, meta)``; rejects foreign files and unknown versions."""
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        if data[:4] != MAGIC:
            raise ConfigError(f"{path}: not a checkpoint (bad magic)")
        version, n_layers = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        widths = list(struct.unpack_from(f"<{n_layers}I", data, pos))
        pos += 4 * n_layers
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        flat = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(float)
        pos += 8 * count
        (blob_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        meta = json.loads(data[pos:pos + blob_len].decode())
    except ConfigError:
        raise
    except (struct.error, ValueError) as exc:
        raise ConfigError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    model = Mlp(widths, fourier=bool(meta.get("fourier", False)), zero=True)
    model.set_flat(flat)
    return model, meta
