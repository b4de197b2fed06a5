"""Dense feed-forward nets with hand-written backprop, Adam, and soft target updates."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MAGIC = b"DNET1\n"


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class DenseNet:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        if self.hidden_activation != "relu":
            raise ValueError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation not in ("sigmoid", "identity"):
            raise ValueError(f"unsupported output activation {self.output_activation!r}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer_dims and parameter lists disagree")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[k], self.layer_dims[k + 1]) or b.shape != (self.layer_dims[k + 1],):
                raise ValueError(f"layer {k} has shapes {w.shape}, {b.shape}")
        # all parameters live in one flat buffer; weights/biases are views into it
        parts = self.params()
        self.flat = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])
        views, off = [], 0
        for p in parts:
            views.append(self.flat[off:off + p.size].reshape(p.shape))
            off += p.size
        self.weights, self.biases = views[0::2], views[1::2]
        if not np.all(np.isfinite(self.flat)):
            raise ValueError("parameters must be finite")

    @classmethod
    def create(cls, layer_dims, rng: np.random.Generator | None = None,
               output_activation: str = "sigmoid", zero: bool = False) -> "DenseNet":
        """Glorot-uniform weights, zero biases; ``zero=True`` gives an all-zero net."""
        dims = [int(d) for d in layer_dims]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            if zero:
                weights.append(np.zeros((fan_in, fan_out)))
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(dims, weights, biases, "relu", output_activation)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(list(self.layer_dims), [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.hidden_activation, self.output_activation)

    def forward_cached(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.layer_dims[0]:
            raise ValueError(f"input has {h.shape[1]} features, net expects {self.layer_dims[0]}")
        acts = [h]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if k < last:
                h = np.maximum(z, 0.0)
            else:
                h = sigmoid(z) if self.output_activation == "sigmoid" else z
            acts.append(h)
        return (h[0] if single else h), (acts, single)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def backward(self, cache, upstream: np.ndarray) -> list[np.ndarray]:
        """Gradients of ``sum(upstream * output)`` for every parameter, ordered like :meth:`params`."""
        acts, single = cache
        g = np.asarray(upstream, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ValueError(f"upstream gradient shape {g.shape} != output shape {acts[-1].shape}")
        out = acts[-1]
        if self.output_activation == "sigmoid":
            g = g * out * (1.0 - out)
        grads: list[np.ndarray] = []
        for k in range(len(self.weights) - 1, -1, -1):
            h_in = acts[k]
            grads.append(g.sum(axis=0))
            grads.append(h_in.T @ g)
            if k > 0:
                g = (g @ self.weights[k].T) * (h_in > 0)
        grads.reverse()  # now [W0, b0, W1, b1, ...]
        return grads


@dataclass
class OptimState:
    """Adam moments for one net, laid out like ``DenseNet.flat``."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: DenseNet, learning_rate: float = 1e-3, **kw) -> "OptimState":
        return cls(np.zeros_like(net.flat), np.zeros_like(net.flat), 0, learning_rate, **kw)


def opt_step(net: DenseNet, state: OptimState, grads: list[np.ndarray]):
    params = net.params()
    if len(grads) != len(params):
        raise ValueError(f"expected {len(params)} gradient arrays, got {len(grads)}")
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient {k} has shape {np.shape(g)}, parameter has {p.shape}")
    g = np.concatenate([np.ravel(x) for x in grads])
    if not np.isfinite(g).all():
        for k, x in enumerate(grads):
            bad = int(np.size(x) - np.isfinite(x).sum())
            if bad:
                raise FloatingPointError(f"non-finite gradient in parameter {k} ({bad} entries) at step {state.step}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    m, v = state.m, state.v
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    net.flat -= state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.eps)


def soft_update(target: DenseNet, online: DenseNet, lam: float):
    """``target <- (1 - lam) * online + lam * target``; lam=0 copies, lam=1 freezes."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if target.layer_dims != online.layer_dims or target.output_activation != online.output_activation:
        raise ValueError("soft_update needs identical architectures")
    if lam == 0.0:
        target.flat[...] = online.flat
    elif lam != 1.0:
        target.flat *= lam
        target.flat += (1.0 - lam) * online.flat


# --------------------------------------------------------------------------- snapshots

def net_to_bytes(net: DenseNet, extra: dict | None = None) -> bytes:
    header = {"layer_dims": net.layer_dims, "hidden": net.hidden_activation,
              "output": net.output_activation, **(extra or {})}
    buf = io.BytesIO()
    buf.write(_MAGIC)
    hb = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for p in net.params():
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


def net_from_bytes(blob: bytes) -> tuple[DenseNet, dict]:
    if not blob.startswith(_MAGIC):
        raise ValueError("not a DenseNet snapshot")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off:off + hlen])
    off += hlen
    dims = header["layer_dims"]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        for shape in ((fan_in, fan_out), (fan_out,)):
            n = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
            (weights if len(shape) == 2 else biases).append(arr)
    if off != len(blob):
        raise ValueError(f"snapshot has {len(blob) - off} trailing bytes")
    net = DenseNet(dims, weights, biases, header.pop("hidden"), header.pop("output"))
    header.pop("layer_dims")
    return net, header


def save_net(path: str | Path, net: DenseNet, extra: dict | None = None):
    Path(path).write_bytes(net_to_bytes(net, extra))


def load_net(path: str | Path) -> tuple[DenseNet, dict]:
    return net_from_bytes(Path(path).read_bytes())
