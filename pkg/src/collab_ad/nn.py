"""Small dense feed-forward networks with hand-derived gradients.

Inputs are batched row-wise: an ``(n, in_dim)`` matrix produces an
``(n, out_dim)`` output.  A 1-D input is treated as a batch of one and the
result is returned 1-D again.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import CADError, TrainingError

ACTIVATIONS = ("relu", "tanh", "identity")


class ShapeError(CADError, ValueError):
    pass


class StaleTapeError(ShapeError):
    pass


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    # relu'(0) = 0 by convention
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return None


@dataclass
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "identity"
    dropout: float = 0.0
    mask: Optional[np.ndarray] = None  # same shape as weight, 0/1

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeError("bias length does not match weight columns")
        if self.mask is not None and self.mask.shape != self.weight.shape:
            raise ShapeError("mask shape does not match weight")

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def effective_weight(self):
        return self.weight if self.mask is None else self.weight * self.mask


@dataclass
class Tape:
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    drop: list = field(default_factory=list)
    squeeze: bool = False


def glorot(fan_in, fan_out, rng):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class DenseNet:
    def __init__(self, layers: Sequence[Dense]):
        layers = list(layers)
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for i in range(len(layers) - 1):
            if layers[i].out_dim != layers[i + 1].in_dim:
                raise ShapeError(
                    f"layer {i} outputs {layers[i].out_dim} but layer {i + 1} expects {layers[i + 1].in_dim}"
                )
        self.layers = layers

    @classmethod
    def build(
        cls,
        sizes: Sequence[int],
        activations: Sequence[str],
        rng: np.random.Generator,
        dropout: Optional[Sequence[float]] = None,
        masks: Optional[Sequence[Optional[np.ndarray]]] = None,
    ) -> "DenseNet":
        """``sizes`` lists widths from input to output; one activation per layer."""
        n = len(sizes) - 1
        if len(activations) != n:
            raise ValueError("need one activation per layer")
        dropout = list(dropout) if dropout is not None else [0.0] * n
        masks = list(masks) if masks is not None else [None] * n
        layers = []
        for i in range(n):
            W = glorot(sizes[i], sizes[i + 1], rng)
            layers.append(
                Dense(W, np.zeros(sizes[i + 1]), activations[i], float(dropout[i]),
                      None if masks[i] is None else np.asarray(masks[i], dtype=np.float64))
            )
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def params(self) -> list:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def set_params(self, values: Sequence[np.ndarray]):
        values = list(values)
        for i, layer in enumerate(self.layers):
            layer.weight[...] = values[2 * i]
            layer.bias[...] = values[2 * i + 1]

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Dense(l.weight.copy(), l.bias.copy(), l.activation, l.dropout,
                   None if l.mask is None else l.mask.copy()) for l in self.layers]
        )

    def forward(self, x, training: bool = False, rng: Optional[np.random.Generator] = None):
        """Return ``(output, tape)``.  Dropout is active only when ``training``."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x.reshape(1, -1) if squeeze else x
        if h.shape[1] != self.in_dim:
            raise ShapeError(f"input has {h.shape[1]} features, network expects {self.in_dim}")
        tape = Tape(squeeze=squeeze)
        for layer in self.layers:
            tape.inputs.append(h)
            z = h @ layer.effective_weight() + layer.bias
            a = _act(layer.activation, z)
            tape.pre.append(z)
            tape.post.append(a)
            m = None
            if training and layer.dropout > 0.0:
                if rng is None:
                    raise ValueError("training with dropout needs an rng")
                keep = 1.0 - layer.dropout
                m = (rng.random(a.shape) < keep) / keep
                a = a * m
            tape.drop.append(m)
            h = a
        return (h[0] if squeeze else h), tape

    def __call__(self, x):
        return self.forward(x, training=False)[0]

    def backward(self, tape: Tape, upstream):
        """Gradients of ``sum(upstream * output)``.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` aligned to
        :meth:`params`.
        """
        g = np.asarray(upstream, dtype=np.float64)
        if tape.squeeze:
            g = g.reshape(1, -1)
        if len(tape.inputs) != len(self.layers):
            raise StaleTapeError("tape was recorded on a different network")
        n = tape.inputs[0].shape[0]
        if g.shape != (n, self.out_dim):
            raise StaleTapeError(f"upstream gradient shape {g.shape} != {(n, self.out_dim)}")
        grads = [None] * (2 * len(self.layers))
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            h, z, a = tape.inputs[i], tape.pre[i], tape.post[i]
            if h.shape[1] != layer.in_dim or z.shape[1] != layer.out_dim:
                raise StaleTapeError(f"layer {i} shape changed since forward")
            if tape.drop[i] is not None:
                g = g * tape.drop[i]
            d = _act_grad(layer.activation, z, a)
            dz = g if d is None else g * d
            dW = h.T @ dz
            if layer.mask is not None:
                dW = dW * layer.mask
            grads[2 * i] = dW
            grads[2 * i + 1] = dz.sum(axis=0)
            g = dz @ layer.effective_weight().T
        return grads, (g[0] if tape.squeeze else g)


def scorer_net(in_dim: int, rng, out_dim: int = 1, hidden=(32, 32, 16), dropout=(0.5, 0.5, 0.3)) -> DenseNet:
    """The default scorer: ReLU hidden layers with dropout, linear output."""
    hidden = tuple(hidden)
    dropout = tuple(dropout) if dropout is not None else (0.0,) * len(hidden)
    if len(dropout) != len(hidden):
        raise ValueError("need one dropout rate per hidden layer")
    sizes = (in_dim, *hidden, out_dim)
    acts = ["relu"] * len(hidden) + ["identity"]
    return DenseNet.build(sizes, acts, rng, dropout=list(dropout) + [0.0])


class Optimizer:
    """SGD or bias-corrected Adam acting in place on a list of arrays."""

    def __init__(self, kind="adam", learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        if not learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        self.kind = kind
        self.learning_rate = float(learning_rate)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.t = 0
        self.m: list = []
        self.v: list = []

    def step(self, params: list, grads: list) -> list:
        if len(params) != len(grads):
            raise ShapeError("params and grads differ in length")
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != g.shape:
                raise ShapeError(f"gradient {i} has shape {g.shape}, parameter {p.shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter {i} (layer {i // 2})")
        if self.kind == "sgd":
            for p, g in zip(params, grads):
                p -= self.learning_rate * g
            return params
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params

    def state(self) -> dict:
        return {"kind": self.kind, "learning_rate": self.learning_rate, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps, "t": self.t}


# -- checkpoint container ----------------------------------------------------
#
# A checkpoint is a single ``.npz`` archive.  Entry ``__meta__`` holds a JSON
# document (as a 0-d unicode array); every other entry is a float64 array.
# Networks are stored under ``<prefix>.<i>.W`` / ``.b`` / ``.mask`` with their
# activation tags and dropout rates listed in the metadata.


def net_to_arrays(net: DenseNet, prefix: str) -> tuple[dict, dict]:
    arrays, layout = {}, []
    for i, l in enumerate(net.layers):
        arrays[f"{prefix}.{i}.W"] = l.weight
        arrays[f"{prefix}.{i}.b"] = l.bias
        if l.mask is not None:
            arrays[f"{prefix}.{i}.mask"] = l.mask
        layout.append({"activation": l.activation, "dropout": l.dropout, "masked": l.mask is not None})
    return arrays, {"layers": layout}


def net_from_arrays(arrays, prefix: str, meta: dict) -> DenseNet:
    layers = []
    for i, s in enumerate(meta["layers"]):
        layers.append(Dense(
            np.array(arrays[f"{prefix}.{i}.W"], dtype=np.float64),
            np.array(arrays[f"{prefix}.{i}.b"], dtype=np.float64),
            s["activation"], float(s["dropout"]),
            np.array(arrays[f"{prefix}.{i}.mask"], dtype=np.float64) if s["masked"] else None,
        ))
    return DenseNet(layers)


def optimizer_to_arrays(opt: Optimizer, prefix: str) -> tuple[dict, dict]:
    arrays = {}
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        arrays[f"{prefix}.m.{i}"] = m
        arrays[f"{prefix}.v.{i}"] = v
    meta = opt.state()
    meta["slots"] = len(opt.m)
    return arrays, meta


def optimizer_from_arrays(arrays, prefix: str, meta: dict) -> Optimizer:
    opt = Optimizer(meta["kind"], meta["learning_rate"], meta["beta1"], meta["beta2"], meta["eps"])
    opt.t = int(meta["t"])
    opt.m = [np.array(arrays[f"{prefix}.m.{i}"]) for i in range(meta["slots"])]
    opt.v = [np.array(arrays[f"{prefix}.v.{i}"]) for i in range(meta["slots"])]
    return opt


def save_checkpoint(path, arrays: dict, meta: dict):
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[dict, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {k: np.array(z[k]) for k in z.files if k != "__meta__"}
    return arrays, meta
