"""Minimal dense-network kernel: forward, exact reverse-mode backward,
stable log-softmax, losses, and Adam/SGD with decoupled weight decay.

Heads in this project are tiny (one hidden layer), so everything is plain
numpy float64. forward() returns a tape of cached activations; backward()
replays it for exact gradients. Inputs may be single vectors ``(d,)`` or
batches ``(n, d)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import read_sidecar, write_sidecar

ACTIVATIONS = ("relu", "identity")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("layer weight must be (out, in) with bias (out,)")


@dataclass
class Tape:
    """Cached per-layer inputs and pre-activations from one forward pass."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    single: bool  # input was a 1-D vector


class DenseNet:
    """A chain of affine layers with relu or identity activations."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("a net needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise ValueError("adjacent layer dimensions do not chain")
        for layer in layers:
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise ValueError("layer parameters must be finite")
        self.layers = layers

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list: [W0, b0, W1, b1, ...]. Arrays are live views."""
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def set_parameters(self, params: list[np.ndarray]) -> None:
        if len(params) != 2 * len(self.layers):
            raise ValueError("parameter count mismatch")
        for i, layer in enumerate(self.layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ValueError("parameter shape mismatch")
            layer.weight = np.array(w, dtype=np.float64)
            layer.bias = np.array(b, dtype=np.float64)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Tape]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(
                f"input dim mismatch: net expects {self.input_dim}, got {x.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite input")
        inputs, preacts = [], []
        h = x
        for layer in self.layers:
            inputs.append(h)
            z = h @ layer.weight.T + layer.bias
            preacts.append(z)
            h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        y = h[0] if single else h
        return y, Tape(inputs=inputs, preacts=preacts, single=single)

    def backward(self, tape: Tape, dy: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Exact gradients for dL/dy. Returns (grads aligned with
        parameters(), dL/dx)."""
        if len(tape.inputs) != len(self.layers):
            raise ValueError("tape does not match this net")
        dy = np.asarray(dy, dtype=np.float64)
        if tape.single:
            dy = dy[None, :]
        if dy.shape != tape.preacts[-1].shape:
            raise ValueError("upstream gradient shape does not match tape")
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))
        g = dy
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            z, h_in = tape.preacts[i], tape.inputs[i]
            if h_in.shape[1] != layer.weight.shape[1]:
                raise ValueError("tape does not match this net")
            dz = g * (z > 0) if layer.activation == "relu" else g
            grads[2 * i] = dz.T @ h_in
            grads[2 * i + 1] = dz.sum(axis=0)
            g = dz @ layer.weight
        dx = g[0] if tape.single else g
        return grads, dx

    def clone(self) -> "DenseNet":
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation)
                         for l in self.layers])


def glorot_uniform(out_dim: int, in_dim: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


def dense_net(dims: list[int], rng: np.random.Generator,
              hidden_activation: str = "relu") -> DenseNet:
    """Build a net with the given dimension chain; hidden layers use
    ``hidden_activation``, the last layer is linear. Biases start at zero."""
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    layers = []
    for i in range(len(dims) - 1):
        act = "identity" if i == len(dims) - 2 else hidden_activation
        layers.append(Layer(glorot_uniform(dims[i + 1], dims[i], rng),
                            np.zeros(dims[i + 1]), act))
    return DenseNet(layers)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax along the last axis."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def log_softmax_backward(z: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Given dL/d(log_softmax(z)), return dL/dz."""
    z = np.asarray(z, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    return g - p * g.sum(axis=-1, keepdims=True)


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def nll_loss(logp: np.ndarray, label: int) -> float:
    """Negative log likelihood of one label under a log-distribution."""
    logp = np.asarray(logp, dtype=np.float64)
    if not 0 <= label < logp.shape[-1]:
        raise ValueError(f"label {label} out of range for {logp.shape[-1]} classes")
    return float(-logp[label])


def mse_loss(pred: float, target: float) -> float:
    return float((pred - target) ** 2)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class Adam:
    """Adam with decoupled multiplicative weight decay.

    Update: p <- p * (1 - lr * weight_decay) - lr * m_hat / (sqrt(v_hat) + eps).
    With zero gradients the moments stay zero and only the decay applies.
    """

    lr: float = 1e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(params) != len(self.m) or len(params) != len(grads):
            raise ValueError("parameter/gradient count mismatch")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError("gradient shape mismatch")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class SGD:
    """Plain gradient descent with the same decoupled decay rule."""

    lr: float = 1e-5
    weight_decay: float = 0.01

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ValueError("parameter/gradient count mismatch")
        for p, g in zip(params, grads):
            if g.shape != p.shape:
                raise ValueError("gradient shape mismatch")
            p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * g


def make_optimizer(name: str, lr: float, weight_decay: float):
    if name == "adam":
        return Adam(lr=lr, weight_decay=weight_decay)
    if name == "sgd":
        return SGD(lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(net: DenseNet, x: np.ndarray, label: int,
                      h: float = 1e-6, grads: list[np.ndarray] | None = None) -> float:
    """Compare analytic gradients of nll(log_softmax(forward(x))) against
    central finite differences over every parameter.

    Returns the max deviation relative to the gradient's largest magnitude
    (per-entry relative error is floored near 5e-7 by float64 roundoff at
    this step size, so tiny entries are judged on the gradient's scale).
    ``grads`` overrides the analytic gradients, for fault-injection tests.
    """
    x = np.asarray(x, dtype=np.float64)

    def loss_value() -> float:
        y, _ = net.forward(x)
        return nll_loss(log_softmax(y), label)

    if grads is None:
        y, tape = net.forward(x)
        dy = log_softmax_backward(y, -_one_hot(label, net.output_dim))
        grads, _ = net.backward(tape, dy)

    worst = 0.0
    scale = 0.0
    for p, g in zip(net.parameters(), grads):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, abs(gflat[i] - numeric))
            scale = max(scale, abs(gflat[i]), abs(numeric))
    return worst / max(scale, 1e-12)


def _one_hot(label: int, dim: int) -> np.ndarray:
    out = np.zeros(dim)
    out[label] = 1.0
    return out


# ---------------------------------------------------------------------------
# Checkpoints: named tensors in the sidecar binary format + JSON metadata
# ---------------------------------------------------------------------------

def save_checkpoint(base_path, nets: dict[str, DenseNet], seed: int,
                    extra: dict | None = None) -> None:
    """Write ``<base>.json`` (layer dims, activations, tensor index, seed)
    and ``<base>.bin`` (all tensors flattened into one float32 sidecar)."""
    base = Path(base_path)
    tensors = []
    chunks = []
    offset = 0
    meta_nets = {}
    for name in nets:
        net = nets[name]
        meta_nets[name] = {
            "dims": [net.input_dim] + [l.weight.shape[0] for l in net.layers],
            "activations": [l.activation for l in net.layers],
        }
        for li, layer in enumerate(net.layers):
            for tname, arr in ((f"{name}/{li}/weight", layer.weight),
                               (f"{name}/{li}/bias", layer.bias)):
                flat = arr.reshape(-1)
                tensors.append({"name": tname, "shape": list(arr.shape),
                                "offset": offset, "size": int(flat.size)})
                chunks.append(flat)
                offset += flat.size
    payload = np.concatenate(chunks) if chunks else np.zeros(0)
    write_sidecar(base.with_suffix(".bin"), payload.reshape(-1, 1))
    meta = {
        "format": "poefuse-checkpoint",
        "version": 1,
        "seed": seed,
        "nets": meta_nets,
        "tensors": tensors,
        "bin_file": base.with_suffix(".bin").name,
    }
    if extra:
        meta["extra"] = extra
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n",
                                         encoding="utf-8")


def load_checkpoint(base_path) -> tuple[dict[str, DenseNet], dict]:
    """Inverse of save_checkpoint. Values come back float32-rounded."""
    base = Path(base_path)
    meta = json.loads(base.with_suffix(".json").read_text(encoding="utf-8"))
    if meta.get("format") != "poefuse-checkpoint":
        raise ValueError(f"{base}: not a checkpoint metadata file")
    flat = read_sidecar(base.parent / meta["bin_file"]).reshape(-1)
    tensors = {t["name"]: t for t in meta["tensors"]}
    nets = {}
    for name, spec in meta["nets"].items():
        dims, acts = spec["dims"], spec["activations"]
        layers = []
        for li in range(len(acts)):
            tw = tensors[f"{name}/{li}/weight"]
            tb = tensors[f"{name}/{li}/bias"]
            w = flat[tw["offset"]:tw["offset"] + tw["size"]].reshape(tw["shape"])
            b = flat[tb["offset"]:tb["offset"] + tb["size"]].reshape(tb["shape"])
            if list(w.shape) != [dims[li + 1], dims[li]]:
                raise ValueError(f"{base}: tensor {name}/{li} shape mismatch")
            layers.append(Layer(w, b, acts[li]))
        nets[name] = DenseNet(layers)
    return nets, meta
