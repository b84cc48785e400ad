"""Dense feed-forward machinery with hand-derived gradients.

Everything is explicit: forward passes record the values backward needs, and
backward returns analytic parameter gradients plus the gradient with respect
to the input batch (so composed models can chain sub-networks). Updates are
functional: adam_apply returns a new network and optimizer state, leaving the
inputs untouched, which is what makes checkpoint retention and freeze
contracts trivial to reason about.

Convention for softmax outputs: the loss layer (cross_entropy) returns the
gradient with respect to the *logits*, and backward treats a softmax final
layer as fused, applying the upstream gradient directly to its
pre-activations. Softmax is therefore only valid as the last activation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, FormatError, ShapeError
from .numcore import Rng

ACTIVATIONS = ("sigmoid", "relu", "softmax", "linear")
PROB_CLAMP = 1e-12
CKPT_MAGIC = b"DSCK"
CKPT_VERSION = 1
_CKPT_HEADER = "<4sIQ"  # magic, version, descriptor byte length


@dataclass
class DenseLayer:
    weights: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"weights {self.weights.shape} and bias {self.bias.shape} do not align"
            )
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")


@dataclass
class NetworkParams:
    layers: list[DenseLayer]
    dropout: list[float] = field(default_factory=list)  # rate after layer i
    mode: str = "train"

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        if not self.dropout:
            self.dropout = [0.0] * (len(self.layers) - 1)
        if len(self.dropout) != len(self.layers) - 1:
            raise ShapeError(
                f"need one dropout rate per layer boundary "
                f"({len(self.layers) - 1}), got {len(self.dropout)}"
            )
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.weights.shape[1] != b.weights.shape[0]:
                raise ShapeError(
                    f"layer {i} output dim {a.weights.shape[1]} does not feed "
                    f"layer {i + 1} input dim {b.weights.shape[0]}"
                )
        for i, layer in enumerate(self.layers):
            if layer.activation == "softmax" and i != len(self.layers) - 1:
                raise ShapeError("softmax is only valid as the final activation")
        if any(not (0.0 <= p < 1.0) for p in self.dropout):
            raise ShapeError(f"dropout rates must lie in [0, 1), got {self.dropout}")
        if self.mode not in ("train", "infer"):
            raise ShapeError(f"mode must be train or infer, got {self.mode!r}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weights.shape[1]


def set_mode(net: NetworkParams, mode: str) -> NetworkParams:
    return replace(net, mode=mode)


def clone_network(net: NetworkParams) -> NetworkParams:
    layers = [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in net.layers]
    return NetworkParams(layers, list(net.dropout), net.mode)


def parameter_count(net: NetworkParams) -> int:
    return sum(l.weights.size + l.bias.size for l in net.layers)


def dense_network(dims, activations, dropout=None, seed: int = 0,
                  mode: str = "train") -> NetworkParams:
    """Glorot-uniform initialized network: dims [d0, d1, ..., dk], k layers."""
    if len(dims) < 2 or len(activations) != len(dims) - 1:
        raise ShapeError(
            f"need len(dims) - 1 activations, got dims {list(dims)} and {list(activations)}"
        )
    rng = Rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(dims, dims[1:], activations):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform((fan_in, fan_out)) * (2.0 * bound) - bound
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return NetworkParams(layers, list(dropout) if dropout else None, mode)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        e = np.exp(z[~pos])
        out[~pos] = e / (1.0 + e)
        return out
    if kind == "softmax":
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    return z


@dataclass
class ForwardCache:
    net: NetworkParams
    x: np.ndarray
    inputs: list  # input seen by each layer (post-dropout of the previous)
    pre: list  # pre-activations z
    post: list  # activations before dropout
    masks: list  # inverted-dropout masks (None where no dropout applied)


def forward(net: NetworkParams, x, rng: Rng | None = None) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a batch; the cache feeds backward().

    Dropout uses inverted scaling (mask / (1 - p)) and fires only in train
    mode; an rng is then required for any nonzero rate.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"input batch must be 2-D, got shape {x.shape}")
    if x.shape[1] != net.in_dim:
        raise ShapeError(f"input dim {x.shape[1]} != network input dim {net.in_dim}")
    inputs, pre, post, masks = [], [], [], []
    h = x
    for i, layer in enumerate(net.layers):
        inputs.append(h)
        z = h @ layer.weights + layer.bias
        a = _activate(z, layer.activation)
        pre.append(z)
        post.append(a)
        rate = net.dropout[i] if i < len(net.layers) - 1 else 0.0
        if rate > 0.0 and net.mode == "train":
            if rng is None:
                raise ContractError("training forward with dropout needs an rng")
            mask = (rng.uniform(a.shape) >= rate) / (1.0 - rate)
            masks.append(mask)
            h = a * mask
        else:
            masks.append(None)
            h = a
    return h, ForwardCache(net, x, inputs, pre, post, masks)


@dataclass
class GradBundle:
    weights: list  # per-layer dL/dW
    biases: list  # per-layer dL/db


def grad_zeros(net: NetworkParams) -> GradBundle:
    return GradBundle([np.zeros_like(l.weights) for l in net.layers],
                      [np.zeros_like(l.bias) for l in net.layers])


def grad_scale(g: GradBundle, s: float) -> GradBundle:
    return GradBundle([s * w for w in g.weights], [s * b for b in g.biases])


def grad_add(a: GradBundle, b: GradBundle) -> GradBundle:
    if len(a.weights) != len(b.weights):
        raise ShapeError("gradient bundles have different layer counts")
    return GradBundle([x + y for x, y in zip(a.weights, b.weights)],
                      [x + y for x, y in zip(a.biases, b.biases)])


def backward(net: NetworkParams, cache: ForwardCache, dout) -> tuple[GradBundle, np.ndarray]:
    """Analytic gradients for every parameter plus d(loss)/d(input batch).

    For a softmax final layer, dout must be the loss gradient with respect to
    the logits (the fused convention used by cross_entropy).
    """
    if cache.net is not net:
        raise ContractError("stale cache: it was produced by a different network value")
    g = np.asarray(dout, dtype=np.float64)
    if g.shape != cache.post[-1].shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {cache.post[-1].shape}")
    d_weights = [None] * len(net.layers)
    d_biases = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if cache.masks[i] is not None:
            g = g * cache.masks[i]
        if layer.activation == "relu":
            dz = g * (cache.pre[i] > 0.0)
        elif layer.activation == "sigmoid":
            a = cache.post[i]
            dz = g * a * (1.0 - a)
        else:  # softmax (fused) and linear both pass through
            dz = g
        d_weights[i] = cache.inputs[i].T @ dz
        d_biases[i] = dz.sum(axis=0)
        g = dz @ layer.weights.T
    return GradBundle(d_weights, d_biases), g


def cross_entropy(probs, onehot, weight: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean batch cross-entropy and its gradient with respect to the logits.

    loss = weight * mean_b( -sum_k y[b,k] log clamp(p[b,k]) )
    dlogits = weight * (p - y) / batch
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 2:
        raise ShapeError(f"probs {p.shape} and labels {y.shape} must be equal 2-D shapes")
    if np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-9:
        raise ContractError("probability rows must sum to 1")
    if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0)):
        raise DataError("label rows must be one-hot")
    clamped = np.clip(p, PROB_CLAMP, 1.0)
    batch = p.shape[0]
    loss = weight * float(-(y * np.log(clamped)).sum() / batch)
    return loss, weight * (p - y) / batch


def onehot(labels, n_classes: int = 2) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1 or (y.size and (y.min() < 0 or y.max() >= n_classes)):
        raise DataError(f"labels must be integers in [0, {n_classes})")
    out = np.zeros((y.size, n_classes))
    out[np.arange(y.size), y] = 1.0
    return out


# ---------------------------------------------------------------------------
# Adam.
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    beta1: float
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m_weights: list = field(default_factory=list)
    m_biases: list = field(default_factory=list)
    v_weights: list = field(default_factory=list)
    v_biases: list = field(default_factory=list)


def init_adam(net: NetworkParams, lr: float, beta1: float,
              beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    z = grad_zeros(net)
    return AdamState(lr, beta1, beta2, epsilon, 0,
                     z.weights, z.biases,
                     [w.copy() for w in z.weights], [b.copy() for b in z.biases])


def _adam_step(p, g, m, v, s: AdamState, t: int):
    m2 = s.beta1 * m + (1.0 - s.beta1) * g
    v2 = s.beta2 * v + (1.0 - s.beta2) * g * g
    m_hat = m2 / (1.0 - s.beta1**t)
    v_hat = v2 / (1.0 - s.beta2**t)
    return p - s.lr * m_hat / (np.sqrt(v_hat) + s.epsilon), m2, v2


def adam_apply(net: NetworkParams, grads: GradBundle,
               state: AdamState) -> tuple[NetworkParams, AdamState]:
    """One bias-corrected Adam update; returns fresh network and state."""
    if len(grads.weights) != len(net.layers):
        raise ShapeError("gradient bundle does not match network layer count")
    t = state.t + 1
    layers, mw, mb, vw, vb = [], [], [], [], []
    for i, layer in enumerate(net.layers):
        if grads.weights[i].shape != layer.weights.shape:
            raise ShapeError(f"layer {i} gradient shape mismatch")
        w, m1, v1 = _adam_step(layer.weights, grads.weights[i],
                               state.m_weights[i], state.v_weights[i], state, t)
        b, m2, v2 = _adam_step(layer.bias, grads.biases[i],
                               state.m_biases[i], state.v_biases[i], state, t)
        layers.append(DenseLayer(w, b, layer.activation))
        mw.append(m1)
        vw.append(v1)
        mb.append(m2)
        vb.append(v2)
    new_net = NetworkParams(layers, list(net.dropout), net.mode)
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.epsilon,
                          t, mw, mb, vw, vb)
    return new_net, new_state


# ---------------------------------------------------------------------------
# Checkpoints: header, canonical JSON descriptor, raw float64 parameters.
# Byte layout in docs/formats.md.
# ---------------------------------------------------------------------------


def checkpoint_bytes(net: NetworkParams, extra: dict | None = None) -> bytes:
    desc = {
        "layers": [
            {"in": l.weights.shape[0], "out": l.weights.shape[1], "activation": l.activation}
            for l in net.layers
        ],
        "dropout": list(net.dropout),
        "extra": extra or {},
    }
    blob = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode()
    out = [struct.pack(_CKPT_HEADER, CKPT_MAGIC, CKPT_VERSION, len(blob)), blob]
    for layer in net.layers:
        out.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(out)


def checkpoint_from_bytes(raw: bytes, origin: str = "checkpoint") -> tuple[NetworkParams, dict]:
    head = struct.calcsize(_CKPT_HEADER)
    if len(raw) < head:
        raise FormatError(f"{origin}: shorter than the checkpoint header")
    magic, version, desc_len = struct.unpack_from(_CKPT_HEADER, raw, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{origin}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{origin}: unsupported checkpoint version {version}")
    if len(raw) < head + desc_len:
        raise FormatError(f"{origin}: truncated descriptor")
    try:
        desc = json.loads(raw[head : head + desc_len])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{origin}: invalid descriptor JSON") from exc
    pos = head + desc_len
    layers = []
    for spec in desc["layers"]:
        n_in, n_out = int(spec["in"]), int(spec["out"])
        need = (n_in * n_out + n_out) * 8
        if len(raw) < pos + need:
            raise FormatError(f"{origin}: truncated parameter block")
        w = np.frombuffer(raw, dtype="<f8", count=n_in * n_out, offset=pos).reshape(n_in, n_out)
        pos += n_in * n_out * 8
        b = np.frombuffer(raw, dtype="<f8", count=n_out, offset=pos)
        pos += n_out * 8
        layers.append(DenseLayer(w.copy(), b.copy(), spec["activation"]))
    if pos != len(raw):
        raise FormatError(f"{origin}: {len(raw) - pos} trailing bytes after parameters")
    net = NetworkParams(layers, [float(p) for p in desc["dropout"]], mode="infer")
    return net, desc.get("extra", {})


def save_checkpoint(net: NetworkParams, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(net, extra))


def load_checkpoint(path) -> tuple[NetworkParams, dict]:
    """Load a saved network (in infer mode) and its extra metadata dict."""
    return checkpoint_from_bytes(Path(path).read_bytes(), origin=str(path))
