"""Dense feed-forward networks with hand-written backprop and Adam.

Parameters are float64 throughout. Weight matrices are stored as
``(input_width, output_width)`` so a batch ``x`` of shape ``(B, in)`` maps
to ``x @ W + b``.
"""

from __future__ import annotations

import enum
import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation, TrainingDivergenceError


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"
    TANH = "tanh"


@dataclass(frozen=True)
class LayerSpec:
    input_width: int
    output_width: int
    activation: Activation = Activation.RELU

    def __post_init__(self):
        if self.input_width < 1 or self.output_width < 1:
            raise ContractViolation(f"layer widths must be >= 1, got {self}")
        object.__setattr__(self, "activation", Activation(self.activation))


class Mlp:
    """A chain of dense layers.

    Build one with :meth:`Mlp.build`; the constructor takes explicit
    parameter arrays and is mostly used by tests and deserialization.
    """

    def __init__(self, layers: Sequence[LayerSpec], weights, biases):
        layers = list(layers)
        if not layers:
            raise ContractViolation("an Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.output_width != nxt.input_width:
                raise ContractViolation(f"layer widths do not chain: {prev} -> {nxt}")
        if len(weights) != len(layers) or len(biases) != len(layers):
            raise ContractViolation("one weight matrix and one bias vector per layer")
        self.layers = layers
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for spec, w, b in zip(self.layers, self.weights, self.biases):
            if w.shape != (spec.input_width, spec.output_width) or b.shape != (spec.output_width,):
                raise ContractViolation(
                    f"parameter shapes {w.shape}, {b.shape} do not match {spec}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ContractViolation("parameters must be finite")

    @classmethod
    def build(cls, widths: Sequence[int], rng: np.random.Generator,
              hidden: Activation = Activation.RELU,
              output: Activation = Activation.IDENTITY) -> "Mlp":
        """Uniform init in +-1/sqrt(fan_in) for weights and biases."""
        if len(widths) < 2:
            raise ContractViolation("need at least input and output widths")
        layers = []
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            act = output if k == len(widths) - 2 else hidden
            layers.append(LayerSpec(int(a), int(b), act))
        weights, biases = [], []
        for spec in layers:
            bound = 1.0 / np.sqrt(spec.input_width)
            weights.append(rng.uniform(-bound, bound, (spec.input_width, spec.output_width)))
            biases.append(rng.uniform(-bound, bound, spec.output_width))
        return cls(layers, weights, biases)

    @property
    def input_width(self) -> int:
        return self.layers[0].input_width

    @property
    def output_width(self) -> int:
        return self.layers[-1].output_width

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "Mlp":
        return Mlp(self.layers, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def __call__(self, x):
        return forward(self, x)

    def __repr__(self):
        widths = [self.layers[0].input_width] + [s.output_width for s in self.layers]
        return f"Mlp({widths}, out={self.layers[-1].activation.value})"


@dataclass
class Gradient:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, net: Mlp) -> "Gradient":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_net(cls, net: Mlp, learning_rate: float = 1e-4, **kw) -> "AdamState":
        if learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        params = net.params()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   learning_rate=learning_rate, **kw)


def _activate(act: Activation, z: np.ndarray) -> np.ndarray:
    if act is Activation.RELU:
        return np.maximum(z, 0.0)
    if act is Activation.TANH:
        return np.tanh(z)
    return z


def _check_input(net: Mlp, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_width:
        raise ContractViolation(f"input shape {x.shape} does not fit input width {net.input_width}")
    return x


def forward_trace(net: Mlp, x) -> list[np.ndarray]:
    """All layer outputs, input first; ``trace[-1]`` is the network output."""
    x = _check_input(net, x)
    trace = [x]
    for spec, w, b in zip(net.layers, net.weights, net.biases):
        x = _activate(spec.activation, x @ w + b)
        trace.append(x)
    return trace


def forward(net: Mlp, x) -> np.ndarray:
    """Evaluate the network on one vector or a ``(B, in)`` batch."""
    x = _check_input(net, x)
    for spec, w, b in zip(net.layers, net.weights, net.biases):
        x = _activate(spec.activation, x @ w + b)
    return x


def backward(net: Mlp, x, output_grad, trace: list[np.ndarray] | None = None,
             param_grads: bool = True):
    """Reverse-mode gradients of ``sum(output * output_grad)``.

    Batched inputs accumulate parameter gradients over rows. Pass the
    ``trace`` from :func:`forward_trace` to skip recomputing the forward pass.
    With ``param_grads=False`` only the input gradient is computed and the
    returned Gradient is None. Returns ``(Gradient, input_grad)``.
    """
    if trace is None:
        trace = forward_trace(net, x)
    elif _check_input(net, x).shape != trace[0].shape:
        raise ContractViolation("trace does not belong to this input")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != trace[-1].shape:
        raise ContractViolation(f"output_grad shape {g.shape} != output shape {trace[-1].shape}")
    batched = g.ndim == 2
    n = len(net.layers)
    dws: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for k in range(n - 1, -1, -1):
        act = net.layers[k].activation
        out = trace[k + 1]
        if act is Activation.RELU:
            g = g * (out > 0.0)
        elif act is Activation.TANH:
            g = g * (1.0 - out * out)
        inp = trace[k]
        if param_grads and batched:
            dws[k] = inp.T @ g
            dbs[k] = g.sum(axis=0)
        elif param_grads:
            dws[k] = np.outer(inp, g)
            dbs[k] = g.copy()
        g = g @ net.weights[k].T
    return (Gradient(dws, dbs) if param_grads else None), g


def _check_same_shape(net: Mlp, arrays: Sequence[np.ndarray], what: str):
    params = net.params()
    if len(arrays) != len(params) or any(a.shape != p.shape for a, p in zip(arrays, params)):
        raise ContractViolation(f"{what} shapes do not match the network")


def adam_step(net: Mlp, state: AdamState, grad: Gradient):
    """One bias-corrected Adam update, in place. Returns ``(net, state)``."""
    gparams = grad.params()
    _check_same_shape(net, gparams, "gradient")
    _check_same_shape(net, state.first_moment, "first moment")
    _check_same_shape(net, state.second_moment, "second moment")
    if not all(np.all(np.isfinite(g)) for g in gparams):
        raise TrainingDivergenceError("non-finite gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step = state.learning_rate * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    eps_hat = state.epsilon * np.sqrt(1.0 - b2 ** t)
    for p, g, m, v in zip(net.params(), gparams, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= step * m / (np.sqrt(v) + eps_hat)
    return net, state


def _check_pair(source: Mlp, target: Mlp):
    if source.layers != target.layers:
        raise ContractViolation("source and target layer specs differ")


def hard_copy(source: Mlp, target: Mlp) -> Mlp:
    _check_pair(source, target)
    for dst, src in zip(target.params(), source.params()):
        dst[...] = src
    return target


def soft_update(source: Mlp, target: Mlp, tau: float) -> Mlp:
    """Polyak averaging: ``target <- tau*source + (1-tau)*target``."""
    if not 0.0 < tau <= 1.0:
        raise ConfigurationError(f"tau must lie in (0, 1], got {tau}")
    _check_pair(source, target)
    if tau == 1.0:
        return hard_copy(source, target)
    for dst, src in zip(target.params(), source.params()):
        dst *= 1.0 - tau
        dst += tau * src
    return target


def mse_loss_grad(prediction, target):
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ContractViolation(f"shape mismatch {prediction.shape} vs {target.shape}")
    diff = prediction - target
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


# --- weight persistence -------------------------------------------------

MAGIC = b"AGGRLNN\x00"
FORMAT_VERSION = 1


def dump_mlp(net: Mlp) -> bytes:
    """Serialize to the versioned little-endian float64 weight format.

    Layout: magic, u32 version, u32 header length, JSON header, float64
    payload (each layer's weights row-major then its biases), u64
    parameter count, u32 CRC32 of the payload.
    """
    header = json.dumps({
        "layers": [[s.input_width, s.output_width, s.activation.value] for s in net.layers],
        "param_count": net.param_count,
        "dtype": "<f8",
    }).encode()
    payload = net.flat().astype("<f8").tobytes()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    buf.write(header)
    buf.write(payload)
    buf.write(struct.pack("<QI", net.param_count, zlib.crc32(payload)))
    return buf.getvalue()


def load_mlp(data: bytes) -> Mlp:
    if data[:len(MAGIC)] != MAGIC:
        raise ContractViolation("not an aggrl weight blob")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != FORMAT_VERSION:
        raise ContractViolation(f"unsupported weight format version {version}")
    off += 8
    header = json.loads(data[off:off + hlen].decode())
    off += hlen
    count = int(header["param_count"])
    payload = data[off:off + 8 * count]
    tail = data[off + 8 * count:]
    if len(payload) != 8 * count or len(tail) != 12:
        raise ContractViolation("truncated weight blob")
    stored_count, crc = struct.unpack("<QI", tail)
    if stored_count != count or zlib.crc32(payload) != crc:
        raise ContractViolation("weight blob checksum mismatch")
    layers = [LayerSpec(a, b, Activation(act)) for a, b, act in header["layers"]]
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    weights, biases, i = [], [], 0
    for s in layers:
        n = s.input_width * s.output_width
        weights.append(flat[i:i + n].reshape(s.input_width, s.output_width))
        i += n
        biases.append(flat[i:i + s.output_width])
        i += s.output_width
    if i != count:
        raise ContractViolation("parameter count does not match layer specs")
    return Mlp(layers, weights, biases)


def save_mlp(net: Mlp, path) -> Path:
    path = Path(path)
    path.write_bytes(dump_mlp(net))
    return path


def read_mlp(path) -> Mlp:
    return load_mlp(Path(path).read_bytes())


def adam_to_arrays(state: AdamState) -> dict:
    """Flatten optimizer state into plain arrays for checkpointing."""
    return {
        "m": np.concatenate([m.ravel() for m in state.first_moment]),
        "v": np.concatenate([v.ravel() for v in state.second_moment]),
        "scalars": np.array([state.learning_rate, state.beta1, state.beta2,
                             state.epsilon, state.step_count], dtype=np.float64),
    }


def adam_from_arrays(net: Mlp, arrays: dict) -> AdamState:
    lr, b1, b2, eps, t = arrays["scalars"]
    state = AdamState.for_net(net, learning_rate=float(lr), beta1=float(b1),
                              beta2=float(b2), epsilon=float(eps))
    state.step_count = int(t)
    i = 0
    for m, v in zip(state.first_moment, state.second_moment):
        m[...] = arrays["m"][i:i + m.size].reshape(m.shape)
        v[...] = arrays["v"][i:i + v.size].reshape(v.shape)
        i += m.size
    return state
