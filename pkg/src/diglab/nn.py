"""Dense feed-forward networks and optimizers for the toy dynamics runs.

Networks are pure data (:class:`MlpParams`); the forward pass records onto
a caller-supplied tape so gradients of any objective built on top flow back
to both inputs and parameters. Optimizers are pure functions over explicit
state, safe to run many seeded instances in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape

HIDDEN_ACTIVATIONS = ("tanh", "sigmoid")
OUTPUT_ACTIVATIONS = ("identity", "tanh", "sigmoid")


class ConfigError(ValueError):
    """Invalid network or run configuration."""


class NonFiniteGradientError(RuntimeError):
    """An optimizer step received non-finite gradient entries."""


@dataclass(frozen=True)
class MlpConfig:
    """Layer widths (input first, output last) plus activation choices."""

    layer_widths: tuple[int, ...]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(self.layer_widths))
        if len(self.layer_widths) < 2 or any(w < 1 for w in self.layer_widths):
            raise ConfigError(f"need >= 2 positive layer widths, got {self.layer_widths}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigError(f"hidden_activation must be one of {HIDDEN_ACTIVATIONS}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"output_activation must be one of {OUTPUT_ACTIVATIONS}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


@dataclass
class MlpParams:
    """Per-layer (out x in) weight matrices and (1 x out) bias rows."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> list[np.ndarray]:
        """All tensors in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])

    def n_params(self) -> int:
        return sum(t.size for t in self.flat())

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(t))) for t in self.flat())


def mlp_init(config: MlpConfig, seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(config.layer_widths, config.layer_widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros((1, fan_out)))
    return MlpParams(weights, biases)


def _activate(tape: Tape, x: Node, kind: str) -> Node:
    if kind == "tanh":
        return tape.tanh(x)
    if kind == "sigmoid":
        return tape.sigmoid(x)
    return x  # identity


def params_to_leaves(tape: Tape, params: MlpParams) -> MlpParams:
    """Record every tensor as a leaf; returns an MlpParams of nodes."""
    return MlpParams([tape.leaf(w) for w in params.weights],
                     [tape.leaf(b) for b in params.biases])


def mlp_forward(tape: Tape, config: MlpConfig, params: MlpParams, x: Node) -> Node:
    """Forward pass for a (batch x in_width) input node.

    ``params`` may hold arrays (recorded as leaves here) or nodes already on
    ``tape`` (pass the result of :func:`params_to_leaves` to take gradients
    w.r.t. parameters).
    """
    if x.shape[1] != config.layer_widths[0]:
        raise ConfigError(
            f"input width {x.shape[1]} != configured {config.layer_widths[0]}")
    if not isinstance(params.weights[0], Node):
        params = params_to_leaves(tape, params)
    h = x
    last = config.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = tape.broadcast_add(tape.matmul(h, tape.transpose(w)), b)
        kind = config.output_activation if i == last else config.hidden_activation
        h = _activate(tape, z, kind)
    return h


def mlp_eval(config: MlpConfig, params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Plain numpy forward pass (no tape); used for detached generator
    samples and as a cross-check against the taped version."""
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    last = config.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        kind = config.output_activation if i == last else config.hidden_activation
        if kind == "tanh":
            h = np.tanh(z)
        elif kind == "sigmoid":
            with np.errstate(over="ignore"):
                h = 1.0 / (1.0 + np.exp(-z))
        else:
            h = z
    return h


# --- optimizers -------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators and step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: MlpParams, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params.flat()],
                   v=[np.zeros_like(p) for p in params.flat()],
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: MlpParams, grads: list[np.ndarray], state: AdamState,
              lr: float) -> tuple[MlpParams, AdamState]:
    """Bias-corrected Adam update; returns new params and new state."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    flat = params.flat()
    if len(grads) != len(flat):
        raise ConfigError(f"got {len(grads)} gradients for {len(flat)} tensors")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient entries; update refused")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_m, new_v, new_flat = [], [], []
    for p, g, m, v in zip(flat, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m.append(m)
        new_v.append(v)
        new_flat.append(p - step)
    return (_unflatten_like(params, new_flat),
            AdamState(new_m, new_v, t, b1, b2, state.eps))


@dataclass
class MomentumState:
    """Velocity buffers for classical SGD with momentum."""

    v: list[np.ndarray]
    momentum: float = 0.9

    @classmethod
    def init(cls, params: MlpParams, momentum=0.9) -> "MomentumState":
        return cls(v=[np.zeros_like(p) for p in params.flat()], momentum=momentum)


def sgd_momentum_step(params: MlpParams, grads: list[np.ndarray],
                      state: MomentumState, lr: float) -> tuple[MlpParams, MomentumState]:
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient entries; update refused")
    new_v, new_flat = [], []
    for p, g, v in zip(params.flat(), grads, state.v):
        v = state.momentum * v + g
        new_v.append(v)
        new_flat.append(p - lr * v)
    return _unflatten_like(params, new_flat), MomentumState(new_v, state.momentum)


def _unflatten_like(params: MlpParams, flat: list[np.ndarray]) -> MlpParams:
    n = len(params.weights)
    return MlpParams([flat[2 * i] for i in range(n)],
                     [flat[2 * i + 1] for i in range(n)])


# --- snapshot serialization --------------------------------------------------
#
# One line per tensor: `name rows cols v0 v1 ...` with 17 significant digits,
# which round-trips float64 losslessly.


def params_to_text(params: MlpParams) -> str:
    lines = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        for name, t in ((f"layer{i}.weight", w), (f"layer{i}.bias", b)):
            vals = " ".join(f"{v:.17g}" for v in t.ravel())
            lines.append(f"{name} {t.shape[0]} {t.shape[1]} {vals}")
    return "\n".join(lines) + "\n"


def params_from_text(text: str) -> MlpParams:
    weights, biases = {}, {}
    for line in text.strip().splitlines():
        parts = line.split()
        name, rows, cols = parts[0], int(parts[1]), int(parts[2])
        vals = np.array([float(v) for v in parts[3:]]).reshape(rows, cols)
        layer = int(name.split(".")[0].removeprefix("layer"))
        if name.endswith(".weight"):
            weights[layer] = vals
        else:
            biases[layer] = vals
    n = len(weights)
    if sorted(weights) != list(range(n)) or sorted(biases) != list(range(n)):
        raise ValueError("snapshot is missing tensors")
    return MlpParams([weights[i] for i in range(n)], [biases[i] for i in range(n)])


def save_params(path, params: MlpParams) -> None:
    with open(path, "w") as f:
        f.write(params_to_text(params))


def load_params(path) -> MlpParams:
    with open(path) as f:
        return params_from_text(f.read())
