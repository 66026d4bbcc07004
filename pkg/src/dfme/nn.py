"""Dense networks with manual backpropagation.

Plain ``float64`` numpy arrays are the tensor type throughout the package.
Parameters carry their gradient slot alongside them in :class:`Param`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")


class DimensionError(ValueError):
    """Raised when an array does not have the shape an operation needs."""


class NetworkStateError(RuntimeError):
    """Raised when an operation is called out of order (e.g. backward before forward)."""


class DomainError(ValueError):
    """Raised for numerically invalid inputs (negative probabilities, bad indices)."""


@dataclass(eq=False)
class Param:
    data: np.ndarray
    grad: np.ndarray | None = None

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g


@dataclass(eq=False)
class Dense:
    weight: Param
    bias: Param
    activation: str = "linear"
    # forward cache
    _x: np.ndarray | None = field(default=None, repr=False)
    _out: np.ndarray | None = field(default=None, repr=False)

    @property
    def in_dim(self) -> int:
        return self.weight.data.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.data.shape[1]


def apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def activation_backward(name: str, out: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (out > 0.0)
    if name == "tanh":
        return g * (1.0 - out * out)
    return g


class DenseNetwork:
    """A stack of fully connected layers.

    Weights are stored ``(in, out)`` so a layer computes ``act(x @ W + b)``.
    ``macs`` counts multiply-adds performed by forward and backward passes,
    which lets callers compare compute cost analytically.
    """

    def __init__(self, layers: Sequence[Dense]):
        if not layers:
            raise ValueError("a network needs at least one layer")
        for a, b in zip(layers[:-1], layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError(
                    f"layer dims do not chain: {a.weight.data.shape} -> {b.weight.data.shape}"
                )
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.bias.data.shape != (layer.out_dim,):
                raise DimensionError(
                    f"bias shape {layer.bias.data.shape} does not match weight {layer.weight.data.shape}"
                )
        self.layers = list(layers)
        self.macs = 0
        self._has_forward = False

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        hidden: str = "relu",
        output: str = "linear",
    ) -> "DenseNetwork":
        """Build a network with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        if len(sizes) < 2:
            raise ValueError(f"need at least input and output sizes, got {list(sizes)}")
        layers = []
        n = len(sizes) - 1
        for t, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            act = output if t == n - 1 else hidden
            layers.append(Dense(Param(w), Param(b), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def parameters(self) -> Iterator[Param]:
        for layer in self.layers:
            yield layer.weight
            yield layer.bias

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(
                f"expected batch of shape [B, {self.input_dim}], got {list(x.shape)}"
            )
        for layer in self.layers:
            layer._x = x
            x = apply_activation(layer.activation, x @ layer.weight.data + layer.bias.data)
            layer._out = x
            self.macs += x.shape[0] * layer.in_dim * layer.out_dim
        self._has_forward = True
        return x

    __call__ = forward

    def backward(self, grad_out: np.ndarray, params: bool = True) -> np.ndarray:
        """Backpropagate ``grad_out`` (dLoss/dOutput) and return dLoss/dInput.

        With ``params=False`` only the input gradient is computed and the
        parameter grad slots are left alone (used when the network is frozen).
        """
        if not self._has_forward:
            raise NetworkStateError("backward called before forward")
        last = self.layers[-1]._out
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != last.shape:
            raise DimensionError(
                f"loss gradient shape {list(grad_out.shape)} does not match output {list(last.shape)}"
            )
        g = grad_out
        for layer in reversed(self.layers):
            g = activation_backward(layer.activation, layer._out, g)
            if params:
                layer.weight.accumulate(layer._x.T @ g)
                layer.bias.accumulate(g.sum(axis=0))
                self.macs += g.shape[0] * layer.in_dim * layer.out_dim
            g = g @ layer.weight.data.T
            self.macs += g.shape[0] * layer.in_dim * layer.out_dim
        return g

    def copy(self) -> "DenseNetwork":
        layers = [
            Dense(Param(l.weight.data.copy()), Param(l.bias.data.copy()), l.activation)
            for l in self.layers
        ]
        return DenseNetwork(layers)

    def state_dict(self) -> dict:
        return {
            "layers": [
                {
                    "weight": l.weight.data.tolist(),
                    "bias": l.bias.data.tolist(),
                    "activation": l.activation,
                }
                for l in self.layers
            ]
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "DenseNetwork":
        layers = []
        for layer in state["layers"]:
            w = np.array(layer["weight"], dtype=np.float64)
            b = np.array(layer["bias"], dtype=np.float64)
            layers.append(Dense(Param(w), Param(b), layer["activation"]))
        return cls(layers)

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def __repr__(self) -> str:
        acts = [l.activation for l in self.layers]
        return f"DenseNetwork(sizes={self.sizes}, activations={acts})"


def parse_arch(arch: str) -> list[int]:
    """Parse an architecture string such as ``"64-32-10"`` into layer sizes."""
    sizes = []
    for token in arch.split("-"):
        token = token.strip()
        try:
            value = int(token)
        except ValueError:
            raise ValueError(f"invalid layer size {token!r} in architecture {arch!r}") from None
        if value <= 0:
            raise ValueError(f"invalid layer size {token!r} in architecture {arch!r}")
        sizes.append(value)
    if len(sizes) < 2:
        raise ValueError(f"architecture {arch!r} needs at least an input and an output size")
    return sizes


# ---------------------------------------------------------------------------
# functional helpers


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 0 or logits.shape[-1] == 0:
        raise DimensionError(f"softmax needs a non-empty last dimension, got {list(logits.shape)}")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 0 or logits.shape[-1] == 0:
        raise DimensionError(f"log_softmax needs a non-empty last dimension, got {list(logits.shape)}")
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Map dL/dprobs to dL/dlogits through a row-wise softmax."""
    return probs * (grad_probs - (grad_probs * probs).sum(axis=-1, keepdims=True))


def entropy(probs: np.ndarray, tol: float = 1e-6) -> float:
    """Shannon entropy (nats) of a single distribution, with 0 ln 0 = 0."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    if p.size == 0:
        raise DimensionError("entropy of an empty distribution")
    if np.any(p < 0):
        raise DomainError("probabilities must be non-negative")
    if abs(p.sum() - 1.0) > tol:
        raise DomainError(f"probabilities sum to {p.sum()!r}, not 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample cross entropy and its gradient w.r.t. logits for the batch mean."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    b, k = logits.shape
    if targets.shape != (b,):
        raise DimensionError(f"targets shape {list(targets.shape)} does not match batch {b}")
    if b and (targets.min() < 0 or targets.max() >= k):
        raise DomainError(f"target index out of range [0, {k})")
    lsm = log_softmax(logits)
    rows = np.arange(b)
    losses = -lsm[rows, targets]
    grad = np.exp(lsm)
    grad[rows, targets] -= 1.0
    grad /= b
    return losses, grad
