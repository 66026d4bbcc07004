"""The black-box victim: a metered query endpoint in hard-label or soft-label mode."""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from dfme.datasets import LabeledDataset
from dfme.nn import DenseNetwork, DimensionError, cross_entropy, softmax
from dfme.optim import SGD

log = logging.getLogger(__name__)

HL = "hl"
SL = "sl"
MODES = (HL, SL)


class BudgetExhausted(RuntimeError):
    """The query would take the ledger past its budget. Nothing was charged."""

    def __init__(self, remaining: int, requested: int = 0):
        super().__init__(f"query budget exhausted: {requested} requested, {remaining} remaining")
        self.remaining = remaining
        self.requested = requested


class TrainingError(RuntimeError):
    pass


def check_mode(mode: str) -> str:
    mode = mode.lower()
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


@dataclass
class VictimResponse:
    mode: str
    labels: np.ndarray | None = None
    probs: np.ndarray | None = None

    def __post_init__(self) -> None:
        if (self.labels is None) == (self.probs is None):
            raise ValueError("exactly one of labels/probs must be set")
        if self.mode == HL and self.labels is None:
            raise ValueError("HL response must carry labels")
        if self.mode == SL and self.probs is None:
            raise ValueError("SL response must carry probabilities")

    def __len__(self) -> int:
        return len(self.labels) if self.labels is not None else len(self.probs)

    @property
    def hard_labels(self) -> np.ndarray:
        """Class ids; SL responses are reduced by argmax (lowest id on ties)."""
        if self.labels is not None:
            return self.labels
        return np.argmax(self.probs, axis=1)


@dataclass
class BudgetLedger:
    budget: int
    spent: int = 0
    log: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()

    @property
    def remaining(self) -> int:
        return self.budget - self.spent

    def charge(self, n: int) -> None:
        with self._lock:
            if self.spent + n > self.budget:
                raise BudgetExhausted(self.budget - self.spent, n)
            self.spent += n
            self.log.append((n, time.time()))

    def state_dict(self) -> dict:
        return {"budget": self.budget, "spent": self.spent, "log": [list(e) for e in self.log]}

    @classmethod
    def from_state_dict(cls, state: dict) -> "BudgetLedger":
        return cls(state["budget"], state["spent"], [tuple(e) for e in state["log"]])


def victim_outputs(net: DenseNetwork, batch: np.ndarray, mode: str) -> VictimResponse:
    logits = net.forward(batch)
    if mode == HL:
        return VictimResponse(HL, labels=np.argmax(logits, axis=1))
    return VictimResponse(SL, probs=softmax(logits))


class VictimOracle:
    """In-process victim. Every input row sent through :meth:`query` costs one budget unit."""

    def __init__(self, net: DenseNetwork, budget: int, mode: str = HL):
        self.net = net
        self.mode = check_mode(mode)
        self.ledger = BudgetLedger(int(budget))
        self._lock = threading.Lock()

    @property
    def budget(self) -> int:
        return self.ledger.budget

    @property
    def spent(self) -> int:
        return self.ledger.spent

    @property
    def remaining(self) -> int:
        return self.ledger.remaining

    @property
    def input_dim(self) -> int:
        return self.net.input_dim

    def query(self, batch: np.ndarray) -> VictimResponse:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.net.input_dim:
            raise DimensionError(
                f"query batch must be [B, {self.net.input_dim}], got {list(batch.shape)}"
            )
        with self._lock:
            self.ledger.charge(batch.shape[0])
            return victim_outputs(self.net, batch, self.mode)

    def close(self) -> None:
        pass


def reference_labels(net: DenseNetwork, x: np.ndarray) -> np.ndarray:
    """UNMETERED victim labels, for evaluation in simulation only.

    This bypasses the budget ledger on purpose. Attack code must never call it.
    """
    return np.argmax(net.forward(x), axis=1)


def pseudo_logits(probs: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Zero-mean log-probabilities recovered from a probability response."""
    logp = np.log(np.maximum(np.asarray(probs, dtype=np.float64), floor))
    return logp - logp.mean(axis=-1, keepdims=True)


@dataclass
class VictimReport:
    train_accuracy: float
    test_accuracy: float | None
    epochs: int


def accuracy(net: DenseNetwork, data: LabeledDataset) -> float:
    return float(np.mean(np.argmax(net.forward(data.x), axis=1) == data.y))


def train_victim(data: LabeledDataset, net: DenseNetwork, epochs: int, rng: np.random.Generator,
                 test: LabeledDataset | None = None, lr: float = 0.05, batch_size: int = 64,
                 momentum: float = 0.9, weight_decay: float = 5e-4) -> tuple[DenseNetwork, VictimReport]:
    """Minibatch SGD on cross entropy; ``lr`` is divided by 5 every sixth of the run."""
    if len(data) == 0:
        raise ValueError("cannot train a victim on an empty dataset")
    if data.y.min() < 0 or data.y.max() >= net.output_dim:
        raise ValueError(f"labels must lie in [0, {net.output_dim})")
    opt = SGD(net, lr, momentum=momentum, weight_decay=weight_decay)
    step_every = max(1, epochs // 6)
    for epoch in range(epochs):
        opt.lr = lr / 5 ** (epoch // step_every)
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                losses, grad = cross_entropy(net.forward(data.x[idx]), data.y[idx])
            if not np.all(np.isfinite(losses)):
                raise TrainingError(f"loss diverged (non-finite) in epoch {epoch}")
            total += losses.sum()
            net.backward(grad)
            opt.step()
        log.debug("victim epoch %d loss %.4f", epoch, total / len(data))
    report = VictimReport(
        accuracy(net, data), accuracy(net, test) if test is not None else None, epochs
    )
    return net, report
