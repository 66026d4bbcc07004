"""Clone ensemble with a class-agnostic output head.

Each clone preallocates ``capacity`` output units and only the first ``K``
(the classes discovered so far) take part in softmax, losses and gradients.
Inactive units get no gradient, so activating one is equivalent to appending
a fresh unit to the head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dfme.nn import DenseNetwork, DimensionError, DomainError, cross_entropy, softmax
from dfme.optim import SGD
from dfme.victim import HL, SL, check_mode


class ModeError(RuntimeError):
    pass


class CloneStateError(RuntimeError):
    pass


@dataclass
class ClassRegistry:
    """Victim class id -> head index, append-only and in discovery order."""

    order: list[int] = field(default_factory=list)
    discovered_at: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.index = {c: i for i, c in enumerate(self.order)}

    def __len__(self) -> int:
        return len(self.order)

    def __contains__(self, victim_id: int) -> bool:
        return victim_id in self.index

    def add(self, victim_id: int, spent: int = 0) -> int:
        if victim_id in self.index:
            return self.index[victim_id]
        self.index[victim_id] = len(self.order)
        self.order.append(victim_id)
        self.discovered_at.append(spent)
        return self.index[victim_id]

    def to_heads(self, victim_ids: np.ndarray) -> np.ndarray:
        return np.fromiter((self.index[int(v)] for v in victim_ids), dtype=np.int64,
                           count=len(victim_ids))

    def to_victim(self, heads: np.ndarray) -> np.ndarray:
        return np.asarray(self.order, dtype=np.int64)[heads]

    def state_dict(self) -> dict:
        return {"order": list(self.order), "discovered_at": list(self.discovered_at)}

    @classmethod
    def from_state_dict(cls, state: dict) -> "ClassRegistry":
        return cls(list(state["order"]), list(state["discovered_at"]))


def hard_label_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean cross entropy over the given (already active-only) logits."""
    losses, _ = cross_entropy(logits, targets)
    return float(losses.mean())


def soft_label_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Sum of squared errors over classes, averaged over the batch."""
    losses, _ = soft_label_terms(logits, targets)
    return float(losses.mean())


def soft_label_terms(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise DimensionError(f"logits {list(logits.shape)} vs targets {list(targets.shape)}")
    diff = logits - targets
    return (diff ** 2).sum(axis=1), 2.0 * diff / len(diff)


@dataclass
class Prediction:
    member_probs: np.ndarray  # [m, B, K]
    probs: np.ndarray  # [B, K]
    labels: np.ndarray  # [B] head indices


class CloneEnsemble:
    def __init__(self, members: Sequence[DenseNetwork], mode: str = HL, lr: float = 0.01,
                 momentum: float = 0.9, weight_decay: float = 0.0):
        if not members:
            raise ValueError("clone ensemble needs at least one member")
        sizes = members[0].sizes
        if any(m.sizes != sizes for m in members):
            raise ValueError("all clones must share one architecture")
        self.members = list(members)
        self.mode = check_mode(mode)
        self.registry = ClassRegistry()
        self.optimizers = [SGD(m, lr, momentum, weight_decay) for m in self.members]

    @classmethod
    def init(cls, count: int, sizes: Sequence[int], rng: np.random.Generator, mode: str = HL,
             **opt_kwargs) -> "CloneEnsemble":
        """``sizes`` ends with the head capacity (HL) or the class count (SL)."""
        members = [DenseNetwork.init(sizes, rng) for _ in range(count)]
        return cls(members, mode, **opt_kwargs)

    def __len__(self) -> int:
        return len(self.members)

    @property
    def k(self) -> int:
        return len(self.registry)

    @property
    def capacity(self) -> int:
        return self.members[0].output_dim

    @property
    def input_dim(self) -> int:
        return self.members[0].input_dim

    def set_lr(self, lr: float) -> None:
        for opt in self.optimizers:
            opt.lr = lr

    # -- head management ------------------------------------------------

    def discover(self, victim_id: int, spent: int = 0) -> int:
        """Head index for ``victim_id``, activating a new output unit if it is new.

        The new unit's incoming weights are zero and its bias is the smallest
        active bias, so it starts out as the least likely class.
        """
        if self.mode != HL:
            raise ModeError("class discovery is only used in hard-label mode")
        victim_id = int(victim_id)
        if victim_id in self.registry:
            return self.registry.index[victim_id]
        unit = self.k
        if unit >= self.capacity:
            raise CloneStateError(f"head capacity {self.capacity} exhausted")
        for net, opt in zip(self.members, self.optimizers):
            last = net.layers[-1]
            last.weight.data[:, unit] = 0.0
            last.bias.data[unit] = last.bias.data[:unit].min() if unit else 0.0
            opt.reset_output_unit(unit)
        return self.registry.add(victim_id, spent)

    def fix_classes(self, n_classes: int) -> None:
        """Soft-label mode: the head width is the victim's response width."""
        if self.mode != SL:
            raise ModeError("fixed class count is only used in soft-label mode")
        if self.k:
            if self.k != n_classes:
                raise DimensionError(f"response width {n_classes} != established {self.k}")
            return
        if n_classes > self.capacity:
            raise CloneStateError(f"{n_classes} classes exceed head capacity {self.capacity}")
        for c in range(n_classes):
            self.registry.add(c)

    # -- inference --------------------------------------------------------

    def member_logits(self, x: np.ndarray) -> list[np.ndarray]:
        if self.k == 0:
            raise CloneStateError("no classes discovered yet")
        return [m.forward(x)[:, :self.k] for m in self.members]

    def member_probs(self, x: np.ndarray) -> np.ndarray:
        return np.stack([softmax(z) for z in self.member_logits(x)])

    def predict(self, x: np.ndarray) -> Prediction:
        mp = self.member_probs(x)
        probs = mp.mean(axis=0)
        return Prediction(mp, probs, np.argmax(probs, axis=1))

    def predict_victim_labels(self, x: np.ndarray) -> np.ndarray:
        return self.registry.to_victim(self.predict(x).labels)

    def input_gradient(self, grad_logits: Sequence[np.ndarray]) -> np.ndarray:
        """Sum over members of dL/dx given each member's dL/d(active logits).

        Parameter grad slots are not touched; this is for frozen clones.
        """
        total = None
        for net, g in zip(self.members, grad_logits):
            full = np.zeros((g.shape[0], self.capacity))
            full[:, :self.k] = g
            gx = net.backward(full, params=False)
            total = gx if total is None else total + gx
        return total

    # -- training ---------------------------------------------------------

    def _loss_terms(self, logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.mode == HL:
            return cross_entropy(logits, targets)
        return soft_label_terms(logits, targets)

    def sample_losses(self, x: np.ndarray, targets: np.ndarray) -> np.ndarray:
        """Per-sample training loss averaged over members, without updating anything."""
        return np.mean([self._loss_terms(z, targets)[0] for z in self.member_logits(x)], axis=0)

    def train_batch(self, x: np.ndarray, targets: np.ndarray, iterations: int = 1) -> np.ndarray:
        """Train every member ``iterations`` steps on one batch.

        ``targets`` are head indices (HL) or victim pseudo logits (SL). Returns
        the per-sample loss of the last forward pass, averaged over members.
        """
        if iterations <= 0:
            return self.sample_losses(x, targets)
        if self.mode == HL:
            targets = np.asarray(targets)
            if targets.size and (targets.min() < 0 or targets.max() >= self.k):
                raise DomainError(f"target head index out of range [0, {self.k})")
        per_member = []
        for net, opt in zip(self.members, self.optimizers):
            for _ in range(iterations):
                z = net.forward(x)
                losses, grad = self._loss_terms(z[:, :self.k], targets)
                full = np.zeros_like(z)
                full[:, :self.k] = grad
                net.backward(full)
                opt.step()
            per_member.append(losses)
        return np.mean(per_member, axis=0)

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "mode": self.mode,
            "members": [m.state_dict() for m in self.members],
            "optimizers": [o.state_dict() for o in self.optimizers],
            "registry": self.registry.state_dict(),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "CloneEnsemble":
        members = [DenseNetwork.from_state_dict(s) for s in state["members"]]
        ens = cls(members, state["mode"])
        for opt, s in zip(ens.optimizers, state["optimizers"]):
            opt.load_state_dict(s)
        ens.registry = ClassRegistry.from_state_dict(state["registry"])
        return ens

