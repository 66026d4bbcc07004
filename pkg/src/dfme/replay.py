"""Class-balanced, difficulty-weighted replay memory.

One bank per discovered class, each holding at most ``total // n_banks``
samples. When a bank overflows, the sample to drop is drawn with weight
``max_loss - loss`` over the bank plus the incoming sample, so easy
(low-loss) samples go first and hard ones stay longer. Replay batches draw
the same number of samples from every non-empty bank.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ReplayStateError(RuntimeError):
    pass


@dataclass(eq=False)
class StoredSample:
    x: np.ndarray
    target: int | np.ndarray  # victim class id (HL) or probability row (SL)
    last_loss: float
    sample_id: int = -1
    class_id: int = -1
    slot: int = -1  # position inside its bank


def eviction_weights(losses: np.ndarray) -> np.ndarray | None:
    """Weights ``max - loss`` over the candidate pool; ``None`` means draw uniformly."""
    w = losses.max() - losses
    total = w.sum()
    if len(losses) < 2 or not total > 0:
        return None
    return w / total


def weighted_evictions(losses: np.ndarray, count: int, rng: np.random.Generator) -> list[int]:
    """Pick ``count`` distinct positions to evict via iterative weighted draws."""
    alive = list(range(len(losses)))
    chosen = []
    for _ in range(count):
        p = eviction_weights(losses[alive])
        pos = int(rng.integers(len(alive))) if p is None else int(rng.choice(len(alive), p=p))
        chosen.append(alive.pop(pos))
    return chosen


class ClassBank:
    def __init__(self, class_id: int, capacity: int):
        self.class_id = class_id
        self.capacity = capacity
        self.samples: list[StoredSample] = []
        self._losses = np.empty(0)  # mirrors samples[i].last_loss

    def __len__(self) -> int:
        return len(self.samples)

    def losses(self) -> np.ndarray:
        return self._losses[:len(self.samples)]

    def set_loss(self, sample: StoredSample, loss: float) -> None:
        sample.last_loss = loss
        self._losses[sample.slot] = loss

    def _reindex(self) -> None:
        self._losses = np.empty(max(self.capacity, len(self.samples)))
        for i, s in enumerate(self.samples):
            s.slot = i
            self._losses[i] = s.last_loss

    def shrink(self, rng: np.random.Generator) -> list[StoredSample]:
        """Evict until within capacity; returns the evicted samples."""
        excess = len(self.samples) - self.capacity
        if excess > 0:
            drop = set(weighted_evictions(self.losses().copy(), excess, rng))
            evicted = [s for i, s in enumerate(self.samples) if i in drop]
            self.samples = [s for i, s in enumerate(self.samples) if i not in drop]
        else:
            evicted = []
        self._reindex()
        return evicted

    def insert(self, sample: StoredSample, rng: np.random.Generator) -> StoredSample | None:
        """Add ``sample``; if the bank overflows, evict one candidate (possibly ``sample``)."""
        n = len(self.samples)
        if n < self.capacity:
            if len(self._losses) <= n:
                self._reindex()
            sample.slot = n
            self.samples.append(sample)
            self._losses[n] = sample.last_loss
            return None
        losses = np.append(self.losses(), sample.last_loss)
        pos = weighted_evictions(losses, 1, rng)[0]
        if pos == n:
            return sample
        evicted = self.samples[pos]
        sample.slot = pos
        self.samples[pos] = sample
        self._losses[pos] = sample.last_loss
        return evicted


class ReplayContainer:
    kind = "cbdw"

    def __init__(self, total_capacity: int, rng: np.random.Generator | None = None):
        if total_capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.total_capacity = int(total_capacity)
        self.rng = rng if rng is not None else np.random.default_rng()
        self.banks: dict[int, ClassBank] = {}
        self._by_id: dict[int, StoredSample] = {}
        self._next_id = 0
        self.stale_updates = 0
        self.offered = 0

    def __len__(self) -> int:
        return sum(len(b) for b in self.banks.values())

    @property
    def bank_capacity(self) -> int:
        return self.total_capacity // max(1, len(self.banks))

    def register_class(self, class_id: int) -> None:
        class_id = int(class_id)
        if class_id in self.banks:
            return
        self.banks[class_id] = ClassBank(class_id, 0)
        cap = self.bank_capacity
        for bank in self.banks.values():
            bank.capacity = cap
            for s in bank.shrink(self.rng):
                del self._by_id[s.sample_id]

    def store(self, samples: Iterable[StoredSample]) -> list[int]:
        """Insert samples into their class banks; returns the assigned sample ids."""
        ids = []
        for s in samples:
            bank = self.banks.get(int(s.class_id))
            if bank is None:
                raise ReplayStateError(f"class {s.class_id} has no bank; register it first")
            if s.last_loss < 0:
                raise ValueError("stored loss must be non-negative")
            s.sample_id = self._next_id
            self._next_id += 1
            self.offered += 1
            self._by_id[s.sample_id] = s
            evicted = bank.insert(s, self.rng)
            if evicted is not None:
                del self._by_id[evicted.sample_id]
            ids.append(s.sample_id)
        return ids

    def update_losses(self, sample_ids: Sequence[int], losses: Sequence[float]) -> None:
        for sid, loss in zip(sample_ids, losses):
            s = self._by_id.get(int(sid))
            if s is None:
                self.stale_updates += 1
                continue
            self.banks[s.class_id].set_loss(s, float(loss))

    def sample_balanced(self, batch_size: int, rng: np.random.Generator | None = None
                        ) -> list[StoredSample]:
        """Equal draws (with replacement) from every non-empty bank, shuffled.

        ``batch_size % n_banks`` leftover slots go one each to banks picked
        uniformly without replacement.
        """
        rng = rng if rng is not None else self.rng
        banks = [b for b in self.banks.values() if len(b)]
        if not banks:
            raise ReplayStateError("replay is empty")
        per, extra = divmod(batch_size, len(banks))
        counts = np.full(len(banks), per)
        if extra:
            counts[rng.choice(len(banks), size=extra, replace=False)] += 1
        out = []
        for bank, c in zip(banks, counts):
            for i in rng.integers(len(bank), size=c):
                out.append(bank.samples[i])
        order = rng.permutation(len(out))
        return [out[i] for i in order]

    # -- persistence ------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "total_capacity": self.total_capacity,
            "next_id": self._next_id,
            "stale_updates": self.stale_updates,
            "offered": self.offered,
            "rng": self.rng.bit_generator.state,
            "banks": [
                {
                    "class_id": b.class_id,
                    "capacity": b.capacity,
                    "samples": [_sample_to_dict(s) for s in b.samples],
                }
                for b in self.banks.values()
            ],
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "ReplayContainer":
        rng = np.random.default_rng()
        rng.bit_generator.state = state["rng"]
        m = cls(state["total_capacity"], rng)
        m._next_id = state["next_id"]
        m.stale_updates = state["stale_updates"]
        m.offered = state["offered"]
        for b in state["banks"]:
            bank = ClassBank(b["class_id"], b["capacity"])
            bank.samples = [_sample_from_dict(d) for d in b["samples"]]
            bank._reindex()
            m.banks[bank.class_id] = bank
            for s in bank.samples:
                m._by_id[s.sample_id] = s
        return m

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.state_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "ReplayContainer":
        return cls.from_state_dict(json.loads(Path(path).read_text()))


def _sample_to_dict(s: StoredSample) -> dict:
    target = s.target.tolist() if isinstance(s.target, np.ndarray) else int(s.target)
    return {"x": s.x.tolist(), "target": target, "loss": s.last_loss, "id": s.sample_id,
            "class_id": s.class_id}


def _sample_from_dict(d: dict) -> StoredSample:
    target = d["target"]
    if isinstance(target, list):
        target = np.array(target, dtype=np.float64)
    return StoredSample(np.array(d["x"], dtype=np.float64), target, d["loss"], d["id"], d["class_id"])


class CircularReplay:
    """First-in-first-out ring buffer with uniform sampling; the ablation baseline."""

    kind = "circular"

    def __init__(self, total_capacity: int, rng: np.random.Generator | None = None):
        self.total_capacity = int(total_capacity)
        self.rng = rng if rng is not None else np.random.default_rng()
        self.samples: list[StoredSample] = []
        self._head = 0
        self._next_id = 0
        self.offered = 0

    def __len__(self) -> int:
        return len(self.samples)

    def register_class(self, class_id: int) -> None:
        pass

    def store(self, samples: Iterable[StoredSample]) -> list[int]:
        ids = []
        for s in samples:
            s.sample_id = self._next_id
            self._next_id += 1
            self.offered += 1
            if len(self.samples) < self.total_capacity:
                self.samples.append(s)
            else:
                self.samples[self._head] = s
                self._head = (self._head + 1) % self.total_capacity
            ids.append(s.sample_id)
        return ids

    def update_losses(self, sample_ids: Sequence[int], losses: Sequence[float]) -> None:
        pass

    def sample_balanced(self, batch_size: int, rng: np.random.Generator | None = None
                        ) -> list[StoredSample]:
        rng = rng if rng is not None else self.rng
        if not self.samples:
            raise ReplayStateError("replay is empty")
        return [self.samples[i] for i in rng.integers(len(self.samples), size=batch_size)]

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "total_capacity": self.total_capacity,
            "head": self._head,
            "next_id": self._next_id,
            "offered": self.offered,
            "rng": self.rng.bit_generator.state,
            "samples": [_sample_to_dict(s) for s in self.samples],
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "CircularReplay":
        rng = np.random.default_rng()
        rng.bit_generator.state = state["rng"]
        m = cls(state["total_capacity"], rng)
        m._head = state["head"]
        m._next_id = state["next_id"]
        m.offered = state["offered"]
        m.samples = [_sample_from_dict(d) for d in state["samples"]]
        return m


def replay_from_state_dict(state: dict):
    if state["kind"] == CircularReplay.kind:
        return CircularReplay.from_state_dict(state)
    return ReplayContainer.from_state_dict(state)
