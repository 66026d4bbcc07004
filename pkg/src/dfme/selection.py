"""Selective query: oversample candidates and pick a class-balanced, high-disagreement batch."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dfme.clones import CloneEnsemble
from dfme.generators import ConfigurationError, GeneratorEnsemble, disagreement_per_sample


@dataclass
class CandidatePool:
    inputs: np.ndarray
    labels: np.ndarray  # ensemble argmax, head indices
    disagreement: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.inputs)
        if len(self.labels) != n or len(self.disagreement) != n:
            raise ValueError("pool arrays are not congruent")

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class SelectionReport:
    indices: np.ndarray
    per_class: dict[int, int] = field(default_factory=dict)
    deficit: int = 0
    by_disagreement: int = 0
    uniform: int = 0

    def as_dict(self) -> dict:
        return {
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "deficit": self.deficit,
            "by_disagreement": self.by_disagreement,
            "uniform": self.uniform,
        }


def score_candidates(clones: CloneEnsemble, inputs: np.ndarray) -> CandidatePool:
    pred = clones.predict(inputs)
    return CandidatePool(inputs, pred.labels, disagreement_per_sample(pred.member_probs))


def build_pool(generators: GeneratorEnsemble, clones: CloneEnsemble, pool_size: int,
               batch_size: int, rng: np.random.Generator) -> CandidatePool:
    """Generate ``ceil(pool_size / batch_size)`` batches, truncate to ``pool_size`` and score them."""
    if pool_size < batch_size:
        raise ConfigurationError(f"pool size {pool_size} is smaller than batch size {batch_size}")
    n_batches = -(-pool_size // batch_size)
    x = np.concatenate([generators.generate(batch_size, rng) for _ in range(n_batches)])
    return score_candidates(clones, x[:pool_size])


def _by_disagreement(pool: CandidatePool, idx: np.ndarray) -> np.ndarray:
    """``idx`` sorted by descending disagreement, ties to the lower pool index."""
    idx = np.sort(idx)
    return idx[np.argsort(-pool.disagreement[idx], kind="stable")]


def select_batch(pool: CandidatePool, n: int, k: int, rng: np.random.Generator) -> SelectionReport:
    """Choose ``n`` distinct pool indices.

    Every class ``0..k-1`` contributes its top ``n // k`` candidates by
    disagreement. The shortfall ``R`` (rounding remainder plus classes with
    too few candidates) is filled half (rounded down) by the highest
    remaining disagreement regardless of class, and the rest uniformly from
    what is left: ``rng.choice(sorted_leftover, size, replace=False)``.
    """
    if len(pool) < n:
        raise ConfigurationError(f"pool of {len(pool)} cannot supply {n} samples")
    if k < 1:
        raise ConfigurationError("selection needs at least one discovered class")
    per = n // k
    deficit = n - k * per
    chosen: list[np.ndarray] = []
    per_class = {}
    for c in range(k):
        ranked = _by_disagreement(pool, np.flatnonzero(pool.labels == c))
        take = ranked[:per]
        chosen.append(take)
        per_class[c] = len(take)
        deficit += per - len(take)
    selected = np.concatenate(chosen) if chosen else np.empty(0, dtype=np.int64)
    half = uniform = 0
    if deficit > 0:
        mask = np.ones(len(pool), dtype=bool)
        mask[selected] = False
        ranked = _by_disagreement(pool, np.flatnonzero(mask))
        half = deficit // 2
        top = ranked[:half]
        mask[top] = False
        uniform = deficit - half
        rest = rng.choice(np.flatnonzero(mask), size=uniform, replace=False)
        selected = np.concatenate([selected, top, rest])
    return SelectionReport(selected.astype(np.int64), per_class, deficit, half, uniform)


def select_uniform(pool: CandidatePool, n: int, rng: np.random.Generator) -> SelectionReport:
    """Ablation baseline: ``n`` pool indices uniformly at random."""
    if len(pool) < n:
        raise ConfigurationError(f"pool of {len(pool)} cannot supply {n} samples")
    idx = rng.choice(len(pool), size=n, replace=False).astype(np.int64)
    return SelectionReport(idx, uniform=n)
