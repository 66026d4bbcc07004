"""Generator ensemble: ``n`` generators that each fill one block of every synthetic batch.

The generators are trained to maximise ``L_D + lambda * L_div`` on the clone
ensemble's predictions: ``L_D`` is the clones' disagreement and ``L_div``
the entropy of the batch-averaged class distribution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from dfme.nn import (Dense, DenseNetwork, DimensionError, NetworkStateError, Param,
                     activation_backward, apply_activation, softmax_backward)
from dfme.optim import Adam

if TYPE_CHECKING:
    from dfme.clones import CloneEnsemble


class ConfigurationError(ValueError):
    pass


def partition_batch(batch_size: int, n: int) -> list[range]:
    """Split ``range(batch_size)`` into ``n`` contiguous blocks.

    The first ``batch_size % n`` blocks get one extra index, so block sizes
    differ by at most one.
    """
    if n < 1 or batch_size < n:
        raise ConfigurationError(f"cannot split a batch of {batch_size} across {n} generators")
    base, extra = divmod(batch_size, n)
    blocks, start = [], 0
    for j in range(n):
        size = base + (1 if j < extra else 0)
        blocks.append(range(start, start + size))
        start += size
    return blocks


def lambda_schedule(k: int) -> float:
    """Diversity weight for ``k`` discovered classes: 4 / (10 + k)."""
    if k < 0:
        raise ValueError(f"class count must be non-negative, got {k}")
    return 4.0 / (10.0 + k)


# ---------------------------------------------------------------------------
# losses on clone probabilities, shaped [m clones, B, K]


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 3:
        raise ValueError(f"expected [clones, batch, classes] probabilities, got shape {list(p.shape)}")
    return p


def disagreement_per_sample(probs) -> np.ndarray:
    """Mean over classes of the population std across clones, one value per sample."""
    p = _check_probs(probs)
    if p.shape[0] < 2:
        raise ConfigurationError("disagreement needs at least two clones")
    return p.std(axis=0).mean(axis=-1)


def disagreement_loss(probs) -> tuple[float, np.ndarray]:
    """Batch mean of :func:`disagreement_per_sample` and its gradient w.r.t. ``probs``.

    Where all clones agree exactly the std has no derivative; the zero
    subgradient is used there.
    """
    p = _check_probs(probs)
    m, b, k = p.shape
    if m < 2:
        raise ConfigurationError("disagreement needs at least two clones")
    centred = p - p.mean(axis=0, keepdims=True)
    std = np.sqrt((centred ** 2).mean(axis=0))
    safe = np.where(std > 0, std, 1.0)
    grad = np.where(std > 0, centred / (m * safe), 0.0) / (b * k)
    return float(std.mean()), grad


def diversity_loss(probs) -> tuple[float, np.ndarray]:
    """Entropy of the class distribution averaged over clones and batch, with gradient.

    This is the entropy of the mean, not the mean of per-sample entropies:
    it rewards a batch that covers many classes, not uncertain samples.
    """
    p = _check_probs(probs)
    m, b, k = p.shape
    avg = p.mean(axis=(0, 1))
    nz = avg > 0
    value = float(-(avg[nz] * np.log(avg[nz])).sum())
    dh = np.where(nz, -(np.log(np.where(nz, avg, 1.0)) + 1.0), 0.0)
    grad = np.broadcast_to(dh / (m * b), p.shape).copy()
    return value, grad


@dataclass
class GeneratorLossReport:
    disagreement: float
    diversity: float
    lam: float
    total: float

    def as_dict(self) -> dict:
        return {"disagreement": self.disagreement, "diversity": self.diversity,
                "lambda": self.lam, "total": self.total}


def generator_objective(probs: np.ndarray, lam: float) -> tuple[GeneratorLossReport, np.ndarray]:
    """``L_G = L_D + lam * L_div`` and dL_G/dprobs (a quantity to maximise)."""
    ld, g_ld = disagreement_loss(probs)
    ldiv, g_div = diversity_loss(probs)
    report = GeneratorLossReport(ld, ldiv, lam, ld + lam * ldiv)
    return report, g_ld + lam * g_div


def _block_groups(batch_size: int, n: int) -> list[tuple[int, int, int, int]]:
    """Group the blocks of :func:`partition_batch` by size.

    Returns ``(first_member, n_members, block_size, first_row)`` tuples; there
    are at most two groups (the larger leading blocks, then the rest).
    """
    blocks = partition_batch(batch_size, n)
    groups: list[tuple[int, int, int, int]] = []
    for j, block in enumerate(blocks):
        size = len(block)
        if groups and groups[-1][2] == size:
            m0, cnt, _, r0 = groups[-1]
            groups[-1] = (m0, cnt + 1, size, r0)
        else:
            groups.append((j, 1, size, block.start))
    return groups


class GeneratorEnsemble:
    """``n`` generators sharing one architecture, stored as stacked parameters.

    Layer ``t`` keeps weights of shape ``(n, in, out)`` and biases of shape
    ``(n, out)``; slice ``j`` belongs to generator ``j``. Equal-size blocks run
    through one batched matmul, so the Python overhead does not grow with
    ``n`` while the arithmetic stays exactly that of ``n`` separate networks
    (Adam is elementwise, so one optimizer over the stacks performs the same
    per-member updates). :attr:`members` exposes each generator as a
    :class:`DenseNetwork` whose arrays are views into the stacks.
    """

    def __init__(self, members: Sequence[DenseNetwork], noise_dim: int, lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999)):
        if not members:
            raise ConfigurationError("ensemble needs at least one generator")
        sizes = members[0].sizes
        acts = [layer.activation for layer in members[0].layers]
        for g in members:
            if g.sizes != sizes or [layer.activation for layer in g.layers] != acts:
                raise ConfigurationError(f"generator {g!r} does not match {members[0]!r}")
        if sizes[0] != noise_dim:
            raise ConfigurationError(f"generators take {sizes[0]} inputs, not noise dim {noise_dim}")
        self.n = len(members)
        self.noise_dim = noise_dim
        self.output_dim = sizes[-1]
        self.activations = acts
        self.weights = [Param(np.stack([g.layers[t].weight.data for g in members]))
                        for t in range(len(acts))]
        self.biases = [Param(np.stack([g.layers[t].bias.data for g in members]))
                       for t in range(len(acts))]
        self.optimizer = Adam(self.parameters(), lr, betas)
        self.macs = 0
        self._groups: list[tuple[int, int, int, int]] | None = None
        self._cache: list[list[tuple[np.ndarray, np.ndarray]]] = []

    @classmethod
    def init(cls, n: int, noise_dim: int, hidden: Sequence[int], output_dim: int,
             rng: np.random.Generator, lr: float = 1e-3) -> "GeneratorEnsemble":
        sizes = [noise_dim, *hidden, output_dim]
        members = [DenseNetwork.init(sizes, rng, hidden="relu", output="tanh") for _ in range(n)]
        return cls(members, noise_dim, lr)

    def __len__(self) -> int:
        return self.n

    def parameters(self) -> list[Param]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def members(self) -> list[DenseNetwork]:
        """Per-generator networks; their weights are views into the shared stacks."""
        return [
            DenseNetwork([Dense(Param(w.data[j]), Param(b.data[j]), act)
                          for w, b, act in zip(self.weights, self.biases, self.activations)])
            for j in range(self.n)
        ]

    def set_lr(self, lr: float) -> None:
        self.optimizer.lr = lr

    def forward(self, z: np.ndarray) -> np.ndarray:
        """Map a noise batch to samples; rows in block ``j`` go through generator ``j``."""
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.noise_dim:
            raise DimensionError(f"expected noise of shape [B, {self.noise_dim}], got {list(z.shape)}")
        groups = _block_groups(len(z), self.n)
        x = np.empty((len(z), self.output_dim))
        self._cache = []
        for m0, cnt, size, r0 in groups:
            h = z[r0:r0 + cnt * size].reshape(cnt, size, self.noise_dim)
            cache = []
            for w, b, act in zip(self.weights, self.biases, self.activations):
                inp = h
                h = apply_activation(act, inp @ w.data[m0:m0 + cnt] + b.data[m0:m0 + cnt, None, :])
                cache.append((inp, h))
                self.macs += cnt * size * w.data.shape[1] * w.data.shape[2]
            self._cache.append(cache)
            x[r0:r0 + cnt * size] = h.reshape(cnt * size, self.output_dim)
        self._groups = groups
        return x

    def generate(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Draw one batch of noise for the whole batch and map it through the blocks."""
        partition_batch(batch_size, self.n)  # validates before consuming randomness
        return self.forward(rng.standard_normal((batch_size, self.noise_dim)))

    def backward(self, grad_x: np.ndarray) -> None:
        """Route each block's gradient into the generator that produced it."""
        if self._groups is None:
            raise NetworkStateError("backward called before generate")
        grad_x = np.asarray(grad_x, dtype=np.float64)
        rows = sum(cnt * size for _, cnt, size, _ in self._groups)
        if grad_x.shape != (rows, self.output_dim):
            raise DimensionError(
                f"gradient shape {list(grad_x.shape)} does not match output {[rows, self.output_dim]}"
            )
        dws = [np.empty_like(w.data) for w in self.weights]
        dbs = [np.empty_like(b.data) for b in self.biases]
        for (m0, cnt, size, r0), cache in zip(self._groups, self._cache):
            g = grad_x[r0:r0 + cnt * size].reshape(cnt, size, self.output_dim)
            for t in reversed(range(len(self.weights))):
                inp, out = cache[t]
                w = self.weights[t].data[m0:m0 + cnt]
                g = activation_backward(self.activations[t], out, g)
                np.matmul(inp.transpose(0, 2, 1), g, out=dws[t][m0:m0 + cnt])
                g.sum(axis=1, out=dbs[t][m0:m0 + cnt])
                self.macs += cnt * size * w.shape[1] * w.shape[2]
                if t:
                    g = g @ w.transpose(0, 2, 1)
                    self.macs += cnt * size * w.shape[1] * w.shape[2]
        for p, g in zip(self.parameters(), [a for pair in zip(dws, dbs) for a in pair]):
            if p.grad is None:
                p.grad = g
            else:
                p.grad += g

    def step(self) -> None:
        self.optimizer.step()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, clones: "CloneEnsemble", batches: int, batch_size: int, lam: float,
              rng: np.random.Generator) -> GeneratorLossReport | None:
        """Ascend ``L_G`` for ``batches`` steps with the clones frozen.

        Returns the loss report averaged over the steps (``None`` for zero steps).
        """
        reports = []
        for _ in range(batches):
            x = self.generate(batch_size, rng)
            probs = clones.member_probs(x)
            report, grad_probs = generator_objective(probs, lam)
            # the optimiser minimises, so descend on -L_G
            grad_logits = [softmax_backward(p, -g) for p, g in zip(probs, grad_probs)]
            grad_x = clones.input_gradient(grad_logits)
            self.backward(grad_x)
            self.step()
            reports.append(report)
        if not reports:
            return None
        return GeneratorLossReport(
            float(np.mean([r.disagreement for r in reports])),
            float(np.mean([r.diversity for r in reports])),
            lam,
            float(np.mean([r.total for r in reports])),
        )

    def state_dict(self) -> dict:
        return {
            "noise_dim": self.noise_dim,
            "members": [g.state_dict() for g in self.members],
            "optimizer": self.optimizer.state_dict(),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "GeneratorEnsemble":
        members = [DenseNetwork.from_state_dict(s) for s in state["members"]]
        ens = cls(members, state["noise_dim"])
        ens.optimizer.load_state_dict(state["optimizer"])
        return ens
