"""The extraction loop: alternate generator training and clone training until the budget is spent."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Protocol

import numpy as np

from dfme.clones import CloneEnsemble
from dfme.generators import GeneratorEnsemble, GeneratorLossReport, lambda_schedule
from dfme.nn import DenseNetwork
from dfme.replay import CircularReplay, ReplayContainer, StoredSample, replay_from_state_dict
from dfme.selection import build_pool, select_batch
from dfme.victim import HL, SL, BudgetExhausted, VictimResponse, check_mode, pseudo_logits, reference_labels

log = logging.getLogger(__name__)


class Oracle(Protocol):
    mode: str

    @property
    def budget(self) -> int: ...

    @property
    def spent(self) -> int: ...

    @property
    def remaining(self) -> int: ...

    def query(self, batch: np.ndarray) -> VictimResponse: ...


@dataclass
class ExtractionConfig:
    budget: int = 50_000
    batch_size: int = 250
    pool_size: int = 1000
    gen_batches: int = 3
    replay_batches: int = 12
    clones: int = 2
    generators: int = 8
    mode: str = HL
    clone_hidden: list[int] = field(default_factory=lambda: [64, 32])
    head_capacity: int = 64
    generator_hidden: list[int] = field(default_factory=lambda: [128])
    noise_dim: int = 100
    clone_lr: float = 0.01
    clone_momentum: float = 0.9
    clone_weight_decay: float = 5e-4
    gen_lr: float = 1e-3
    lr_drops: bool = False
    lr_drop_factor: float = 0.3
    lr_drop_at: list[float] = field(default_factory=lambda: [0.4, 0.8])
    replay_capacity: int = 10_000
    replay: str = "cbdw"
    selective_query: bool = True
    eval_every: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        self.mode = check_mode(self.mode)
        self.clone_hidden = [int(v) for v in self.clone_hidden]
        self.generator_hidden = [int(v) for v in self.generator_hidden]
        self.lr_drop_at = [float(v) for v in self.lr_drop_at]
        self.validate()

    def validate(self) -> None:
        for name in ("budget", "batch_size", "pool_size", "clones", "generators",
                     "head_capacity", "noise_dim", "replay_capacity", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("gen_batches", "replay_batches"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.budget < self.batch_size:
            raise ValueError(f"budget {self.budget} is smaller than one batch of {self.batch_size}")
        if self.clones < 2:
            raise ValueError("clone disagreement needs at least two clones")
        if self.generators > self.batch_size:
            raise ValueError("more generators than batch rows")
        if self.selective_query and self.pool_size < self.batch_size:
            raise ValueError(f"pool size {self.pool_size} is smaller than batch size {self.batch_size}")
        at = self.lr_drop_at
        if any(not 0.0 < f < 1.0 for f in at) or any(a >= b for a, b in zip(at, at[1:])):
            raise ValueError(f"lr drop fractions must be strictly increasing in (0, 1), got {at}")
        if self.replay not in ("cbdw", "circular"):
            raise ValueError(f"unknown replay kind {self.replay!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def lr_schedule(spent_fraction: float, base_lr: float, factor: float = 0.3,
                milestones: tuple[float, ...] = (0.4, 0.8), enabled: bool = True) -> float:
    """``base_lr`` times ``factor`` for every milestone already reached."""
    if not enabled:
        return base_lr
    drops = sum(1 for m in milestones if spent_fraction >= m)
    return base_lr * factor ** drops


@dataclass
class EvalSet:
    """Held-out inputs with ground truth and the victim's own labels (reporting only)."""

    x: np.ndarray
    y: np.ndarray
    victim_labels: np.ndarray

    @classmethod
    def from_victim(cls, victim: DenseNetwork, x: np.ndarray, y: np.ndarray) -> "EvalSet":
        # simulation-only shortcut: these labels are never charged to the budget
        return cls(np.asarray(x, dtype=np.float64), np.asarray(y), reference_labels(victim, x))

    def __post_init__(self) -> None:
        if len(self.x) == 0:
            raise ValueError("evaluation set is empty")


@dataclass
class MetricRecord:
    cycle: int
    spent: int
    accuracy: float
    fidelity: float
    discovered_k: int
    lam: float
    generator: dict | None = None
    clone_loss: float | None = None
    replay_loss: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _hash_arrays(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


class Extractor:
    """Owns the clone ensemble, generator ensemble, replay memory and RNG streams."""

    def __init__(self, config: ExtractionConfig, oracle: Oracle, input_dim: int):
        self.config = config
        self.oracle = oracle
        if oracle.mode != config.mode:
            raise ValueError(f"oracle answers {oracle.mode.upper()}, config expects {config.mode.upper()}")
        self.input_dim = input_dim
        seeds = np.random.SeedSequence(config.seed).spawn(4)
        init_rng, self.noise_rng, self.select_rng, replay_rng = (np.random.default_rng(s) for s in seeds)
        self.generators = GeneratorEnsemble.init(
            config.generators, config.noise_dim, config.generator_hidden, input_dim, init_rng,
            lr=config.gen_lr)
        self.clones = CloneEnsemble.init(
            config.clones, [input_dim, *config.clone_hidden, config.head_capacity], init_rng,
            mode=config.mode, lr=config.clone_lr, momentum=config.clone_momentum,
            weight_decay=config.clone_weight_decay)
        replay_cls = ReplayContainer if config.replay == "cbdw" else CircularReplay
        self.replay = replay_cls(config.replay_capacity, replay_rng)
        self.cycle = 0
        self.bootstrapped = False
        self.history: list[MetricRecord] = []
        self.last_generator: GeneratorLossReport | None = None
        self.last_clone_loss: float | None = None
        self.last_replay_loss: float | None = None

    # -- phases ------------------------------------------------------------

    @property
    def lam(self) -> float:
        return lambda_schedule(self.clones.k)

    def _update_lr(self) -> None:
        c = self.config
        frac = self.oracle.spent / self.oracle.budget
        self.clones.set_lr(lr_schedule(frac, c.clone_lr, c.lr_drop_factor, tuple(c.lr_drop_at),
                                       c.lr_drops))

    def _learn_from_victim(self, x: np.ndarray) -> VictimResponse:
        """Query, grow the head, train once on the fresh batch and offer it to the replay."""
        spent_before = self.oracle.spent if self.config.mode == HL else 0
        resp = self.oracle.query(x)
        if self.config.mode == HL:
            labels = resp.labels
            for v in labels:
                self.clones.discover(int(v), spent_before)
                self.replay.register_class(int(v))
            targets = self.clones.registry.to_heads(labels)
            stored_targets = [int(v) for v in labels]
            classes = stored_targets
        else:
            self.clones.fix_classes(resp.probs.shape[1])
            targets = pseudo_logits(resp.probs)
            stored_targets = list(resp.probs)
            classes = [int(c) for c in np.argmax(resp.probs, axis=1)]
            for c in sorted(set(classes)):
                self.replay.register_class(c)
        losses = self.clones.train_batch(x, targets, 1)
        self.last_clone_loss = float(losses.mean())
        self.replay.store(
            StoredSample(x[i].copy(), stored_targets[i], float(losses[i]), class_id=classes[i])
            for i in range(len(x))
        )
        return resp

    def _replay_targets(self, samples: list[StoredSample]) -> np.ndarray:
        if self.config.mode == HL:
            return self.clones.registry.to_heads([s.target for s in samples])
        return pseudo_logits(np.stack([s.target for s in samples]))

    def train_from_replay(self, batches: int) -> None:
        losses_seen = []
        for _ in range(batches):
            samples = self.replay.sample_balanced(self.config.batch_size)
            x = np.stack([s.x for s in samples])
            losses = self.clones.train_batch(x, self._replay_targets(samples), 1)
            self.replay.update_losses([s.sample_id for s in samples], losses)
            losses_seen.append(float(losses.mean()))
        self.last_replay_loss = float(np.mean(losses_seen)) if losses_seen else None

    def bootstrap(self) -> None:
        """Spend one unselected batch so the clones have at least one class to work with."""
        if self.bootstrapped:
            return
        self._update_lr()
        x = self.generators.generate(self.config.batch_size, self.noise_rng)
        self._learn_from_victim(x)
        self.bootstrapped = True
        log.info("bootstrap: K=%d spent=%d", self.clones.k, self.oracle.spent)

    def train_generators(self) -> GeneratorLossReport | None:
        c = self.config
        report = self.generators.train(self.clones, c.gen_batches, c.batch_size, self.lam,
                                       self.noise_rng)
        if report is not None:
            self.last_generator = report
        return report

    def query_batch(self) -> np.ndarray:
        """Inputs to spend the next victim batch on (selective or plain)."""
        c = self.config
        if not c.selective_query:
            return self.generators.generate(c.batch_size, self.noise_rng)
        pool = build_pool(self.generators, self.clones, c.pool_size, c.batch_size, self.noise_rng)
        report = select_batch(pool, c.batch_size, self.clones.k, self.select_rng)
        return pool.inputs[report.indices]

    def run_cycle(self) -> None:
        """Generator training, then one victim batch, then replay training."""
        if not self.bootstrapped:
            self.bootstrap()
        self._update_lr()
        self.train_generators()
        x = self.query_batch()
        self._learn_from_victim(x)
        self.train_from_replay(self.config.replay_batches)
        self.cycle += 1

    # -- reporting ---------------------------------------------------------

    def evaluate(self, eval_set: EvalSet) -> MetricRecord:
        pred = self.clones.predict_victim_labels(eval_set.x)
        return MetricRecord(
            cycle=self.cycle,
            spent=self.oracle.spent,
            accuracy=float(np.mean(pred == eval_set.y)),
            fidelity=float(np.mean(pred == eval_set.victim_labels)),
            discovered_k=self.clones.k,
            lam=self.lam,
            generator=self.last_generator.as_dict() if self.last_generator else None,
            clone_loss=self.last_clone_loss,
            replay_loss=self.last_replay_loss,
        )

    def run(self, eval_set: EvalSet, log_path: str | Path | None = None,
            checkpoint_path: str | Path | None = None) -> dict:
        """Cycle until the budget cannot cover another batch; returns the final summary."""
        start = time.perf_counter()
        sink = open(log_path, "a") if log_path else None
        try:
            self.bootstrap()
            while self.oracle.remaining >= self.config.batch_size:
                try:
                    self.run_cycle()
                except BudgetExhausted:
                    log.info("budget exhausted by another client; finishing")
                    break
                if self.cycle % self.config.eval_every == 0:
                    self._record(self.evaluate(eval_set), sink)
                    if checkpoint_path:
                        self.save(checkpoint_path)
            if not self.history or self.history[-1].cycle != self.cycle:
                self._record(self.evaluate(eval_set), sink)
        finally:
            if sink:
                sink.close()
        final = self.history[-1]
        return {
            "finalAccuracy": final.accuracy,
            "finalFidelity": final.fidelity,
            "spent": final.spent,
            "K": final.discovered_k,
            "cycles": self.cycle,
            "wallTime": time.perf_counter() - start,
        }

    def _record(self, rec: MetricRecord, sink) -> None:
        self.history.append(rec)
        log.info("cycle %d spent %d acc %.4f fid %.4f K %d", rec.cycle, rec.spent, rec.accuracy,
                 rec.fidelity, rec.discovered_k)
        if sink:
            sink.write(rec.to_json() + "\n")
            sink.flush()

    # -- isolation hashes and checkpoints ----------------------------------

    def clone_hash(self) -> str:
        return _hash_arrays(p.data for m in self.clones.members for p in m.parameters())

    def generator_hash(self) -> str:
        return _hash_arrays(p.data for p in self.generators.parameters())

    def state_dict(self) -> dict:
        return {
            "format": "dfme-extraction-checkpoint/1",
            "config": self.config.to_dict(),
            "input_dim": self.input_dim,
            "cycle": self.cycle,
            "bootstrapped": self.bootstrapped,
            "clones": self.clones.state_dict(),
            "generators": self.generators.state_dict(),
            "replay": self.replay.state_dict(),
            "rng": {
                "noise": self.noise_rng.bit_generator.state,
                "select": self.select_rng.bit_generator.state,
            },
            "history": [asdict(r) for r in self.history],
            "last": {
                "generator": self.last_generator.as_dict() if self.last_generator else None,
                "clone_loss": self.last_clone_loss,
                "replay_loss": self.last_replay_loss,
            },
        }

    def save(self, path: str | Path) -> None:
        tmp = Path(str(path) + ".tmp")
        tmp.write_text(json.dumps(self.state_dict()))
        tmp.replace(path)

    @classmethod
    def from_state_dict(cls, state: dict, oracle: Oracle) -> "Extractor":
        config = ExtractionConfig.from_dict(state["config"])
        ex = cls(config, oracle, state["input_dim"])
        ex.cycle = state["cycle"]
        ex.bootstrapped = state["bootstrapped"]
        ex.clones = CloneEnsemble.from_state_dict(state["clones"])
        ex.generators = GeneratorEnsemble.from_state_dict(state["generators"])
        ex.replay = replay_from_state_dict(state["replay"])
        ex.noise_rng.bit_generator.state = state["rng"]["noise"]
        ex.select_rng.bit_generator.state = state["rng"]["select"]
        ex.history = [MetricRecord(**r) for r in state["history"]]
        last = state["last"]
        if last["generator"]:
            g = last["generator"]
            ex.last_generator = GeneratorLossReport(g["disagreement"], g["diversity"], g["lambda"],
                                                    g["total"])
        ex.last_clone_loss = last["clone_loss"]
        ex.last_replay_loss = last["replay_loss"]
        return ex

    @classmethod
    def load(cls, path: str | Path, oracle: Oracle) -> "Extractor":
        return cls.from_state_dict(json.loads(Path(path).read_text()), oracle)
