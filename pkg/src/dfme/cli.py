"""``dfme`` command line: datasets, victim training and serving, extraction runs, aggregation.

Subcommands::

    dfme make-dataset  --dataset blobs:2:3 --out blobs.csv
    dfme train-victim  --dataset digits --victim-arch 64-64-32-10 --out victim.json
    dfme serve         --victim-file victim.json --mode hl --budget 50000 --endpoint 127.0.0.1:5555
    dfme extract       --victim-file victim.json --repeats 3 --out runs/
    dfme aggregate     --out runs/

Set ``DFME_LOG_LEVEL`` (``DEBUG``, ``INFO``, ...) to control log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from dfme.datasets import LabeledDataset, load_dataset, train_test_split, write_idx
from dfme.engine import EvalSet, ExtractionConfig, Extractor
from dfme.nn import DenseNetwork, parse_arch
from dfme.victim import MODES, VictimOracle, train_victim
from dfme.wire import RemoteVictimOracle, parse_endpoint, serve_victim

log = logging.getLogger("dfme")

VICTIM_FORMAT = "dfme-victim/1"
RUN_COLUMNS = ["run_id", "seed", "budget", "mode", "final_accuracy", "final_fidelity",
               "discovered_K", "wall_seconds"]
AGGREGATE_COLUMNS = ["metric", "n", "mean", "std", "ci95_half_width"]
AGGREGATED_METRICS = ["final_accuracy", "final_fidelity", "discovered_K", "wall_seconds"]


# ---------------------------------------------------------------------------
# victim files


@dataclass
class VictimFile:
    net: DenseNetwork
    dataset: str
    eval_x: np.ndarray
    eval_y: np.ndarray
    test_accuracy: float
    train_accuracy: float
    seed: int
    epochs: int

    def to_dict(self) -> dict:
        return {
            "format": VICTIM_FORMAT,
            "dataset": self.dataset,
            "arch": self.net.sizes,
            "seed": self.seed,
            "epochs": self.epochs,
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "network": self.net.state_dict(),
            "eval": {"x": self.eval_x.tolist(), "y": self.eval_y.tolist()},
        }

    def save(self, path: str | Path) -> None:
        # sorted keys and repr floats: same seed gives byte-identical files
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "VictimFile":
        d = json.loads(Path(path).read_text())
        if d.get("format") != VICTIM_FORMAT:
            raise ValueError(f"{path}: not a victim file (format {d.get('format')!r})")
        return cls(
            DenseNetwork.from_state_dict(d["network"]),
            d["dataset"],
            np.array(d["eval"]["x"], dtype=np.float64),
            np.array(d["eval"]["y"], dtype=np.int64),
            d["test_accuracy"],
            d["train_accuracy"],
            d["seed"],
            d["epochs"],
        )

    def eval_set(self) -> EvalSet:
        return EvalSet.from_victim(self.net, self.eval_x, self.eval_y)


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def resolve_arch(arch: str | None, data: LabeledDataset) -> list[int]:
    if arch is None:
        return [data.input_dim, 64, 32, data.n_classes]
    sizes = parse_arch(arch)
    if sizes[0] != data.input_dim:
        raise ValueError(f"architecture {arch!r} takes {sizes[0]} inputs, dataset has {data.input_dim}")
    if sizes[-1] < data.n_classes:
        raise ValueError(f"architecture {arch!r} has {sizes[-1]} outputs for {data.n_classes} classes")
    return sizes


def build_victim(dataset: str, arch: str | None, seed: int, epochs: int,
                 test_fraction: float = 0.25) -> VictimFile:
    rng = np.random.default_rng(seed)
    data = load_dataset(dataset, rng)
    sizes = resolve_arch(arch, data)
    train, test = train_test_split(data, test_fraction, rng)
    net = DenseNetwork.init(sizes, rng)
    net, report = train_victim(train, net, epochs, rng, test=test)
    return VictimFile(net, dataset, test.x, test.y, report.test_accuracy, report.train_accuracy,
                      seed, epochs)


# ---------------------------------------------------------------------------
# aggregation


def summarize(values: Sequence[float]) -> tuple[float, float, float]:
    """Mean, sample std and the normal-approximation 95% half-width ``1.96 s / sqrt(n)``."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        raise ValueError("nothing to aggregate")
    mean = float(v.mean())
    std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return mean, std, 1.96 * std / math.sqrt(len(v))


def aggregate_rows(rows: Sequence[dict]) -> list[dict]:
    out = []
    for metric in AGGREGATED_METRICS:
        mean, std, half = summarize([float(r[metric]) for r in rows])
        out.append({"metric": metric, "n": len(rows), "mean": mean, "std": std,
                    "ci95_half_width": half})
    return out


def write_csv(path: Path, columns: list[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in columns})


def read_runs(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# commands


def config_from_args(args: argparse.Namespace) -> ExtractionConfig:
    return ExtractionConfig(
        budget=args.budget,
        batch_size=args.batch_size,
        pool_size=args.pool_size,
        gen_batches=args.gen_batches,
        replay_batches=args.replay_batches,
        clones=args.clones,
        generators=args.generators,
        mode=args.mode,
        clone_lr=args.clone_lr,
        gen_lr=args.gen_lr,
        lr_drops=args.lr_drops == "on",
        replay_capacity=args.replay_capacity,
        replay="circular" if args.circular_replay else "cbdw",
        selective_query=not args.no_selective_query,
        seed=args.seed,
    )


def cmd_make_dataset(args: argparse.Namespace) -> int:
    data = load_dataset(args.dataset, np.random.default_rng(args.seed))
    out = Path(args.out)
    if args.format == "csv":
        with open(out, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["label"] + [f"x{i}" for i in range(data.input_dim)])
            for x, y in zip(data.x, data.y):
                w.writerow([int(y)] + [repr(float(v)) for v in x])
        print(f"wrote {len(data)} rows to {out}")
    else:
        write_idx(out.with_suffix(".images.idx"), data.x.astype(">f8"))
        write_idx(out.with_suffix(".labels.idx"), data.y.astype(np.uint8))
        print(f"wrote {len(data)} samples to {out.with_suffix('.images.idx')} and "
              f"{out.with_suffix('.labels.idx')}")
    return 0


def cmd_train_victim(args: argparse.Namespace) -> int:
    victim = build_victim(args.dataset, args.victim_arch, args.seed, args.epochs)
    victim.save(args.out)
    print(f"victim {victim.net.sizes} on {args.dataset}: train accuracy "
          f"{victim.train_accuracy:.4f}, test accuracy {victim.test_accuracy:.4f}")
    print(f"wrote {args.out} (sha256 {file_sha256(args.out)[:16]})")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    victim = VictimFile.load(args.victim_file)
    oracle = VictimOracle(victim.net, args.budget, args.mode)
    serve_victim(oracle, parse_endpoint(args.endpoint))
    return 0


def run_one(config: ExtractionConfig, victim: VictimFile, endpoint: str | None,
            log_path: Path) -> dict:
    if endpoint:
        oracle = RemoteVictimOracle(parse_endpoint(endpoint), config.mode)
    else:
        oracle = VictimOracle(victim.net, config.budget, config.mode)
    try:
        extractor = Extractor(config, oracle, victim.net.input_dim)
        return extractor.run(victim.eval_set(), log_path=log_path)
    finally:
        oracle.close()


def cmd_extract(args: argparse.Namespace) -> int:
    if args.repeats < 1:
        raise ValueError("--repeats must be at least 1")
    if args.endpoint and args.repeats > 1:
        raise ValueError("a served victim has one shared ledger; use --repeats 1 with --endpoint")
    base = config_from_args(args)
    victim = VictimFile.load(args.victim_file)
    out = Path(args.out)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    echo = {
        "config": base.to_dict(),
        "config_digest": base.digest(),
        "repeats": args.repeats,
        "victim_file": str(args.victim_file),
        "victim_sha256": file_sha256(args.victim_file),
        "endpoint": args.endpoint,
    }
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    rows = []
    for i in range(args.repeats):
        cfg = ExtractionConfig.from_dict({**base.to_dict(), "seed": base.seed + i})
        run_id = f"run{i:03d}"
        run_echo = {"run_id": run_id, "config": cfg.to_dict(), "config_digest": cfg.digest()}
        (out / "runs" / f"{run_id}.config.json").write_text(
            json.dumps(run_echo, indent=2, sort_keys=True) + "\n")
        log_path = out / "runs" / f"{run_id}.jsonl"
        log_path.unlink(missing_ok=True)
        summary = run_one(cfg, victim, args.endpoint, log_path)
        row = {
            "run_id": run_id,
            "seed": cfg.seed,
            "budget": cfg.budget,
            "mode": cfg.mode,
            "final_accuracy": summary["finalAccuracy"],
            "final_fidelity": summary["finalFidelity"],
            "discovered_K": summary["K"],
            "wall_seconds": round(summary["wallTime"], 3),
        }
        rows.append(row)
        print(f"{run_id} seed {cfg.seed}: accuracy {row['final_accuracy']:.4f} fidelity "
              f"{row['final_fidelity']:.4f} K {row['discovered_K']} ({row['wall_seconds']:.1f}s)")
    write_csv(out / "runs.csv", RUN_COLUMNS, rows)
    write_csv(out / "aggregate.csv", AGGREGATE_COLUMNS, aggregate_rows(rows))
    _print_aggregate(aggregate_rows(rows))
    return 0


def cmd_aggregate(args: argparse.Namespace) -> int:
    out = Path(args.out)
    rows = read_runs(out / "runs.csv")
    agg = aggregate_rows(rows)
    write_csv(out / "aggregate.csv", AGGREGATE_COLUMNS, agg)
    _print_aggregate(agg)
    return 0


def _print_aggregate(agg: list[dict]) -> None:
    for r in agg:
        print(f"{r['metric']}: {r['mean']:.4f} +/- {r['ci95_half_width']:.4f} (n={r['n']})")


# ---------------------------------------------------------------------------
# argument parsing


def _add_extraction_flags(p: argparse.ArgumentParser) -> None:
    d = ExtractionConfig()
    p.add_argument("--victim-file", required=True,
                   help="victim JSON; supplies the in-process victim and the evaluation split")
    p.add_argument("--endpoint", help="query a served victim at HOST:PORT instead")
    p.add_argument("--mode", choices=MODES, default=d.mode)
    p.add_argument("--budget", type=int, default=d.budget)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--pool-size", type=int, default=d.pool_size)
    p.add_argument("--generators", type=int, default=d.generators)
    p.add_argument("--clones", type=int, default=d.clones)
    p.add_argument("--gen-batches", type=int, default=d.gen_batches)
    p.add_argument("--replay-batches", type=int, default=d.replay_batches)
    p.add_argument("--replay-capacity", type=int, default=d.replay_capacity)
    p.add_argument("--clone-lr", type=float, default=d.clone_lr)
    p.add_argument("--gen-lr", type=float, default=d.gen_lr)
    p.add_argument("--lr-drops", choices=("on", "off"), default="on" if d.lr_drops else "off")
    p.add_argument("--seed", type=int, default=d.seed, help="seed of the first repeat")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--no-selective-query", action="store_true",
                   help="ablation: query plain generator batches")
    p.add_argument("--circular-replay", action="store_true",
                   help="ablation: FIFO replay with uniform sampling")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfme", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="write a dataset descriptor out as CSV or IDX")
    p.add_argument("--dataset", default="blobs")
    p.add_argument("--format", choices=("csv", "idx"), default="csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train-victim", help="train and save a victim classifier")
    p.add_argument("--dataset", default="digits",
                   help="digits | blobs[:DIM:CLASSES] | csv:PATH | idx:IMAGES,LABELS")
    p.add_argument("--victim-arch", help="layer sizes such as 64-64-32-10")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="victim JSON file to write")
    p.set_defaults(func=cmd_train_victim)

    p = sub.add_parser("serve", help="serve a victim over TCP until interrupted")
    p.add_argument("--victim-file", required=True)
    p.add_argument("--mode", choices=MODES, default="hl")
    p.add_argument("--budget", type=int, default=ExtractionConfig().budget)
    p.add_argument("--endpoint", default="127.0.0.1:5555", help="HOST:PORT to bind")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("extract", help="run seeded extraction repeats and aggregate them")
    _add_extraction_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("aggregate", help="recompute aggregate.csv from runs.csv")
    p.add_argument("--out", required=True, help="directory holding runs.csv")
    p.set_defaults(func=cmd_aggregate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("DFME_LOG_LEVEL", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"dfme: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
