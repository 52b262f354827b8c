"""Command line: ``generate``, ``train``, ``eval``, and ``sweep``.

Exit codes: 0 on success, 2 for usage and configuration mistakes,
3 for unreadable or malformed input data, 4 for a checkpoint whose
container format does not match this package version.

``HVRP_THREADS`` caps the worker threads used for per-instance
evaluation; unset it (or set 1) for strictly sequential runs.  CSV and
instance files of a given seed are byte-stable across repeats; the
``wallclock_s`` and ``time_ms`` timing columns and the manifest
timestamps are the only run-dependent values.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    CONFIG_KEYS,
    PRESETS,
    build_train_config,
    preset_values,
    read_config_file,
)
from .decoder import rollout
from .encoder import (
    build_hyperedges,
    initial_embedding,
    selection_scores,
)
from .errors import (
    CheckpointFormatError,
    ContractViolation,
    MalformedSolutionError,
    ParseError,
    TooLargeError,
)
from .heuristics import (
    ORACLE_MAX_N,
    clarke_wright,
    exact_oracle,
    gap_table,
    nearest_neighbor,
)
from .instances import (
    Instance,
    atomic_write_text,
    generate_instance,
    iter_instances,
    write_instance_file,
)
from .routes import Solution
from .training import (
    Model,
    best_of_k,
    build_model,
    encode_batch,
    load_model,
    train,
    train_config_to_dict,
    validation_instances,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_VERSION = 4

SWEEP_DELTAS = (-0.1, -0.05, 0.0, 0.05, 0.1)
SWEEP_LAMBDAS = (0.1, 0.2, 0.3)
SWEEP_CSV_HEADER = "delta,lambda,val_cost,mean_degree"

BASELINES = {
    "nn": "nearest_neighbor",
    "cw": "clarke_wright",
    "oracle": "oracle",
}
EVAL_CSV_HEADER = "instance_id,method,cost,gap_pct,time_ms"

ABLATIONS = ("no-hypergraph", "no-augmentation", "no-dual-pointer")


def worker_cap() -> int:
    """Worker-thread budget from ``HVRP_THREADS`` (default 1)."""
    raw = os.environ.get("HVRP_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ParseError(f"HVRP_THREADS must be an integer, got {raw!r}")


def _fail(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_manifest(path: Path, payload: dict) -> None:
    body = {"package_version": __version__, **payload}
    atomic_write_text(str(path),
                      json.dumps(body, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Shared configuration plumbing
# ---------------------------------------------------------------------------

def _flag_dest(key: str) -> str:
    return f"cfgkey_{key}"


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("configuration overrides")
    group.add_argument("--preset", choices=sorted(PRESETS), default=None,
                       help="start from a named preset")
    group.add_argument("--config", metavar="FILE", default=None,
                       help="flat 'key = value' configuration file")
    for key, spec in CONFIG_KEYS.items():
        group.add_argument("--" + key.replace("_", "-"),
                           dest=_flag_dest(key), type=spec.convert,
                           default=None, metavar="V",
                           help=f"override {key}")


def _resolved_config(args: argparse.Namespace):
    layers = []
    if args.preset is not None:
        layers.append(preset_values(args.preset))
    if args.config is not None:
        layers.append(read_config_file(args.config))
    flags = {key: getattr(args, _flag_dest(key)) for key in CONFIG_KEYS}
    ablate = getattr(args, "ablate", None)
    if ablate is not None:
        variant = ablate.replace("-", "_")
        if flags.get("variant") not in (None, variant):
            raise ValueError(
                f"--ablate {ablate} contradicts --variant "
                f"{flags['variant']}")
        flags["variant"] = variant
    layers.append(flags)
    return build_train_config(layers)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _cmd_generate(args: argparse.Namespace) -> int:
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    files = []
    for i in range(args.count):
        child = int(rng.integers(0, 2**63 - 1))
        inst = generate_instance(args.customers, args.capacity, child)
        path = out / f"instance_{i:03d}.vrp"
        write_instance_file(inst, str(path))
        files.append(path.name)
    _write_manifest(out / "manifest.json", {
        "command": "generate",
        "count": args.count,
        "customers": args.customers,
        "capacity": args.capacity,
        "seed": args.seed,
        "outputs": files,
        "started": started,
        "finished": _now(),
    })
    print(f"wrote {len(files)} instances to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _cmd_train(args: argparse.Namespace) -> int:
    started = _now()
    cfg = _resolved_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": "train",
        "config": train_config_to_dict(cfg),
        "seed": cfg.seed,
        "resumed_from": str(args.resume) if args.resume else None,
        "started": started,
    }
    _write_manifest(out / "manifest.json", manifest)
    if cfg.model.variant != "full":
        print(f"variant: {cfg.model.variant}")
    result = train(cfg, out_dir=out, progress=print,
                   resume_from=args.resume)
    outputs = ["training.csv", "best.ckpt"] + sorted(
        f"checkpoints/{p.name}" for p in (out / "checkpoints").glob("*.ckpt"))
    _write_manifest(out / "manifest.json",
                    {**manifest, "outputs": outputs, "finished": _now()})
    print(f"best validation cost {result.best_val_cost!r} "
          f"at epoch {result.best_epoch}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _split_baselines(text: str) -> list[str]:
    tokens = [t.strip() for t in text.split(",") if t.strip()]
    for t in tokens:
        if t not in BASELINES:
            raise ValueError(f"unknown baseline {t!r} (choose from "
                             f"{', '.join(BASELINES)})")
    return [BASELINES[t] for t in tokens]


def _evaluate_instance(inst: Instance, policy: str, baselines: list[str],
                       model: Model, samples: int,
                       rng: np.random.Generator):
    solutions: dict[str, Solution] = {}
    times: dict[str, float] = {}

    def run(method: str, solve) -> None:
        t0 = time.perf_counter()
        solutions[method] = solve()
        times[method] = (time.perf_counter() - t0) * 1000.0

    if policy == "greedy":
        def model_solve():
            graph = encode_batch([inst], model.encoder, model.cfg,
                                 training=False)[0]
            return rollout(graph, model.decoder, model.cfg,
                           mode="greedy").solution
        run("model_greedy", model_solve)
    else:
        run("model_sampling", lambda: best_of_k(model, inst, samples, rng))
    for method in baselines:
        run(method, {
            "nearest_neighbor": lambda: nearest_neighbor(inst),
            "clarke_wright": lambda: clarke_wright(inst),
            "oracle": lambda: exact_oracle(inst),
        }[method])

    # small instances are anchored at the true optimum, larger ones at
    # the best method in the run
    if "oracle" in solutions:
        best_known = solutions["oracle"].cost
    elif inst.n <= ORACLE_MAX_N:
        best_known = exact_oracle(inst).cost
    else:
        best_known = None
    rows = gap_table(inst, solutions, times, best_known=best_known)
    for row in rows:
        if not row.feasible:
            raise ContractViolation(
                f"{row.method} produced an infeasible solution on "
                f"{inst.name}")
    return rows


def _cmd_eval(args: argparse.Namespace) -> int:
    started = _now()
    baselines = _split_baselines(args.baselines)
    model, _ = load_model(args.checkpoint)
    instances = iter_instances(args.instances)
    if not instances:
        _fail("no instances found")
        return EXIT_USAGE
    if "oracle" in baselines:
        too_big = [i.name for i in instances if i.n > ORACLE_MAX_N]
        if too_big:
            _fail(f"oracle supports up to {ORACLE_MAX_N} customers; "
                  f"too large: {', '.join(too_big)}")
            return EXIT_USAGE

    children = np.random.SeedSequence(args.seed).spawn(len(instances))

    def work(item):
        index, inst = item
        return _evaluate_instance(inst, args.policy, baselines, model,
                                  args.samples,
                                  np.random.default_rng(children[index]))

    cap = worker_cap()
    if cap > 1:
        with ThreadPoolExecutor(max_workers=cap) as pool:
            tables = list(pool.map(work, enumerate(instances)))
    else:
        tables = [work(item) for item in enumerate(instances)]

    lines = [EVAL_CSV_HEADER]
    for rows in tables:
        for row in rows:
            lines.append(",".join([
                row.instance, row.method, repr(row.cost),
                repr(row.gap * 100.0), repr(row.time_ms),
            ]))
    out = Path(args.out)
    atomic_write_text(str(out), "\n".join(lines) + "\n")
    _write_manifest(out.with_name(out.name + ".manifest.json"), {
        "command": "eval",
        "policy": args.policy,
        "samples": args.samples,
        "baselines": args.baselines,
        "checkpoint": str(args.checkpoint),
        "seed": args.seed,
        "outputs": [out.name],
        "started": started,
        "finished": _now(),
    })
    print(f"wrote {sum(len(t) for t in tables)} rows to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _sweep_grids(args: argparse.Namespace) -> dict[str, tuple[float, ...]]:
    grids = {"delta": SWEEP_DELTAS, "lambda": SWEEP_LAMBDAS}
    names = args.param or []
    value_lists = args.values or []
    if len(names) != len(value_lists):
        raise ValueError("each --param needs exactly one --values list")
    for name, raw in zip(names, value_lists):
        if name not in grids:
            raise ValueError(f"unknown sweep parameter {name!r} "
                             f"(choose from delta, lambda)")
        try:
            values = tuple(float(v) for v in raw.split(",") if v.strip())
        except ValueError:
            raise ValueError(f"bad value list for {name}: {raw!r}")
        if not values:
            raise ValueError(f"empty value list for {name}")
        grids[name] = values
    return grids


def _cmd_sweep(args: argparse.Namespace) -> int:
    started = _now()
    grids = _sweep_grids(args)
    cfg = _resolved_config(args)
    if cfg.model.variant == "no_hypergraph":
        _fail("sweep measures hyperedge structure; the no_hypergraph "
              "variant has none")
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    val = validation_instances(cfg)

    # Degrees are thresholdings of one shared score matrix per instance:
    # the selection parameters drawn from the run seed, before any
    # training, scored on the validation set.  That makes the degree
    # column exactly non-increasing along ascending thresholds, which a
    # per-cell trained measurement would not guarantee.
    probe = build_model(cfg.model, seed=cfg.seed)
    embeddings = initial_embedding(val, probe.encoder, cfg.model,
                                   training=False)
    score_mats = [selection_scores(h0, probe.encoder.sel).data
                  for h0 in embeddings]

    lines = [SWEEP_CSV_HEADER]
    for lam in grids["lambda"]:
        for delta in grids["delta"]:
            cell_model = dataclasses.replace(cfg.model, delta=delta,
                                             lam=lam)
            degrees = []
            for inst, scores in zip(val, score_mats):
                edges = build_hyperedges(scores, inst, cell_model)
                degrees.append(edges.mean_degree())
            result = train(dataclasses.replace(cfg, model=cell_model,
                                               epochs=args.budget))
            lines.append(",".join([
                repr(delta), repr(lam),
                repr(result.best_val_cost),
                repr(float(np.mean(degrees))),
            ]))
    atomic_write_text(str(out / "sweep.csv"), "\n".join(lines) + "\n")
    _write_manifest(out / "manifest.json", {
        "command": "sweep",
        "config": train_config_to_dict(cfg),
        "seed": cfg.seed,
        "budget": args.budget,
        "deltas": list(grids["delta"]),
        "lambdas": list(grids["lambda"]),
        "outputs": ["sweep.csv"],
        "started": started,
        "finished": _now(),
    })
    print(f"wrote {len(lines) - 1} grid cells to {out / 'sweep.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hypervrp",
        description="Constraint-aware hypergraph policies for capacitated "
                    "vehicle routing.")
    parser.add_argument("--version", action="version",
                        version=f"hypervrp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write random instance files")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=int, default=16,
                   help="number of instances (default 16)")
    g.add_argument("--nodes", "--customers", dest="customers", type=int,
                   default=20,
                   help="customers per instance, the depot is added on "
                        "top (default 20)")
    g.add_argument("--capacity", type=int, default=30,
                   help="vehicle capacity (default 30)")
    g.add_argument("--seed", type=int, default=0, help="random seed")
    g.set_defaults(func=_cmd_generate)

    t = sub.add_parser("train", help="train a routing policy")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", default=None, metavar="CKPT",
                   help="continue from a training checkpoint")
    t.add_argument("--ablate", choices=ABLATIONS, default=None,
                   help="train a reduced model variant")
    _add_config_flags(t)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint against "
                                    "classical baselines")
    e.add_argument("--checkpoint", required=True,
                   help="training checkpoint to evaluate")
    e.add_argument("--instances", required=True, nargs="+",
                   help="instance files and/or directories of *.vrp files")
    e.add_argument("--out", required=True, help="output CSV path")
    e.add_argument("--policy", choices=("greedy", "sample"),
                   default="greedy",
                   help="decoding policy for the model row "
                        "(default greedy)")
    e.add_argument("--samples", type=int, default=128,
                   help="rollouts for the sampling policy, best cost "
                        "kept (default 128)")
    e.add_argument("--baselines", default="nn,cw",
                   help="comma-separated subset of: nn, cw, oracle "
                        "(default nn,cw)")
    e.add_argument("--seed", type=int, default=0,
                   help="sampling seed (default 0)")
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("sweep",
                       help="threshold/sparsity sensitivity grid: per "
                            "cell, a short-budget training run plus the "
                            "hyperedge degree at the shared initial "
                            "weights")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--param", action="append", metavar="NAME",
                   help="grid parameter to override (delta or lambda); "
                        "repeatable, pair each with a --values list")
    s.add_argument("--values", action="append", metavar="V1,V2,...",
                   help="comma-separated values for the preceding "
                        "--param")
    s.add_argument("--budget", type=int, default=2, metavar="EPOCHS",
                   help="training epochs per grid cell (default 2)")
    _add_config_flags(s)
    s.set_defaults(func=_cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        _fail(str(exc))
        return EXIT_DATA
    except MalformedSolutionError as exc:
        _fail(str(exc))
        return EXIT_DATA
    except CheckpointFormatError as exc:
        _fail(str(exc))
        return EXIT_VERSION
    except (TooLargeError, ValueError) as exc:
        _fail(str(exc))
        return EXIT_USAGE
    except OSError as exc:
        _fail(str(exc))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
