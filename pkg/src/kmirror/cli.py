"""Command-line entry points: simulate, fit, evaluate, sweep.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical breakdown.
"""

from __future__ import annotations

import argparse
import itertools
import json
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import DataError, load_points_csv, sample_toy_stream, save_points_csv, toy_ground_truth_density
from .harness import (
    ConfigError,
    compute_rmse,
    compute_test_loss,
    config_from_dict,
    load_config,
    run_experiment,
)
from .models import make_poisson_model
from .optimizers import NumericalBreakdown
from .rkhs import KL, dual_function_from_json, evaluate_primal_many


def _cmd_simulate(args) -> int:
    stream = sample_toy_stream(args.count, seed=args.seed)
    save_points_csv(args.out, stream)
    print(f"wrote {len(stream)} points to {args.out}")
    return 0


def _cmd_fit(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.record_every is not None:
        config.record_every = args.record_every
    if args.normalize:
        config.dataset["normalize"] = True
    out = args.out or config.out_dir or "runs/latest"
    result = run_experiment(config, out_dir=out)
    print(json.dumps(result.summary, indent=2))
    return 0


def _cmd_evaluate(args) -> int:
    model_path = Path(args.model)
    if not model_path.exists():
        raise DataError(f"no such model file: {model_path}")
    estimate = dual_function_from_json(model_path.read_text())
    data = load_points_csv(args.data, normalize=args.normalize)
    domain = tuple((float(lo), float(hi)) for lo, hi in zip(*[iter(args.domain)] * 2)) if args.domain else data.bounds
    model = make_poisson_model(domain, args.grid_size)
    report = {
        "test_loss": compute_test_loss(estimate, model, data.points),
        "model_order": estimate.model_order,
        "n_points": len(data),
    }
    if args.toy_truth:
        grid = np.linspace(domain[0][0], domain[0][1], 1001).reshape(-1, 1)
        report["rmse_vs_toy_truth"] = compute_rmse(estimate, toy_ground_truth_density, grid)
    if estimate.mirror_map.kind == KL:
        grid = np.linspace(domain[0][0], domain[0][1], 1001).reshape(-1, 1) if len(domain) == 1 else None
        if grid is not None:
            report["min_value"] = float(np.min(evaluate_primal_many(estimate, grid)))
    print(json.dumps(report, indent=2))
    return 0


def _sweep_one(payload) -> str:
    raw, out_dir = payload
    config = config_from_dict(raw)
    run_experiment(config, out_dir=out_dir)
    return out_dir


def _cmd_sweep(args) -> int:
    base = json.loads(Path(args.config).read_text())
    axes: list[tuple[str, list]] = []
    for spec in args.param or []:
        name, _, values = spec.partition("=")
        if not values:
            raise ConfigError(f"--param {spec!r}: expected NAME=v1,v2,...")
        axes.append((name, [json.loads(v) for v in values.split(",")]))
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.get("seed", 0)]
    out_root = Path(args.out)
    jobs = []
    for combo in itertools.product(*[vals for _, vals in axes]) if axes else [()]:
        for seed in seeds:
            raw = json.loads(json.dumps(base))
            tag_parts = []
            for (name, _), value in zip(axes, combo):
                _assign(raw, name, value)
                tag_parts.append(f"{name.replace('.', '_')}={value}")
            raw["seed"] = seed
            tag_parts.append(f"seed={seed}")
            config_from_dict(raw)  # fail fast on bad combos
            jobs.append((raw, str(out_root / "__".join(tag_parts))))
    # spawned workers + single-threaded BLAS: the pool is the only parallelism
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=args.workers, mp_context=ctx) as pool:
        for done in pool.map(_sweep_one, jobs):
            print(f"finished {done}")
    return 0


def _assign(raw: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kmirror", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="sample the 1-D toy point process to CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=10211, help="expected number of events")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("fit", help="run one experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--record-every", type=int, default=None)
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(fn=_cmd_fit)

    p = sub.add_parser("evaluate", help="score a saved model against a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--grid-size", type=int, default=100)
    p.add_argument("--domain", type=float, nargs="*", default=None, help="lo hi per dimension")
    p.add_argument("--toy-truth", action="store_true")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("sweep", help="grid over config fields and seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--param", action="append", help="dotted NAME=v1,v2,... (repeatable)")
    p.add_argument("--seeds", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=2)
    p.set_defaults(fn=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalBreakdown as exc:
        print(f"numerical breakdown: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
