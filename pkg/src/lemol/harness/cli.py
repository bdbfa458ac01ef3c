"""``lemol`` command line: run, train-om, evaluate, aggregate, plot, export, config."""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from ..agent import AgentVariant
from ..experience import TrajectoryFormatError, TrajectoryStore, export_jsonl, store_read
from ..opponent_model import OmVariant, evaluate_om, holdout_split, init_om_params, replay_trace, train_om, \
    write_trace_csv
from ..tensor import CheckpointError, load_checkpoint, save_checkpoint
from .aggregate import AggregationError, aggregate_runs, read_curve_csv, write_curve_csv
from .config import PRESETS, ConfigError, ExperimentConfig, load_config, parse_seeds, render_config
from .orchestrate import OverwriteError, PhaseError, orchestrate
from .plot import render_svg

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_EXISTS, EXIT_PHASE = 0, 1, 2, 3, 4


def _config(args) -> ExperimentConfig:
    base = PRESETS[args.preset]()
    config = load_config(args.config, base) if args.config else base
    if getattr(args, "variant", None):
        config = config.with_variant(args.variant)
    if getattr(args, "seeds", None):
        config = config.with_seeds(parse_seeds(args.seeds))
    if getattr(args, "out", None):
        config = config.with_output(args.out)
    return config


def _guard(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise OverwriteError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _records(store_dir):
    store = TrajectoryStore(store_dir)
    if not store.paths():
        raise ValueError(f"no .ltrj files in {store_dir}")
    return store.read_all()


def cmd_run(args) -> int:
    config = _config(args)
    results = orchestrate(config, force=args.force, log=lambda m: print(m, flush=True), workers=args.workers)
    tail = max(1, config.experiment.episodes // 10)
    for seed, res in results.items():
        final = float(np.mean([m.mean_reward_defender for m in res.metrics[-tail:]]))
        print(f"seed {seed}: final-10% mean defender reward {final:.4f}")
    return EXIT_OK


def cmd_train_om(args) -> int:
    config = _config(args)
    records = _records(args.store)
    params = init_om_params(np.random.default_rng(config.om.seed), config.om)
    report = train_om(records, params, config.om, OmVariant(args.kind))
    out = _guard(Path(args.output), args.force)
    save_checkpoint(out, {"om": params})
    report.write_csv(_guard(out.with_name(out.stem + "_report.csv"), args.force))
    print(f"trained {args.kind} opponent model on {report.n_train} trajectories; "
          f"final held-out loss {report.holdout_loss[-1]:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _config(args)
    records = _records(args.store)
    params = init_om_params(np.random.default_rng(0), config.om)
    load_checkpoint(args.om, {"om": params})
    held = records if args.all else [records[i] for i in holdout_split(len(records), config.om.holdout_fraction)[1]]
    if not held:
        raise ValueError("no held-out trajectories; pass --all to evaluate every trajectory")
    ce, _ = evaluate_om(held, params, config.om, args.kind)
    if args.trace:
        trace = [row for rec in held for row in replay_trace(rec, params, args.kind, config.om)]
        write_trace_csv(_guard(Path(args.trace), args.force), trace)
    print(f"held-out cross-entropy over {len(held)} trajectories: {ce:.6f} (uniform {math.log(5):.6f})")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    curve = aggregate_runs(args.metrics, args.column, args.window)
    write_curve_csv(_guard(Path(args.output), args.force), curve)
    print(f"aggregated {curve.n_runs} runs of {len(curve.mean)} episodes into {args.output}")
    return EXIT_OK


def cmd_plot(args) -> int:
    labels = args.labels or [Path(p).stem for p in args.curves]
    if len(labels) != len(args.curves):
        raise ValueError("--labels must match --curves one to one")
    curves = {lab: read_curve_csv(p) for lab, p in zip(labels, args.curves)}
    svg = render_svg(curves, args.title, args.ylabel, args.window)
    _guard(Path(args.output), args.force).write_text(svg)
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_export(args) -> int:
    export_jsonl(_guard(Path(args.output), args.force), store_read(args.trajectory))
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_config(args) -> int:
    text = render_config(_config(args))
    if args.output:
        _guard(Path(args.output), args.force).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lemol", description="Opponent-learning-aware MADDPG experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, variant=True):
        sp.add_argument("--config", help="INI file; keys it omits come from --preset")
        sp.add_argument("--preset", choices=sorted(PRESETS), default="full")
        if variant:
            sp.add_argument("--variant", choices=[v.label for v in AgentVariant])
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    sp = sub.add_parser("run", help="collect, train the opponent model, evaluate")
    common(sp)
    sp.add_argument("--seeds", help="e.g. 0..4 or 0,3,7")
    sp.add_argument("--out", help="output directory (LEMOL_OUT overrides)")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("train-om", help="train an opponent model on a trajectory store")
    common(sp, variant=False)
    sp.add_argument("--store", required=True)
    sp.add_argument("--output", required=True, help="checkpoint path (.lmol)")
    sp.add_argument("--kind", choices=["full", "ablated", "naive"], default="full")
    sp.set_defaults(func=cmd_train_om)

    sp = sub.add_parser("evaluate", help="replay a trained opponent model over held-out trajectories")
    common(sp, variant=False)
    sp.add_argument("--store", required=True)
    sp.add_argument("--om", required=True)
    sp.add_argument("--kind", choices=["full", "ablated", "naive"], default="full")
    sp.add_argument("--trace", help="write the per-step cross-entropy trace CSV here")
    sp.add_argument("--all", action="store_true", help="evaluate every trajectory, not only the held-out split")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("aggregate", help="merge per-seed metrics CSVs")
    sp.add_argument("metrics", nargs="+")
    sp.add_argument("--column", default="mean_reward_defender")
    sp.add_argument("--window", type=int, default=1)
    sp.add_argument("--output", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_aggregate)

    sp = sub.add_parser("plot", help="render aggregated curves to SVG")
    sp.add_argument("curves", nargs="+")
    sp.add_argument("--labels", nargs="*")
    sp.add_argument("--title", default="")
    sp.add_argument("--ylabel", default="mean defender reward")
    sp.add_argument("--window", type=int, default=50)
    sp.add_argument("--output", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("export", help="dump a trajectory file as JSON lines")
    sp.add_argument("trajectory")
    sp.add_argument("--output", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("config", help="print or save a resolved configuration")
    common(sp)
    sp.add_argument("--seeds")
    sp.add_argument("--out", help="output directory recorded in the config")
    sp.add_argument("--output", help="write to this file instead of stdout")
    sp.set_defaults(func=cmd_config)
    return p


def cli_main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OverwriteError as exc:
        print(f"refusing to overwrite: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except PhaseError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_PHASE
    except (AggregationError, TrajectoryFormatError, CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(cli_main())
