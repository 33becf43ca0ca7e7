"""``t2diff`` command line: prepare-data, train, eval, ablate, gradcheck, dump-schedule.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 format error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, synthetic
from .config import ConfigError, load_config
from .diffusion import SCHEDULE_KINDS, ScheduleError, build_schedule

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_FORMAT = 0, 2, 3, 4


class InputError(ValueError):
    pass


def parse_ks(text: str) -> list[int]:
    """``"20,2"`` -> ``[2, 20]``; every entry must be a positive integer."""
    try:
        ks = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise InputError(f"--k expects a comma-separated list of positive integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise InputError(f"--k expects a comma-separated list of positive integers, got {text!r}")
    return sorted(set(ks))


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_split(path) -> data.DatasetSplit:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    return data.load_split(path)


# ---------------------------------------------------------------- subcommands
def cmd_prepare(args) -> int:
    if args.dataset == "synthetic":
        interactions = synthetic.session_interactions(args.seed, users=args.users, items=args.items)
    else:
        if args.input is None:
            raise InputError("--input is required for this dataset")
        if not Path(args.input).is_file():
            raise FileNotFoundError(f"input not found: {args.input}")
        parse = data.parse_ml1m if args.dataset == "ml1m" else data.parse_kuairand
        interactions = parse(args.input)
    stats = data.dataset_stats(interactions)
    split = data.prepare(interactions, max_len=args.max_len, min_count=args.min_count,
                         gap_seconds=args.gap_seconds, k_max=args.k_max)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_split(split, out)
    print(f"{stats['users']} users / {stats['items']} items / {stats['interactions']} interactions")
    print(f"train {len(split.train)} / validation {len(split.validation)} / test {len(split.test)}"
          f" / excluded {split.excluded}")
    print(f"sha256 {_digest(out)}")
    return EXIT_OK


def _config(args):
    overrides = {"seed": args.seed} if getattr(args, "seed", None) is not None else {}
    return load_config(args.config, **overrides)


def cmd_train(args) -> int:
    from . import experiment

    config = _config(args)
    split = _load_split(args.data)
    result = experiment.train(split, config, max_steps=args.max_steps)
    run_dir = experiment.write_run(result, args.out, data_digest=_digest(Path(args.data)))
    print(f"run {run_dir}")
    print(f"best epoch {result.best_epoch}, validation recall@{config.eval_k} "
          f"{max(result.val_recall) if result.val_recall else float('nan'):.5f}")
    print(f"checkpoint sha256 {_digest(run_dir / experiment.CHECKPOINT)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import experiment

    ks = parse_ks(args.k)
    split = _load_split(args.data)
    model, config = experiment.load_run_checkpoint(args.checkpoint, split.item_count)
    examples = split.test if args.split == "test" else split.validation
    report = experiment.evaluate(model, examples, config, ks=ks, seed=args.seed,
                                 filter_seen=args.filter_seen)
    if args.time_users:
        report.infer_ms = experiment.time_inference(model, examples, config, users=args.time_users)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    report.trace_path = str(Path(args.checkpoint).parent / "similarity_trace.csv")
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    print(report.table())
    if args.time_users:
        print(f"inference {report.infer_ms:.4f} ms per user")
    return EXIT_OK


def cmd_popularity(args) -> int:
    from . import experiment

    split = _load_split(args.data)
    report = experiment.popularity_baseline(split, ks=parse_ks(args.k), filter_seen=args.filter_seen)
    print(report.table())
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import experiment

    config = _config(args)
    split = _load_split(args.data)
    ks = parse_ks(args.k)
    seeds = [int(s) for s in args.seeds.split(",")]
    axes = list(experiment.AXES) if args.axis == "all" else [args.axis]
    tables = experiment.ablate(split, config, axes=axes, seeds=seeds, ks=ks,
                               out_dir=Path(args.out) / "runs", timing_users=args.time_users,
                               max_steps=args.max_steps)
    out = Path(args.out)
    for axis, rows in tables.items():
        text = experiment.ablation_table(rows)
        (out / f"ablation_{axis}.csv").write_text(text)
        print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import SHAPES, check_subnetworks

    worst: dict[str, float] = {}
    for seed in range(args.seeds):
        for shape in SHAPES:
            for name, err in check_subnetworks(seed, shape, h=args.h, n_samples=args.samples).items():
                worst[name] = max(worst.get(name, 0.0), err)
    for name, err in worst.items():
        print(f"{name:16s} max_rel_err={err:.3e}")
    top = max(worst.values())
    if top < args.tol:
        print(f"PASS max_rel_err={top:.3e}")
        return EXIT_OK
    print(f"FAIL max_rel_err={top:.3e} (tolerance {args.tol:g})")
    return EXIT_NUMERIC


def cmd_dump_schedule(args) -> int:
    if args.T < 1:
        raise InputError(f"--T must be a positive integer, got {args.T}")
    b = args.b if args.b is not None else float(np.log(args.beta_last / args.a) / args.T)
    sch = build_schedule(args.a, b, args.T, args.kind)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "beta", "alpha_bar", "beta_tilde"])
    w.writerows((t, repr(be), repr(ab), repr(bt)) for t, be, ab, bt in sch.to_rows())
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="t2diff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare-data", help="parse a raw log and write a processed split")
    s.add_argument("--dataset", choices=("ml1m", "kuairand", "synthetic"), required=True)
    s.add_argument("--input")
    s.add_argument("--out", required=True)
    s.add_argument("--gap-seconds", type=int, default=1800)
    s.add_argument("--k-max", type=int, default=10)
    s.add_argument("--max-len", type=int, default=50)
    s.add_argument("--min-count", type=int, default=5)
    s.add_argument("--seed", type=int, default=0, help="synthetic corpus seed")
    s.add_argument("--users", type=int, default=200, help="synthetic corpus size")
    s.add_argument("--items", type=int, default=120, help="synthetic vocabulary size")
    s.set_defaults(fn=cmd_prepare)

    s = sub.add_parser("train", help="train a model and write a run directory")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-steps", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint with exact ranking")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--k", default="20")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--filter-seen", action="store_true")
    s.add_argument("--split", choices=("test", "validation"), default="test")
    s.add_argument("--time-users", type=int, default=0, help="also time inference over this many users")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("popularity", help="popularity baseline metrics")
    s.add_argument("--data", required=True)
    s.add_argument("--k", default="20")
    s.add_argument("--filter-seen", action="store_true")
    s.set_defaults(fn=cmd_popularity)

    s = sub.add_parser("ablate", help="run an ablation grid")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--axis", choices=("variant", "schedule", "steps", "all"), default="all")
    s.add_argument("--seeds", default="0")
    s.add_argument("--k", default="20")
    s.add_argument("--time-users", type=int, default=0)
    s.add_argument("--max-steps", type=int)
    s.set_defaults(fn=cmd_ablate, seed=None)

    s = sub.add_parser("gradcheck", help="finite-difference check of every subnetwork")
    s.add_argument("--seeds", type=int, default=1)
    s.add_argument("--h", type=float, default=1e-4)
    s.add_argument("--samples", type=int, default=8)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("dump-schedule", help="print the (t, beta, alpha_bar, beta_tilde) table")
    s.add_argument("--a", type=float, default=1e-4)
    s.add_argument("--b", type=float)
    s.add_argument("--beta-last", type=float, default=0.02, help="derives b when --b is absent")
    s.add_argument("--T", type=int, default=50)
    s.add_argument("--kind", choices=SCHEDULE_KINDS, default="exp")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_dump_schedule)
    return p


def main(argv=None) -> int:
    from .experiment import DivergenceError
    from .numerics.checkpoint import CheckpointFormatError
    from .numerics.tensor import NumericalError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (CheckpointFormatError, data.DatasetFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (DivergenceError, NumericalError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as e:
        print(f"error: invalid config key {e.key!r}: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, ScheduleError, data.DataError, FileNotFoundError, IsADirectoryError,
            KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
