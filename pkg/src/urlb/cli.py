"""Command-line entry point: ``python -m urlb <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 selftest failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import calibration_digest, load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _set_pairs(values) -> dict:
    out = {}
    for item in values or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="urlb", description="Desk-scale unsupervised RL benchmark")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        sp.add_argument("--out", default=".", help="output root (default: current directory)")

    sp = sub.add_parser("pretrain", help="reward-free pretraining with snapshots")
    common(sp)
    sp.add_argument("--algo", required=True)
    sp.add_argument("--domain", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--snapshots", help="comma-separated snapshot steps")

    sp = sub.add_parser("finetune", help="finetune a snapshot on one task")
    common(sp)
    sp.add_argument("--snapshot", required=True)
    sp.add_argument("--task", required=True)
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("calibrate", help="expert score for one task")
    common(sp)
    sp.add_argument("--task", required=True)
    sp.add_argument("--budget", type=int)
    sp.add_argument("--seeds", help="comma-separated seeds")

    sp = sub.add_parser("grid", help="full sweep with resume")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("report", help="aggregate tables from results.csv + expert.csv")
    sp.add_argument("--results", required=True, help="directory holding results.csv and expert.csv")
    sp.add_argument("--group-by", choices=("category", "algorithm"), default="category")
    sp.add_argument("--expert", help="expert.csv path (default: <results>/expert.csv)")
    sp.add_argument("--digest", help="calibration digest to use when several exist")

    sub.add_parser("selftest", help="oracle and arithmetic checks")
    return p


def _config(args, extra: dict):
    flags = _set_pairs(args.set)
    flags.update({k: str(v) for k, v in extra.items() if v is not None})
    try:
        return load_config(args.config, flags)
    except (KeyError, ValueError) as e:
        raise UsageError(str(e)) from e


def cmd_pretrain(args) -> int:
    from .protocol import pretrain, run_dir
    cfg = _config(args, {"algorithm": args.algo, "domain": args.domain, "seed": args.seed,
                         "pretrain_steps": args.steps, "snapshot_steps": args.snapshots})
    d = run_dir(args.out, cfg.algorithm, cfg.domain, cfg.seed)
    snaps = pretrain(cfg, d)
    print(f"wrote {len(snaps)} snapshot(s) to {d}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .config import flatten, parse_flat, resolve
    from .protocol import AgentSnapshot, ExpertTable, ResultsStore, finetune, run_dir
    snap = AgentSnapshot.load(args.snapshot)
    # the snapshot's own config is the default layer here
    base = flatten(snap.config())
    if args.config:
        base.update(parse_flat(Path(args.config).read_text(encoding="utf-8")))
    flags = _set_pairs(args.set)
    if args.steps is not None:
        flags["finetune_steps"] = str(args.steps)
    try:
        cfg = resolve(base, flags)
    except (KeyError, ValueError) as e:
        raise UsageError(str(e)) from e
    expert = ExpertTable(Path(args.out) / "expert.csv").lookup(args.task, calibration_digest(cfg))
    rec = finetune(snap, args.task, cfg, expert)
    d = run_dir(args.out, rec.algorithm, rec.domain, rec.seed)
    ResultsStore(d / "results.csv").append(rec)
    print(",".join(rec.row().values()))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .protocol import ExpertTable, calibrate_expert
    cfg = _config(args, {"expert_budget": args.budget, "expert_seeds": args.seeds})
    score, per_seed = calibrate_expert(args.task, cfg)
    ExpertTable(Path(args.out) / "expert.csv").record(args.task, calibration_digest(cfg), score,
                                                       cfg.expert_budget)
    print(f"{args.task} expert_score={score!r} seeds={per_seed}")
    return EXIT_OK


def cmd_grid(args) -> int:
    from .protocol import run_grid
    cfg = _config(args, {})
    recs = run_grid(cfg, args.out, jobs=args.jobs)
    print(f"{len(recs)} records in {Path(args.out) / 'results.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .protocol import report
    root = Path(args.results)
    expert = Path(args.expert) if args.expert else root / "expert.csv"
    md, csv_bytes = report(root / "results.csv", expert, args.group_by, args.digest)
    (root / f"report_{args.group_by}.md").write_text(md, encoding="utf-8")
    (root / f"report_{args.group_by}.csv").write_bytes(csv_bytes)
    print(md, end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    return EXIT_OK if run_selftest() else EXIT_SELFTEST


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "calibrate": cmd_calibrate,
            "grid": cmd_grid, "report": cmd_report, "selftest": cmd_selftest}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - every other failure maps to one exit code
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
