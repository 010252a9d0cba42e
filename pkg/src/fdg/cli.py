"""Command line: ``fdg {train, verify, simulate, sweep}``.

Every run directory holds ``config.ini``, ``log.csv``, ``summary.json`` and
``report.json``. Relative output paths are placed under ``$FDG_OUTPUT_ROOT`` when set.
"""
import argparse
import csv
import json
import logging
import os
import sys
import time

from .config import RunConfig, apply_overrides, load_config, save_config
from .data import make_datasets
from .errors import FdgError
from .layers import build_network
from .speedup import SCHEDULES, CostProfile, simulate_pipeline, write_stats
from .trainers import summarize, train, write_summary
from .verification import verification_report

log = logging.getLogger("fdg")


def _prepare_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise FdgError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise FdgError(f"output directory {path} is not writable")
    return path


def _config_from_args(args):
    config = load_config(args.config) if args.config else RunConfig()
    changes = {}
    for name in ("method", "k", "beta", "iterations", "seed", "mode", "ordering"):
        value = getattr(args, name, None)
        if value is not None and not isinstance(value, list):
            changes[name] = value
    if getattr(args, "out", None):
        changes["output_dir"] = args.out
    config = apply_overrides(config, changes)
    return apply_overrides(config, args.set or [])


def run_training(config, out_dir):
    """Train once from ``config`` and write the standard run directory. Returns the summary."""
    _prepare_dir(out_dir)
    train_set, test_set = make_datasets(config)
    network = build_network(config.arch, train_set.sample_shape, seed=config.seed, dtype=config.dtype)
    t0 = time.perf_counter()
    tlog = train(network, train_set, config, test=test_set)
    wall = time.perf_counter() - t0
    summary = summarize(config, tlog, network, test_set, wall_s=wall)
    save_config(config, os.path.join(out_dir, "config.ini"))
    tlog.to_csv(os.path.join(out_dir, "log.csv"))
    write_summary(summary, os.path.join(out_dir, "summary.json"))
    report = {k: v for k, v in tlog.meta.items()}
    report["evals"] = [{"iteration": t, "test_loss": l, "top1_error": e} for t, l, e in tlog.evals]
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2, default=str)
    return summary


def cmd_train(args):
    config = _config_from_args(args)
    summary = run_training(config, config.resolved_output_dir())
    print(json.dumps(summary, indent=2))
    return 0


def cmd_verify(args):
    out = _prepare_dir(args.out or os.path.join(os.environ.get("FDG_OUTPUT_ROOT", "."), "runs", "verify"))
    report = verification_report(seed=args.seed or 0)
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(report, f, indent=2)
    for suite in ("grad-check", "oracle-equivalence", "theorem"):
        print(f"{suite}: {json.dumps({k: v for k, v in report[suite].items() if k != 'runs'})}")
    print("all suites passed" if report["pass"] else "verification FAILED")
    return 0 if report["pass"] else 1


def cmd_simulate(args):
    profile = CostProfile.uniform(args.k or 2, args.tf, args.tb, args.tc)
    timeline, stats = simulate_pipeline(profile, args.iterations or 1000, args.schedule,
                                        ordering=args.ordering or "backward-first")
    out = _prepare_dir(args.out or "runs/simulate")
    timeline.to_csv(os.path.join(out, "timeline.csv"))
    write_stats(stats, os.path.join(out, "stats.json"))
    print(json.dumps(stats, indent=2))
    return 0


def _grid(text, cast):
    return [cast(v) for v in text.split(",") if v.strip()]


def cmd_sweep(args):
    if (args.beta is None) == (args.k is None):
        raise FdgError("sweep needs exactly one of --beta or --k")
    base = _config_from_args(argparse.Namespace(**{**vars(args), "beta": None, "k": None}))
    field, values = ("beta", _grid(args.beta, float)) if args.beta is not None else ("k", _grid(args.k, int))
    root = _prepare_dir(base.resolved_output_dir())
    rows = []
    for value in values:
        config = apply_overrides(base, {field: value})
        summary = run_training(config, os.path.join(root, f"{field}-{value}"))
        rows.append(summary)
        log.info("%s=%s top1_error=%s", field, value, summary["top1_error"])
    keys = list(rows[0])
    with open(os.path.join(root, "sweep.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    for row in rows:
        print(json.dumps(row))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="fdg", description="Fully decoupled model-parallel training.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--method", choices=["bp", "ddg", "fdg"])
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", choices=["lockstep", "freerun"])
        sp.add_argument("--ordering", choices=["backward-first", "forward-first"])

    tr = sub.add_parser("train", help="train one model")
    common(tr)
    tr.add_argument("--k", type=int)
    tr.add_argument("--beta", type=float)
    tr.set_defaults(func=cmd_train)

    ve = sub.add_parser("verify", help="run the verification suites")
    ve.add_argument("--out")
    ve.add_argument("--seed", type=int)
    ve.set_defaults(func=cmd_verify)

    si = sub.add_parser("simulate", help="discrete-event pipeline simulation")
    si.add_argument("--k", type=int)
    si.add_argument("--tf", type=float, default=1.0, help="whole-network forward cost")
    si.add_argument("--tb", type=float, default=2.0, help="whole-network backward cost")
    si.add_argument("--tc", type=float, default=0.0, help="per-packet communication latency")
    si.add_argument("--iterations", type=int)
    si.add_argument("--schedule", choices=SCHEDULES, default="fdg-freerun")
    si.add_argument("--ordering", choices=["backward-first", "forward-first"])
    si.add_argument("--out")
    si.set_defaults(func=cmd_simulate)

    sw = sub.add_parser("sweep", help="one training run per beta or K value")
    common(sw)
    sw.add_argument("--beta", help="comma-separated beta values")
    sw.add_argument("--k", help="comma-separated K values")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FdgError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
