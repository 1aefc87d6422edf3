"""Command line entry point.

    specclip train --config cfg.json [--seed N] [--out DIR] [--steps T]
    specclip sweep --preset fixed_c_sweep [--config cfg.json] [--repeats 3]
    specclip accountant --q 0.032 --sigma 1.1 --steps 250 --delta 1e-5 [--target-eps 3]
    specclip inspect-log runs/run.csv

Exit status: 0 on success, 1 on a configuration or usage error, 2 when a run fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace

from . import accountant
from .dp import PrivacyParams
from .harness.config import ExperimentConfig, load_config, serialize
from .harness.data import build_dataset
from .harness.experiments import PRESETS, run_preset
from .harness.io import RUNLOG_HEADER, read_runlog, read_table, summarize_log, write_runlog
from .trainer import ConfigError, timing_report, train

log = logging.getLogger("specclip")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _base_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    if getattr(args, "steps", None) is not None:
        if args.steps < 1:
            raise ConfigError("--steps must be positive")
        cfg = replace(cfg, privacy=replace(cfg.privacy, steps=args.steps))
    return cfg


def _json(obj) -> str:
    def clean(x):
        if isinstance(x, float) and not math.isfinite(x):
            return None
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        return x

    return json.dumps(clean(obj), indent=2, sort_keys=True)


def cmd_train(args) -> int:
    cfg = _base_config(args)
    train_b, test_b = build_dataset(cfg.dataset, cfg.seeds.data)
    _, run = train(cfg.train_config(), train_b, test_b)
    csv_path = os.path.join(cfg.output_dir, f"{cfg.name}.csv")
    write_runlog(run, csv_path, serialize(cfg))
    out = summarize_log(run)
    out["log"] = csv_path
    out["timings"] = timing_report(run)
    print(_json(out))
    if run.aborted:
        print(f"run aborted: {run.aborted}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _base_config(args)
    summary = run_preset(args.preset, cfg, cfg.output_dir, repeats=args.repeats, workers=args.workers)
    print(f"{'label':<24} {'eps':>8} {'acc':>16} {'median C':>9} {'C_T':>7}")
    for row in summary["rows"]:
        print(
            f"{row['label']:<24} {row['epsilon']:8.4f} "
            f"{100 * row['acc_mean']:7.2f} +- {100 * row['acc_std']:5.2f} "
            f"{row['median_c']:9.3f} {row['final_c']:7.3f}"
        )
    if "timing" in summary:
        for rep in summary["timing"]:
            print(f"probe share {rep['probe_share_pct']:.2f}%  overhead {rep['overhead_pct']:.2f}%")
        best = summary["timing_best"]
        print(f"best of repeats: probe share {best['probe_share_pct']:.2f}%  overhead {best['overhead_pct']:.2f}%")
    print(f"wrote {os.path.join(cfg.output_dir, args.preset)}")
    return EXIT_OK


def _privacy(q, sigma, steps, delta) -> PrivacyParams:
    try:
        return PrivacyParams(q, sigma, steps, delta)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_accountant(args) -> int:
    if args.target_eps is not None:
        _privacy(args.q, 1.0, args.steps, args.delta)
        if not args.target_eps > 0:
            raise ConfigError("--target-eps must be positive")
        sigma = accountant.sigma_for_epsilon(args.target_eps, args.q, args.steps, args.delta)
        eps = accountant.epsilon_of(_privacy(args.q, sigma, args.steps, args.delta))
        print(f"sigma {sigma!r} for target epsilon {args.target_eps!r} (achieved {eps!r})")
        return EXIT_OK
    if args.sigma is None:
        raise ConfigError("accountant needs --sigma (or --target-eps)")
    params = _privacy(args.q, args.sigma, args.steps, args.delta)
    curve = accountant.compose(accountant.rdp_curve(params.q, params.sigma), params.steps)
    print(f"{'order':>8} {'rdp':>22} {'epsilon':>22}")
    for order, rdp, eps in accountant.candidate_epsilons(curve, params.delta):
        print(f"{order:8g} {rdp!r:>22} {eps!r:>22}")
    eps, order = accountant.rdp_to_dp(curve, params.delta)
    print(f"epsilon {eps!r} order {order:g}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = args.log
    header, rows = read_table(path)
    if header == RUNLOG_HEADER:
        out = summarize_log(read_runlog(path))
    else:
        out = {"columns": header, "n_rows": len(rows), "rows": rows}
    print(_json(out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="specclip", description="DP-SGD with spectrally regulated clipping")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--steps", type=int, help="override the number of training steps")

    t = sub.add_parser("train", help="single run from a config file")
    common(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run an ablation preset")
    common(s)
    s.add_argument("--preset", required=True, choices=PRESETS)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("accountant", help="RDP accountant for the subsampled Gaussian")
    a.add_argument("--q", type=float, required=True)
    a.add_argument("--sigma", type=float)
    a.add_argument("--steps", type=int, required=True)
    a.add_argument("--delta", type=float, required=True)
    a.add_argument("--target-eps", type=float, help="solve for sigma instead")
    a.set_defaults(func=cmd_accountant)

    i = sub.add_parser("inspect-log", help="summarise a run log or any CSV written by sweep")
    i.add_argument("log")
    i.set_defaults(func=cmd_inspect)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv=None):
    sys.exit(run_cli(argv))


if __name__ == "__main__":
    main()
