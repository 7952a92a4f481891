"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration, 2 a run failed,
3 a report is missing data.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .accounting import PRESETS, reference_methods
from .config import ExperimentConfig, load_experiment, load_sweep
from .errors import ConfigError, LnTuneError, MissingDataError
from .report import KINDS, Report, build_report, param_table
from .runner import ResultsStore, base_key, ensure_base, run_experiment
from .verify import SUITES, run_suites

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_MISSING = 0, 1, 2, 3


def _experiment(args) -> ExperimentConfig:
    cfg = load_experiment(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, output_dir=Path(args.out))
    return cfg


def _summary(result) -> str:
    a = result.accounting
    seeds = " ".join(f"{r.test_metric:.4f}" for r in result.per_seed)
    return (
        f"{result.method}  {result.metric}={result.mean_metric:.4f} [{seeds}]  lr={result.best_lr:g}  "
        f"trainable={a['trainable']} ({100 * a['ratio_total']:.4g}% total, "
        f"{100 * a['ratio_no_embed']:.4g}% no-embed)  fingerprint={result.fingerprint}"
    )


def cmd_pretrain(args) -> int:
    cfg = _experiment(args)
    store = ResultsStore(cfg.output_dir)
    ensure_base(cfg, store, force=args.force)
    print(store.base_path(base_key(cfg)))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _experiment(args)
    result = run_experiment(cfg, force=args.force)
    print(_summary(result))
    print(ResultsStore(cfg.output_dir).run_path(result.fingerprint))
    return EXIT_OK


def cmd_sweep(args) -> int:
    paths = load_sweep(args.config)
    configs = []
    for p in paths:
        cfg = load_experiment(p)  # validate everything before training anything
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.out is not None:
            cfg = dataclasses.replace(cfg, output_dir=Path(args.out))
        configs.append(cfg)
    for cfg in configs:
        print(_summary(run_experiment(cfg, force=args.force)), flush=True)
    return EXIT_OK


def _sweep_results(sweep_path, results_root):
    """Stored results of the experiments a sweep lists, plus labels of those not run yet."""
    results, missing = [], []
    root = results_root
    for p in load_sweep(sweep_path):
        cfg = load_experiment(p)
        root = root or cfg.output_dir
        r = ResultsStore(results_root or cfg.output_dir).load(cfg.fingerprint())
        if r is None:
            missing.append(cfg.method.name)
        else:
            results.append(r)
    return results, missing, ResultsStore(root)


def cmd_report(args) -> int:
    if args.config:
        results, missing, store = _sweep_results(args.config, args.results)
    else:
        store = ResultsStore(args.results or "results")
        results, missing = store.all_results(), []
    try:
        report = build_report(args.kind, results, store)
    except MissingDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    for path in report.write(Path(args.out or "reports")):
        print(path)
    print(report.text(), end="")
    gaps = report.gaps + [m for m in missing if m not in report.gaps]
    if gaps:
        print("missing: " + ", ".join(gaps), file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


def cmd_count(args) -> int:
    if args.config:
        cfg = load_experiment(args.config)
        shape, methods = cfg.shape, [cfg.method]
    else:
        shape = args.shape
        if shape not in PRESETS:
            raise ConfigError(f"unknown preset {shape!r}; choose from {sorted(PRESETS)}", "shape.preset")
        methods = reference_methods(shape) if shape.endswith("-shape") else None
    report = param_table(shape, methods)
    drop = {"total": "ratio_no_embed_pct", "no-embed": "ratio_total_pct"}.get(args.denominator)
    if drop:
        keep = [i for i, c in enumerate(report.columns) if c != drop]
        report = Report(report.kind, [report.columns[i] for i in keep],
                        [[row[i] for i in keep] for row in report.rows])
    if args.out:
        for path in report.write(args.out):
            print(path)
    print(report.text(), end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suites(args.suite or None)
    for r in results:
        print(r.line(), flush=True)
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUN


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lntune", description="LayerNorm tuning and PEFT baselines at desk scale")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment (or sweep) INI file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--force", action="store_true", help="ignore cached results and checkpoints")

    p = sub.add_parser("pretrain", help="build (or load) the base checkpoint of an experiment")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run every experiment listed in a sweep file")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="build a report from stored results")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--config", help="sweep file selecting the experiments to report")
    p.add_argument("--results", help="results store directory")
    p.add_argument("--out", help="directory for the report files (default: reports)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("count", help="parameter accounting, no training")
    p.add_argument("--shape", default="bert-base-shape", help=f"preset: {', '.join(sorted(PRESETS))}")
    p.add_argument("--config", help="count the method of this experiment instead")
    p.add_argument("--denominator", choices=("total", "no-embed", "both"), default="both")
    p.add_argument("--out", help="also write CSV and text files here")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("verify", help="run the invariant suites")
    p.add_argument("--suite", action="append", choices=sorted(SUITES), help="run only this suite (repeatable)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LnTuneError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
