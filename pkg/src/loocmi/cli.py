"""Command-line entry point.

Exit codes: 0 success, 1 configuration or input error, 2 numerical
failure; ``verify`` exits with ``2 + number of failed checks`` (so any
code >= 3 is a failure count).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import bounds as B
from .exceptions import ConfigError, DomainError, NumericalError, ParseError
from .harness import evaluate, load_config, prepare, run_sweep, write_point, write_report_tables
from .numerics import CovSpec
from .oracle import mc_cmi, mc_floo_cmi
from .reporting import (
    BoundReport,
    read_predictions_csv,
    read_weights_csv,
    write_predictions_csv,
    write_weights_csv,
)
from .verify import SUITES, run_suite

log = logging.getLogger("loocmi")


def _list(cast):
    def parse(s):
        try:
            vals = [cast(v) for v in s.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a comma-separated list: {s!r}")
        if not vals:
            raise argparse.ArgumentTypeError("empty list")
        return tuple(vals)
    return parse


def _threads(n: int) -> int:
    return (os.cpu_count() or 1) if n == 0 else n


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "n", None):
        cfg = replace(cfg, n=args.n)
    if getattr(args, "sigma", None):
        cfg = replace(cfg, sigmas=args.sigma)
    if getattr(args, "oracle_samples", None):
        cfg = replace(cfg, oracle=True, oracle_samples=args.oracle_samples)
    return cfg


def cmd_train_loo(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    for n in cfg.n:
        for seed in cfg.seeds:
            art = prepare(replace(cfg, local_bound=False, weight_noise="isotropic"), int(n), seed,
                          _threads(args.threads))
            d = out / f"n_{n}" / f"seed_{seed}"
            d.mkdir(parents=True, exist_ok=True)
            write_weights_csv(art.loo, d / "loo_weights.csv")
            write_predictions_csv(art.preds, d / "loo_predictions.csv")
            if art.loo.flagged:
                log.warning("n=%d seed=%d: flagged rows %s", n, seed, list(art.loo.flagged))
            print(f"wrote {d}")
    return 0


def _bound_from_files(args) -> list:
    if not args.weights and not args.predictions:
        raise ConfigError("bound needs --config, or --weights and/or --predictions")
    sigmas = args.sigma or (1.0,)
    loo = read_weights_csv(args.weights) if args.weights else None
    preds = read_predictions_csv(args.predictions) if args.predictions else None
    reports = []
    for sigma in sigmas:
        n = loo.n if loo is not None else preds.n
        rep = BoundReport(n=n, experiment="files", sigma_or_cov={"kind": "isotropic", "sigma": sigma},
                          prediction_sigma=sigma)
        rows = None
        if loo is not None:
            rows = loo.indices.size
            cov = CovSpec.isotropic(sigma)
            rep.loo_cmi_upper = B.loo_cmi_upper(loo, cov)
            rep.jensen_upper = B.jensen_cmi_upper(loo, cov)
            rep.gen_bound_weights = B.gen_bound_from_cmi(rep.loo_cmi_upper, rows)
        if preds is not None:
            rows = preds.indices.size
            rep.floo_cmi_upper = B.floo_cmi_upper(preds, sigma)
            rep.jensen_floo_upper = B.jensen_cmi_upper(preds, CovSpec.isotropic(sigma))
            rep.gen_bound_predictions = B.gen_bound_from_cmi(rep.floo_cmi_upper, rows)
        rep.rows_used = rows
        rep.ln_s_substituted = rows < n
        rep.loo_mode = "subset" if rows < n else "full"
        if args.oracle_samples:
            rep.oracle = {}
            if loo is not None:
                rep.oracle["loo_mc"] = mc_cmi(loo.rows(), CovSpec.isotropic(sigma), args.oracle_samples).to_dict()
            if preds is not None:
                rep.oracle["floo_mc"] = mc_floo_cmi(preds, sigma, args.oracle_samples).to_dict()
        reports.append((sigma, rep))
    return reports


def cmd_bound(args) -> int:
    if args.config:
        cfg = _config(args)
        reports = []
        for n in cfg.n:
            for seed in cfg.seeds:
                art = prepare(cfg, int(n), seed, _threads(args.threads))
                for sigma in cfg.sigmas:
                    rep = evaluate(art, sigma, seed)
                    if args.out:
                        write_point(art, rep, Path(args.out) / f"n_{n}" / f"seed_{seed}" / f"sigma_{float(sigma)!r}")
                    reports.append(rep)
        if not args.out:
            for rep in reports:
                sys.stdout.write(rep.to_json())
        return 0
    reports = _bound_from_files(args)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for sigma, rep in reports:
            name = "report.json" if len(reports) == 1 else f"report_sigma_{float(sigma)!r}.json"
            rep.write(out / name)
    else:
        for _, rep in reports:
            sys.stdout.write(rep.to_json())
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    res = run_sweep(cfg, args.axis, Path(args.out) if args.out else None, _threads(args.threads))
    for k, v in res.aggregate.items():
        print(f"{k}: " + " ".join(f"{x:.6g}" for x in v))
    for k, v in res.verdicts.items():
        print(f"{'PASS' if v else 'FAIL'} {k}")
    return 0


def cmd_verify(args) -> int:
    failures = 0
    for name in args.suites or list(SUITES):
        for check in run_suite(name, samples=args.oracle_samples):
            print(f"[{name}] {check.line()}")
            failures += not check.passed
    print(f"{failures} failure(s)")
    return 0 if failures == 0 else min(2 + failures, 255)


def cmd_report(args) -> int:
    summary, plot = write_report_tables(args.results, args.out)
    print(f"wrote {summary}\nwrote {plot}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="loocmi", description="Leave-one-out CMI generalization bounds.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, metavar="PATH")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--threads", type=int, default=1, metavar="N", help="0 = auto; never changes values")
        p.add_argument("--n", type=_list(int), metavar="LIST")
        p.add_argument("--sigma", type=_list(float), metavar="LIST")
        p.add_argument("--oracle-samples", type=int, metavar="N")

    p = sub.add_parser("train-loo", help="retrain on every leave-one-out view and write CSVs")
    common(p)
    p.set_defaults(func=cmd_train_loo)

    p = sub.add_parser("bound", help="bounds from a config or from LOO CSV files")
    common(p, config_required=False)
    p.add_argument("--weights", metavar="CSV")
    p.add_argument("--predictions", metavar="CSV")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("sweep", help="dataset-size or prediction-noise sweep")
    common(p)
    p.add_argument("--axis", choices=("size", "sigma"), required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("suites", nargs="*", metavar="SUITE",
                   help=f"any of {', '.join(SUITES)} (default: all)")
    p.add_argument("--oracle-samples", type=int, metavar="N")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="summary table and plot data from a results tree")
    p.add_argument("results", metavar="RESULTS_DIR")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify":
        bad = [s for s in args.suites if s not in SUITES]
        if bad:
            print(f"error: unknown suite(s) {bad}; expected {list(SUITES)}", file=sys.stderr)
            return 1
    try:
        return args.func(args)
    except NumericalError as exc:
        idx = getattr(exc, "index", None)
        where = f" (LOO index {idx})" if idx is not None else ""
        print(f"numerical error{where}: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ParseError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
