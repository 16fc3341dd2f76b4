"""Command-line entry point ``tarc-lab``.

Exit codes: 0 success (or feasible), 2 infeasible certificate, 1 any error
(bad config, unknown strategy, diverged simulation, IO failure).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import config as C
from .errors import BracketNotFound, NoFeasiblePoint, TarcLabError
from .experiment import run_config, run_many
from .reports import fmt, report_record, write_rows_csv, write_trace_csv
from .simulator import STRATEGY_LABELS, Metrics
from .stability import search_feasible_delay

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2

log = logging.getLogger("tarc_lab")


def _load(args) -> C.ExperimentConfig:
    cfg = C.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg) -> str:
    out = args.out if getattr(args, "out", None) else cfg["output"]["dir"]
    os.makedirs(out, exist_ok=True)
    return out


def _strategies(text: Optional[str], cfg) -> list[str]:
    if not text:
        return [cfg["controller"]["strategy"]]
    names = [s.strip() for s in text.split(",") if s.strip()]
    if not names:
        raise C.ConfigError("--strategies", "empty strategy list")
    for s in names:
        if s not in STRATEGY_LABELS:
            raise C.ConfigError("--strategies", f"unknown strategy {s!r}; expected one of {sorted(STRATEGY_LABELS)}")
    return names


def _print_certificate(tag: str, cert) -> None:
    print(f"{tag}.lambda_min = {fmt(cert.lambda_min)}")
    print(f"{tag}.feasible = {fmt(bool(cert.feasible))}")


def cmd_check_gains(args) -> int:
    cfg = _load(args)
    kind = C.certificate_kind(cfg)
    psi = C.build_certificate(cfg, kind="TDC")
    print(f"config_hash = {cfg.config_hash}")
    print(f"h = {fmt(cfg['controller']['h_lag'] * cfg['sim']['dt'])}")
    print("P_eigenvalues = " + " ".join(fmt(v) for v in np.linalg.eigvalsh(psi.P)))
    _print_certificate("psi", psi)
    cert = psi
    if kind == "FTDC":
        cert = C.build_certificate(cfg, kind="FTDC")
        _print_certificate("theta", cert)
    verdict = "feasible" if cert.feasible else "infeasible"
    print(f"verdict = {verdict} ({'theta' if kind == 'FTDC' else 'psi'})")
    return EXIT_OK if cert.feasible else EXIT_INFEASIBLE


def cmd_max_delay(args) -> int:
    cfg = _load(args)
    kind = C.certificate_kind(cfg)
    kernel = C.build_kernel(cfg) if kind == "FTDC" else None
    try:
        res = search_feasible_delay(C.build_gains(cfg), C.build_stability_params(cfg), kind, kernel,
                                    h_lo=args.h_lo, h_hi=args.h_hi, rtol=args.rtol)
    except NoFeasiblePoint as exc:
        print(f"infeasible: {exc}")
        return EXIT_INFEASIBLE
    except BracketNotFound as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"kind = {kind}")
    print(f"bracket = {fmt(res.h_lo)} {fmt(res.h_hi)}")
    print(f"h_lo: lambda_min = {fmt(res.lambda_lo)} feasible = true")
    print(f"h_hi: lambda_min = {fmt(res.lambda_hi)} feasible = false")
    print(f"h_star = {fmt(res.h_star)}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    res = run_config(cfg)
    tr = res.trace
    write_trace_csv(tr, os.path.join(out, cfg["output"]["trace"]))
    row = report_record(res.label, res.metrics, res.certificate, cfg.config_hash,
                        warmup_time=tr.warmup_time, tau_jump=tr.tau_jump, tau_jump_ok=tr.tau_jump_ok,
                        diverged_step=tr.diverged_step if tr.diverged else None)
    write_rows_csv([row], os.path.join(out, cfg["output"]["metrics"]))
    if tr.diverged:
        print(f"error: run diverged at step {tr.diverged_step}: {tr.diagnostic}", file=sys.stderr)
        return EXIT_ERROR
    print(f"rms_e1 = {fmt(res.metrics.rms_e1)}")
    return EXIT_OK


def _rows(results, cfg_hash, extra=None) -> list[dict]:
    extra = extra or {}
    return [report_record(r.label, r.metrics, r.certificate, cfg_hash, **extra) for r in results]


def _columns(extra: Sequence[str] = ()) -> list[str]:
    return (["strategy", *extra] + Metrics.field_names()
            + ["cert_kind", "cert_lambda_min", "cert_feasible", "config_hash"])


def cmd_compare(args) -> int:
    cfg = _load(args)
    names = _strategies(args.strategies, cfg)
    out = _out_dir(args, cfg)
    # one config, strategy chosen per row; the certificate follows the row's strategy
    jobs = [(cfg.with_value("controller.strategy", s), s) for s in names]
    results = run_many(jobs, workers=1)
    write_rows_csv(_rows(results, cfg.config_hash), os.path.join(out, cfg["output"]["compare"]), _columns())
    for r in results:
        print(f"{r.label}: rms_e1 = {fmt(r.metrics.rms_e1)} c_hat_max = {fmt(r.metrics.c_hat_max)}")
    return EXIT_ERROR if any(r.metrics.diverged for r in results) else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if not args.values:
        raise C.ConfigError(args.key, "sweep needs at least one value")
    current = cfg.get(args.key)
    if isinstance(current, (dict, list, str, bool)):
        raise C.ConfigError(args.key, "sweep key must address a numeric field")
    names = _strategies(args.strategies, cfg)
    jobs, extra = [], []
    for text in args.values:
        try:
            value = float(text)
        except ValueError:
            raise C.ConfigError(args.key, f"sweep value {text!r} is not a number") from None
        if value.is_integer() and isinstance(current, int):
            value = int(value)
        swept = cfg.with_value(args.key, value)
        for s in names:
            jobs.append((swept.with_value("controller.strategy", s), s))
            extra.append({"key": args.key, "value": value, "config_hash": swept.config_hash})
    out = _out_dir(args, cfg)
    results = run_many(jobs)
    rows = [report_record(r.label, r.metrics, r.certificate, e["config_hash"], key=e["key"], value=e["value"])
            for r, e in zip(results, extra)]
    write_rows_csv(rows, os.path.join(out, cfg["output"]["sweep"]), _columns(("key", "value")))
    for row in rows:
        print(f"{row['key']}={fmt(row['value'])} {row['strategy']}: rms_e1 = {fmt(row['rms_e1'])}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tarc-lab", description="Time-delayed adaptive robust control experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True, seed=True):
        sp.add_argument("--config", required=True, help="YAML experiment file")
        if out:
            sp.add_argument("--out", help="output directory (overrides output.dir)")
        if seed:
            sp.add_argument("--seed", type=int, help="override plant.seed")

    sp = sub.add_parser("check-gains", help="evaluate the stability certificate")
    common(sp, out=False, seed=False)
    sp.set_defaults(func=cmd_check_gains)

    sp = sub.add_parser("max-delay", help="largest delay keeping the certificate feasible")
    common(sp, out=False, seed=False)
    sp.add_argument("--h-lo", type=float, help="feasible lower probe (default h_lag*dt)")
    sp.add_argument("--h-hi", type=float, help="infeasible upper probe (default: doubling search)")
    sp.add_argument("--rtol", type=float, default=1e-6)
    sp.set_defaults(func=cmd_max_delay)

    sp = sub.add_parser("simulate", help="run one closed loop and write trace and metrics CSVs")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("compare", help="run several strategies on the same scenario")
    common(sp)
    sp.add_argument("--strategies", help="comma-separated labels, e.g. TDC-FD,FTDC,TARC")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("sweep", help="vary one numeric config key")
    common(sp)
    sp.add_argument("--strategies", help="comma-separated labels (default controller.strategy)")
    sp.add_argument("key", help="dotted config key, e.g. controller.h_lag")
    sp.add_argument("values", nargs="*", help="values to try")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TarcLabError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
