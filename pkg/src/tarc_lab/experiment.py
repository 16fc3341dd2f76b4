"""Config-driven runs, including order-preserving parallel batches."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

from . import config as C
from .errors import InfeasibleCertificate
from .simulator import Metrics, SimTrace, compute_metrics, run

log = logging.getLogger(__name__)

THREADS_ENV = "TARC_LAB_THREADS"


@dataclass
class RunResult:
    label: str
    metrics: Metrics
    certificate: dict
    trace: Optional[SimTrace] = None


def run_config(cfg: C.ExperimentConfig, label: Optional[str] = None, keep_trace: bool = True) -> RunResult:
    """Build plant, certificate, controller and reference from ``cfg`` and simulate.

    An infeasible certificate is logged; with ``stability.require_feasible``
    it raises :class:`InfeasibleCertificate` instead.
    """
    if label and label != cfg["controller"]["strategy"]:
        cfg = cfg.with_value("controller.strategy", label)
    label = cfg["controller"]["strategy"]
    plant = C.build_plant(cfg)
    cert = C.build_certificate(cfg)
    if not cert.feasible:
        msg = f"{cert.kind} certificate infeasible (lambda_min={cert.lambda_min:.3e})"
        if cfg["stability"]["require_feasible"]:
            raise InfeasibleCertificate(msg)
        log.warning("%s; running anyway", msg)
    ctrl = C.build_controller(cfg, plant, P=cert.P, label=label)
    trace = run(plant, ctrl, C.build_reference(cfg), C.build_sim(cfg), label=label)
    return RunResult(label, compute_metrics(trace), cert.summary(), trace if keep_trace else None)


def _job(payload):
    data, label = payload
    res = run_config(C.from_dict(data), label, keep_trace=False)
    return res.label, res.metrics, res.certificate


def worker_count(jobs: int, requested: Optional[int] = None) -> int:
    """Parallel workers: ``requested``, else ``$TARC_LAB_THREADS``, else the CPU count; capped by ``jobs``."""
    if requested is None:
        env = os.environ.get(THREADS_ENV)
        requested = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(int(requested), jobs))


def run_many(jobs: Sequence[tuple], workers: Optional[int] = None) -> list[RunResult]:
    """Run ``(config, label)`` pairs; results keep the job order whatever the worker count.

    Runs share nothing, so they go to separate processes; traces are not
    returned from batches.
    """
    payloads = [(cfg.to_dict(), label) for cfg, label in jobs]
    nw = worker_count(len(payloads), workers)
    if nw == 1 or len(payloads) <= 1:
        out = [_job(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=nw) as pool:
            out = list(pool.map(_job, payloads))
    return [RunResult(label, metrics, cert) for label, metrics, cert in out]
