"""CSV emission and read-back for traces, metrics and comparison tables.

Floats are written with 17 significant digits so every double survives a
write/read round trip exactly.
"""

from __future__ import annotations

import csv
import math
from typing import Iterable, Sequence

import numpy as np

from .simulator import Metrics, SimTrace


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return "%.17g" % x
    if x is None:
        return ""
    return str(x)


def trace_columns(n: int) -> list[str]:
    cols = ["t"]
    for prefix in ("q", "qd", "qdot", "e1", "tau"):
        cols += [f"{prefix}_{i + 1}" for i in range(n)]
    return cols + ["c_hat", "s_norm"]


def write_trace_csv(trace: SimTrace, path) -> None:
    """Columns: t, q_i, qd_i (desired), qdot_i, e1_i, tau_i, c_hat, s_norm."""
    cols = trace_columns(trace.n)
    block = np.column_stack([trace.t, trace.q, trace.q_d, trace.q_dot, trace.e1, trace.tau,
                             trace.c_hat, trace.s_norm]) if len(trace) else np.empty((0, len(cols)))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in block:
            w.writerow([fmt(v) for v in row])


def read_trace_csv(path, warmup_time: float = 0.0, label: str = "") -> SimTrace:
    """Parse a trace CSV back into a :class:`SimTrace`.

    Measured positions are not stored; ``q_measured`` is set to ``q``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n = (len(header) - 3) // 5
    if header != trace_columns(n):
        raise ValueError(f"unexpected trace header in {path}")
    data = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(-1, len(header))

    def cols(prefix):
        return data[:, [header.index(f"{prefix}_{i + 1}") for i in range(n)]]

    t = data[:, 0]
    dt = float(t[1] - t[0]) if len(t) > 1 else 0.0
    return SimTrace(t=t, q=cols("q"), q_dot=cols("qdot"), q_measured=cols("q"), q_d=cols("qd"),
                    e1=cols("e1"), tau=cols("tau"), c_hat=data[:, -2], s_norm=data[:, -1],
                    label=label, dt=dt, warmup_time=warmup_time)


def write_rows_csv(rows: Sequence[dict], path, columns: Iterable[str] = None) -> None:
    columns = list(columns) if columns is not None else (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])


def report_record(label: str, metrics: Metrics, certificate: dict, config_hash: str, **extra) -> dict:
    """Flat row: label, extra fields, every metric, certificate verdict, config hash."""
    row = {"strategy": label}
    row.update(extra)
    row.update(metrics.as_row())
    row["cert_kind"] = certificate.get("kind")
    row["cert_lambda_min"] = certificate.get("lambda_min")
    row["cert_feasible"] = bool(certificate.get("feasible"))
    row["config_hash"] = config_hash
    return row
