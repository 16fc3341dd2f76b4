"""Fixed-step closed-loop simulation with sampled, delay-aware control."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from .controllers import Controller, ControllerConfig
from .errors import EmptyTrace, IllConditionedInertia, NumericalBlowup
from .plants import PlantModel, ReferenceTrajectory, accelerate, measure

log = logging.getLogger(__name__)

BLOWUP_NORM = 1e6


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    duration: float = 5.0
    h_lag: int = 1
    warmup_policy: str = "PDOnly"
    seed: int = 0
    record_every: int = 1
    q0: Optional[tuple] = None
    qdot0: Optional[tuple] = None
    warmup_steps: Optional[int] = None
    tau_jump_max: float = 1e3

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if not self.tau_jump_max > 0:
            raise ValueError(f"tau_jump_max must be > 0, got {self.tau_jump_max}")
        if int(self.h_lag) != self.h_lag or self.h_lag < 1:
            raise ValueError(f"h_lag must be an integer >= 1, got {self.h_lag}")
        if self.duration < 10 * self.h_lag * self.dt:
            raise ValueError(f"duration must be >= 10 h = {10 * self.h_lag * self.dt:g} s")
        if self.warmup_policy != "PDOnly":
            raise ValueError(f"unsupported warmup policy {self.warmup_policy!r}")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise ValueError("record_every must be an integer >= 1")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))


@dataclass
class SimTrace:
    """Recorded closed-loop signals on a uniform grid (one row per record)."""

    t: np.ndarray
    q: np.ndarray
    q_dot: np.ndarray
    q_measured: np.ndarray
    q_d: np.ndarray
    e1: np.ndarray
    tau: np.ndarray
    c_hat: np.ndarray
    s_norm: np.ndarray
    label: str = ""
    dt: float = 0.0
    warmup_time: float = 0.0
    diverged: bool = False
    diverged_step: Optional[int] = None
    diagnostic: str = ""
    tau_jump: float = 0.0
    tau_jump_ok: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.q.shape[1]

    def __len__(self) -> int:
        return len(self.t)


def _rk4(plant: PlantModel, t: float, q, qd, tau, dt: float):
    def f(tt, x_q, x_v):
        return x_v, accelerate(plant, x_q, x_v, tau, tt)

    k1q, k1v = f(t, q, qd)
    k2q, k2v = f(t + dt / 2, q + dt / 2 * k1q, qd + dt / 2 * k1v)
    k3q, k3v = f(t + dt / 2, q + dt / 2 * k2q, qd + dt / 2 * k2v)
    k4q, k4v = f(t + dt, q + dt * k3q, qd + dt * k3v)
    return (q + dt / 6 * (k1q + 2 * k2q + 2 * k3q + k4q),
            qd + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v))


def run(plant: PlantModel, controller_cfg: ControllerConfig, reference: ReferenceTrajectory,
        sim_cfg: SimConfig, label: str = "") -> SimTrace:
    """Simulate one closed loop.

    The controller is sampled every ``dt`` and its torque held constant
    (zero-order hold) while RK4 advances the true plant state. A run that
    produces non-finite values or a state norm above ``1e6`` stops early and
    is returned with ``diverged=True``.
    """
    cfg = controller_cfg
    if cfg.h_lag != sim_cfg.h_lag or not math.isclose(cfg.dt, sim_cfg.dt):
        raise ValueError("controller and simulation disagree on dt or h_lag")
    n = plant.n
    ctrl = Controller(cfg, warmup_steps=sim_cfg.warmup_steps)
    rng = np.random.default_rng(np.random.SeedSequence([sim_cfg.seed, 303]))
    dt = sim_cfg.dt
    steps = sim_cfg.steps
    q = np.asarray(sim_cfg.q0 if sim_cfg.q0 is not None else reference.q_d(0.0), dtype=float).copy()
    qd = np.asarray(sim_cfg.qdot0 if sim_cfg.qdot0 is not None else reference.q_dot_d(0.0), dtype=float).copy()

    rows = {k: [] for k in ("t", "q", "q_dot", "q_measured", "q_d", "e1", "tau", "c_hat", "s_norm")}
    diverged, div_step, diag = False, None, ""
    tau_prev, tau_jump = None, 0.0
    for k in range(steps + 1):
        t = k * dt
        ref = reference.sample(t)
        q_meas = measure(plant, q, rng)
        try:
            c_before = ctrl.c_hat
            tau = ctrl.step(t, q_meas, ref, q_dot_true=qd)
            if not np.all(np.isfinite(tau)):
                raise NumericalBlowup(f"non-finite torque at step {k}")
            ctrl.record_acceleration(accelerate(plant, q, qd, tau, t))
        except (NumericalBlowup, IllConditionedInertia, np.linalg.LinAlgError, FloatingPointError) as exc:
            diverged, div_step, diag = True, k, str(exc)
            break
        if k == ctrl.warmup_steps and tau_prev is not None:
            tau_jump = float(np.linalg.norm(tau - tau_prev))
        tau_prev = tau
        if k % sim_cfg.record_every == 0:
            rows["t"].append(t)
            rows["q"].append(q.copy())
            rows["q_dot"].append(qd.copy())
            rows["q_measured"].append(q_meas)
            rows["q_d"].append(ref[0].copy())
            rows["e1"].append(q - ref[0])
            rows["tau"].append(tau.copy())
            rows["c_hat"].append(c_before)
            rows["s_norm"].append(ctrl.state.buffer.get("s_norm", 0))
        if k == steps:
            break
        try:
            with np.errstate(over="raise", invalid="raise"):
                q, qd = _rk4(plant, t, q, qd, tau, dt)
        except (FloatingPointError, IllConditionedInertia, np.linalg.LinAlgError) as exc:
            diverged, div_step, diag = True, k, str(exc)
            break
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))) or \
                math.hypot(np.linalg.norm(q), np.linalg.norm(qd)) > BLOWUP_NORM:
            diverged, div_step, diag = True, k + 1, f"state norm exceeded {BLOWUP_NORM:g}"
            break
    if diverged:
        log.warning("run %s diverged at step %s: %s", label or cfg.strategy, div_step, diag)
    jump_ok = tau_jump <= sim_cfg.tau_jump_max
    if not jump_ok:
        log.warning("run %s: torque jump %.3g at warm-up handoff exceeds %.3g",
                    label or cfg.strategy, tau_jump, sim_cfg.tau_jump_max)

    def stack(name, width):
        return np.array(rows[name], dtype=float).reshape(-1, width) if rows[name] else np.empty((0, width))

    return SimTrace(
        t=np.array(rows["t"], dtype=float),
        q=stack("q", n), q_dot=stack("q_dot", n), q_measured=stack("q_measured", n),
        q_d=stack("q_d", n), e1=stack("e1", n), tau=stack("tau", n),
        c_hat=np.array(rows["c_hat"], dtype=float), s_norm=np.array(rows["s_norm"], dtype=float),
        label=label or cfg.strategy, dt=dt, warmup_time=ctrl.warmup_steps * dt,
        diverged=diverged, diverged_step=div_step, diagnostic=diag, tau_jump=tau_jump,
        tau_jump_ok=jump_ok,
    )


# --- metrics ---------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    rms_e1: float
    max_e1: float
    control_energy: float
    chattering_index: float
    c_hat_final: float
    c_hat_max: float
    settle_time: float
    diverged: bool = False

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> dict:
        return {f: getattr(self, f) for f in self.field_names()}


def compute_metrics(trace: SimTrace, post_warmup_only: bool = True, settle_threshold: float = 1e-2) -> Metrics:
    """Tracking, effort and adaptation summaries over the trace (or its post-warm-up part)."""
    if len(trace) == 0:
        raise EmptyTrace("trace has no records")
    mask = trace.t >= trace.warmup_time - 1e-12 if post_warmup_only else np.ones(len(trace), bool)
    if not mask.any():
        raise EmptyTrace("no records after warm-up")
    t = trace.t[mask]
    err = np.linalg.norm(trace.e1[mask], axis=1)
    tau = trace.tau[mask]
    span = t[-1] - t[0]
    step = np.diff(t)
    tau_sq = np.sum(tau * tau, axis=1)
    energy = float(np.sum(tau_sq[:-1] * step)) if len(t) > 1 else 0.0
    tv = float(np.sum(np.linalg.norm(np.diff(tau, axis=0), axis=1))) if len(t) > 1 else 0.0
    above = np.nonzero(err >= settle_threshold)[0]
    if len(above) == 0:
        settle = float(t[0])
    elif above[-1] == len(err) - 1:
        settle = math.inf
    else:
        settle = float(t[above[-1] + 1])
    c = trace.c_hat[mask]
    return Metrics(
        rms_e1=float(np.sqrt(np.mean(err * err))),
        max_e1=float(err.max()),
        control_energy=energy,
        chattering_index=tv / span if span > 0 else 0.0,
        c_hat_final=float(c[-1]),
        c_hat_max=float(c.max()),
        settle_time=settle,
        diverged=bool(trace.diverged),
    )


def late_trend(trace: SimTrace, fraction: float = 1 / 3) -> tuple[float, float]:
    """Least-squares slope of ||e1|| over the final ``fraction`` of the run and its standard error."""
    k0 = int(len(trace) * (1 - fraction))
    t = trace.t[k0:]
    y = np.linalg.norm(trace.e1[k0:], axis=1)
    tc = t - t.mean()
    sxx = float(tc @ tc)
    slope = float(tc @ (y - y.mean()) / sxx)
    resid = y - y.mean() - slope * tc
    se = math.sqrt(float(resid @ resid) / max(len(t) - 2, 1) / sxx)
    return slope, se


# --- multi-run helpers -------------------------------------------------------------


STRATEGY_LABELS = {
    "TDC": ("TDC", "true"),
    "TDC-FD": ("TDC", "fd"),
    "FTDC": ("FTDC", "true"),
    "ASMC": ("ASMC", "true"),
    "ASMC-FD": ("ASMC", "fd"),
    "TARC": ("TARC", "true"),
}


def strategy_variant(cfg: ControllerConfig, label: str) -> ControllerConfig:
    """Controller config for a strategy label such as ``TDC-FD`` or ``TARC``."""
    try:
        strategy, vel = STRATEGY_LABELS[label]
    except KeyError:
        raise ValueError(f"unknown strategy {label!r}; expected one of {sorted(STRATEGY_LABELS)}") from None
    return replace(cfg, strategy=strategy, velocity_source=vel)


def compare(plant: PlantModel, controller_cfg: ControllerConfig, strategies: Sequence[str],
            reference: ReferenceTrajectory, sim_cfg: SimConfig,
            post_warmup_only: bool = True) -> list[tuple[str, Metrics]]:
    """Run each strategy on the same plant, reference and seed; rows keep the given order."""
    cfgs = [strategy_variant(controller_cfg, s) for s in strategies]
    out = []
    for label, cfg in zip(strategies, cfgs):
        trace = run(plant, cfg, reference, sim_cfg, label=label)
        out.append((label, compute_metrics(trace, post_warmup_only)))
    return out
