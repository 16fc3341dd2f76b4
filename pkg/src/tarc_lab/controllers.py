"""Time-delayed control laws for Euler-Lagrange plants.

All four strategies share the structure ``tau = M_hat(q) u + N_hat`` where
the lumped dynamics are recovered from the previous input/output pair,
``N_hat = tau_h - M_hat(q_h) q_ddot_h`` (the ASMC baseline instead uses a
nominal model). They differ in how derivatives are obtained and whether a
switching term with an adaptive gain is added:

========  ====================  =====================  ===================
strategy  velocity              delayed acceleration   robust term
========  ====================  =====================  ===================
TDC       measured / backward   measured / backward    none
FTDC      kernel estimate       kernel estimate        none
ASMC      measured / backward   (nominal model)        threshold-adaptive
TARC      kernel estimate       kernel estimate        delay-adaptive
========  ====================  =====================  ===================

The step functions read past samples from ``state.buffer``, whose newest
entry must already hold the current position, and write the torque, the
auxiliary input and the sliding-variable norm back into that entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import BufferCold, IllConditionedMhat, InfeasibleCertificate
from .estimator import HistoryBuffer, KernelSpec, build_weights, estimate
from .linalg import condition_number
from .stability import GainSet, as_matrix, check_spd

STRATEGIES = ("TDC", "FTDC", "ASMC", "TARC")
VELOCITY_SOURCES = ("true", "fd")
MHAT_COND_LIMIT = 1e8
S_NORM_GUARD = 1e-12


@dataclass(frozen=True, eq=False)
class AsmcConfig:
    """Threshold-adaptive sliding mode parameters.

    ``rho_mode="fixed"`` uses the constant threshold ``rho``;
    ``"scaled"`` uses ``rho = 4 * c_hat * dt``.
    """

    c_bar: float = 10.0
    rho_mode: str = "fixed"
    rho: float = 0.05
    lambda_s: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.c_bar > 0:
            raise ValueError(f"asmc.c_bar must be > 0, got {self.c_bar}")
        if self.rho_mode not in ("fixed", "scaled"):
            raise ValueError(f"asmc.rho_mode must be 'fixed' or 'scaled', got {self.rho_mode!r}")
        if self.rho_mode == "fixed" and not self.rho > 0:
            raise ValueError(f"asmc.rho must be > 0, got {self.rho}")


@dataclass(frozen=True, eq=False)
class ControllerConfig:
    strategy: str
    gains: GainSet
    m_hat: Callable[[np.ndarray], np.ndarray]
    dt: float
    h_lag: int = 1
    Lambda: int = 2
    m: int = 20
    P: Optional[np.ndarray] = None
    alpha: float = 2.0
    alpha_down: Optional[float] = None
    gamma_floor: float = 0.01
    epsilon: float = 0.05
    c_hat0: Optional[float] = None
    mhat_scale: float = 1.0
    asmc: AsmcConfig = field(default_factory=AsmcConfig)
    velocity_source: str = "true"
    nhat: str = "delayed"
    n_hat_model: Optional[Callable] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.velocity_source not in VELOCITY_SOURCES:
            raise ValueError(f"velocity_source must be one of {VELOCITY_SOURCES}")
        if self.nhat not in ("delayed", "model"):
            raise ValueError("nhat must be 'delayed' or 'model'")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if int(self.h_lag) != self.h_lag or self.h_lag < 1:
            raise ValueError(f"h_lag must be an integer >= 1, got {self.h_lag}")
        if not self.alpha > 1:
            raise ValueError(f"alpha must be > 1, got {self.alpha}")
        if self.alpha_down is not None and not self.alpha_down > 1:
            raise ValueError(f"alpha_down must be > 1, got {self.alpha_down}")
        if not self.gamma_floor > 0:
            raise ValueError(f"gamma_floor must be > 0, got {self.gamma_floor}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.mhat_scale > 0:
            raise ValueError(f"mhat_scale must be > 0, got {self.mhat_scale}")
        if self.c_hat0 is not None and self.c_hat0 < 0:
            raise ValueError("c_hat0 must be >= 0")
        if self.P is not None:
            object.__setattr__(self, "P", check_spd(as_matrix(self.P, 2 * self.gains.n, "P"), "P"))
        if self.strategy in ("FTDC", "TARC"):
            sig = self.m * self.dt
            object.__setattr__(self, "kernel", build_weights(self.Lambda, 1, sig, self.m))
            object.__setattr__(self, "kernel_acc", build_weights(self.Lambda, 2, sig, self.m))
        else:
            object.__setattr__(self, "kernel", None)
            object.__setattr__(self, "kernel_acc", None)
        if self.strategy == "ASMC":
            lam = self.asmc.lambda_s
            lam = self.gains.K1 @ np.linalg.inv(self.gains.K2) if lam is None else lam
            object.__setattr__(self, "lambda_s", as_matrix(lam, self.gains.n, "asmc.lambda_s"))
        else:
            object.__setattr__(self, "lambda_s", None)

    @property
    def n(self) -> int:
        return self.gains.n

    @property
    def sigma_win(self) -> float:
        return self.m * self.dt

    def required_history(self) -> int:
        """Number of past samples (besides the current one) a step reads."""
        if self.strategy in ("FTDC", "TARC"):
            return self.h_lag + self.m
        if self.strategy == "TDC":
            if self.nhat == "model":
                return 1 if self.velocity_source == "fd" else 0
            return self.h_lag + (1 if self.velocity_source == "fd" else 0)
        return 1 if self.velocity_source == "fd" else 0


@dataclass
class ControllerState:
    c_hat: float
    buffer: HistoryBuffer
    last_s_norm: float = 0.0
    warm: bool = False

    @classmethod
    def initial(cls, cfg: ControllerConfig, capacity: Optional[int] = None) -> "ControllerState":
        cap = capacity if capacity is not None else cfg.required_history() + cfg.h_lag + 3
        c0 = cfg.gamma_floor if cfg.c_hat0 is None else cfg.c_hat0
        return cls(c_hat=float(c0), buffer=HistoryBuffer(cfg.n, cap, cfg.dt))


# --- small pure pieces ----------------------------------------------------------


def nominal_inertia(cfg: ControllerConfig, q, scaled: bool = True) -> np.ndarray:
    """M_hat(q), times ``cfg.mhat_scale`` when the lumped term is time-delayed.

    The sampled update tau_k = tau_{k-h} + M_hat (u - q_ddot_hat) integrates
    with per-sample gain M_hat/M; lagged acceleration estimates need that
    gain well below one.
    """
    M = np.asarray(cfg.m_hat(q), dtype=float)
    if scaled and cfg.strategy != "ASMC" and cfg.nhat == "delayed":
        M = cfg.mhat_scale * M
    if condition_number(M) > MHAT_COND_LIMIT:
        raise IllConditionedMhat(f"M_hat condition number exceeds {MHAT_COND_LIMIT:g}")
    return M


def time_delay_estimate(M_hat_h, tau_h, q_ddot_h) -> np.ndarray:
    """N_hat = tau_h - M_hat(q_h) q_ddot_h."""
    return np.asarray(tau_h, dtype=float) - np.asarray(M_hat_h, dtype=float) @ np.asarray(q_ddot_h, dtype=float)


def auxiliary_input(gains: GainSet, e1, e1_dot, qdd_ref) -> np.ndarray:
    """u = q_ddot_d - K2 e1_dot - K1 e1."""
    return qdd_ref - gains.K2 @ e1_dot - gains.K1 @ e1


def sliding_variable(P: np.ndarray, e1, e1_dot) -> np.ndarray:
    """s = B^T P [e1; e1_dot], i.e. the lower block row of P applied to the error."""
    n = len(e1)
    return P[n:, :n] @ e1 + P[n:, n:] @ e1_dot


def switching_term(s, c_hat: float, alpha: float, epsilon: float) -> np.ndarray:
    """-alpha c_hat s / ||s|| outside the boundary layer, -alpha c_hat s / epsilon inside."""
    s = np.asarray(s, dtype=float)
    return -alpha * c_hat * s / max(float(np.linalg.norm(s)), epsilon)


def tarc_gain_rate(c_hat: float, s_norm: float, s_norm_h: float, gamma: float) -> float:
    """Switching-gain derivative: +||s|| if ||s|| grew over the delay, -||s|| otherwise."""
    if c_hat > gamma:
        return s_norm if s_norm - s_norm_h > 0 else -s_norm
    return gamma


def asmc_gain_rate(c_hat: float, s_norm: float, rho: float, c_bar: float, gamma: float) -> float:
    """Threshold law c_bar ||s|| sgn(||s|| - rho), with sgn(0) = -1."""
    if c_hat > gamma:
        return c_bar * s_norm * (1.0 if s_norm - rho > 0 else -1.0)
    return gamma


def _euler(c_hat: float, rate: float, dt: float) -> float:
    # the gain is a magnitude; a large negative step must not flip its sign
    return max(c_hat + dt * rate, 0.0)


def _ref(ref):
    qd, qd_dot, qd_ddot = ref
    return (np.asarray(qd, dtype=float), np.asarray(qd_dot, dtype=float), np.asarray(qd_ddot, dtype=float))


def _s_norm(cfg, e1, e1_dot) -> float:
    if cfg.P is None:
        return float("nan")
    return float(np.linalg.norm(sliding_variable(cfg.P, e1, e1_dot)))


# --- control laws ---------------------------------------------------------------


def tdc_step(cfg: ControllerConfig, state: ControllerState, q, q_dot, q_ddot_h, ref,
             tau_h=None, q_h=None, t: float = 0.0) -> np.ndarray:
    """Time-delayed control with supplied velocity and delayed acceleration.

    With ``cfg.nhat == "model"`` the nominal model replaces the delayed
    estimate and ``q_ddot_h`` is ignored.
    """
    qd, qd_dot, qd_ddot = _ref(ref)
    q = np.asarray(q, dtype=float)
    e1, e1_dot = q - qd, np.asarray(q_dot, dtype=float) - qd_dot
    u = auxiliary_input(cfg.gains, e1, e1_dot, qd_ddot)
    M = nominal_inertia(cfg, q)
    if cfg.nhat == "model":
        if cfg.n_hat_model is None:
            raise ValueError("nhat='model' needs n_hat_model")
        N_hat = np.asarray(cfg.n_hat_model(q, np.asarray(q_dot, dtype=float), t), dtype=float)
    else:
        buf = state.buffer
        tau_h = buf.get("tau", cfg.h_lag) if tau_h is None else np.asarray(tau_h, dtype=float)
        q_h = buf.get("q", cfg.h_lag) if q_h is None else np.asarray(q_h, dtype=float)
        N_hat = time_delay_estimate(nominal_inertia(cfg, q_h), tau_h, q_ddot_h)
    tau = M @ u + N_hat
    if state.buffer.count:
        state.buffer.set_latest(tau=tau, u=u, s_norm=_s_norm(cfg, e1, e1_dot))
    return tau


def _filtered_terms(cfg, state, q, ref):
    buf = state.buffer
    if not buf.is_warm(cfg.h_lag, cfg.m):
        raise BufferCold(f"kernel estimates need {cfg.h_lag + cfg.m + 1} samples, have {len(buf)}")
    qd, qd_dot, qd_ddot = _ref(ref)
    q = np.asarray(q, dtype=float)
    q_dot_hat = estimate(buf, cfg.kernel, 0)
    q_ddot_hat_h = estimate(buf, cfg.kernel_acc, cfg.h_lag)
    e1, e1_dot_hat = q - qd, q_dot_hat - qd_dot
    u_hat = auxiliary_input(cfg.gains, e1, e1_dot_hat, qd_ddot)
    q_h = buf.get("q", cfg.h_lag)
    N_hat = time_delay_estimate(nominal_inertia(cfg, q_h), buf.get("tau", cfg.h_lag), q_ddot_hat_h)
    return q, e1, e1_dot_hat, u_hat, N_hat


def ftdc_step(cfg: ControllerConfig, state: ControllerState, q, ref) -> np.ndarray:
    """Filtered TDC: position-only, derivatives from the integral kernel."""
    q, e1, e1_dot_hat, u, N_hat = _filtered_terms(cfg, state, q, ref)
    tau = nominal_inertia(cfg, q) @ u + N_hat
    state.buffer.set_latest(tau=tau, u=u, s_norm=_s_norm(cfg, e1, e1_dot_hat))
    return tau


def tarc_step(cfg: ControllerConfig, state: ControllerState, q, ref, dt: Optional[float] = None) -> np.ndarray:
    """Filtered TDC plus a boundary-layer switching term with delay-adaptive gain."""
    if cfg.P is None:
        raise InfeasibleCertificate("TARC needs the Lyapunov matrix P of a stability certificate")
    dt = cfg.dt if dt is None else dt
    q, e1, e1_dot_hat, u_hat, N_hat = _filtered_terms(cfg, state, q, ref)
    s = sliding_variable(cfg.P, e1, e1_dot_hat)
    s_norm = float(np.linalg.norm(s))
    s_norm_h = state.buffer.get("s_norm", cfg.h_lag)
    if not np.isfinite(s_norm_h):
        s_norm_h = s_norm
    grew = s_norm - s_norm_h > 0
    alpha = cfg.alpha if (grew or cfg.alpha_down is None) else cfg.alpha_down
    u = u_hat + switching_term(s, state.c_hat, alpha, cfg.epsilon)
    tau = nominal_inertia(cfg, q) @ u + N_hat
    state.c_hat = _euler(state.c_hat, tarc_gain_rate(state.c_hat, s_norm, s_norm_h, cfg.gamma_floor), dt)
    state.last_s_norm = s_norm
    state.buffer.set_latest(tau=tau, u=u, s_norm=s_norm)
    return tau


def asmc_step(cfg: ControllerConfig, state: ControllerState, q, q_dot, ref, dt: Optional[float] = None,
              t: float = 0.0) -> np.ndarray:
    """Threshold-adaptive sliding mode control on s_bar = e1_dot + lambda_s e1.

    Needs the nominal model ``cfg.n_hat_model``; the switching action enters
    at the acceleration level, ``tau = M_hat (q_ddot_d - lambda_s e1_dot - c_hat s/||s||) + N_model``.
    """
    if cfg.n_hat_model is None:
        raise ValueError("ASMC needs a nominal model n_hat_model")
    dt = cfg.dt if dt is None else dt
    qd, qd_dot, qd_ddot = _ref(ref)
    q = np.asarray(q, dtype=float)
    q_dot = np.asarray(q_dot, dtype=float)
    e1, e1_dot = q - qd, q_dot - qd_dot
    s_bar = e1_dot + cfg.lambda_s @ e1
    s_norm = float(np.linalg.norm(s_bar))
    du = -state.c_hat * s_bar / s_norm if s_norm >= S_NORM_GUARD else np.zeros_like(s_bar)
    u = qd_ddot - cfg.lambda_s @ e1_dot + du
    tau = nominal_inertia(cfg, q) @ u + np.asarray(cfg.n_hat_model(q, q_dot, t), dtype=float)
    rho = cfg.asmc.rho if cfg.asmc.rho_mode == "fixed" else 4.0 * state.c_hat * dt
    state.c_hat = _euler(state.c_hat, asmc_gain_rate(state.c_hat, s_norm, rho, cfg.asmc.c_bar, cfg.gamma_floor), dt)
    state.last_s_norm = s_norm
    if state.buffer.count:
        state.buffer.set_latest(tau=tau, u=u, s_norm=s_norm)
    return tau


# --- loop-facing wrapper -----------------------------------------------------------


def backward_velocity(buffer: HistoryBuffer, lag: int = 0) -> np.ndarray:
    return (buffer.get("q", lag) - buffer.get("q", lag + 1)) / buffer.dt


def central_acceleration(buffer: HistoryBuffer, lag: int) -> np.ndarray:
    """Second difference centred on the sample at ``lag`` (needs ``lag >= 1``)."""
    if lag < 1:
        raise ValueError("central difference needs lag >= 1")
    q0, q1, q2 = (buffer.get("q", lag - 1 + i) for i in range(3))
    return (q0 - 2 * q1 + q2) / buffer.dt**2


class Controller:
    """Runs one strategy inside a sampled loop.

    Before ``warmup_steps`` samples have been seen a PD law with backward
    difference velocity and no lumped-dynamics compensation is applied,
    ``tau = M_hat (q_ddot_d - K2 e1_dot - K1 e1)``. The default warm-up
    length is ``h_lag + m`` samples for every strategy so that compared
    strategies share the same start-up.
    """

    def __init__(self, cfg: ControllerConfig, warmup_steps: Optional[int] = None):
        need = cfg.required_history()
        if warmup_steps is None:
            warmup_steps = max(cfg.h_lag + cfg.m, need)
        if warmup_steps < need:
            raise ValueError(f"warmup of {warmup_steps} samples is shorter than the {need} the strategy reads")
        self.cfg = cfg
        self.warmup_steps = int(warmup_steps)
        self.reset()

    def reset(self) -> None:
        self.state = ControllerState.initial(self.cfg)
        self.k = 0

    @property
    def c_hat(self) -> float:
        return self.state.c_hat

    def _pd(self, q, ref):
        cfg, buf = self.cfg, self.state.buffer
        qd, qd_dot, qd_ddot = _ref(ref)
        v = backward_velocity(buf) if len(buf) > 1 else np.zeros(cfg.n)
        e1, e1_dot = q - qd, v - qd_dot
        u = auxiliary_input(cfg.gains, e1, e1_dot, qd_ddot)
        tau = nominal_inertia(cfg, q, scaled=False) @ u
        if cfg.strategy == "ASMC":
            s_norm = float(np.linalg.norm(e1_dot + cfg.lambda_s @ e1))
        else:
            s_norm = _s_norm(cfg, e1, e1_dot)
        buf.set_latest(tau=tau, u=u, s_norm=s_norm)
        self.state.last_s_norm = s_norm
        return tau

    def step(self, t: float, q_meas, ref, q_dot_true=None) -> np.ndarray:
        """Push the measurement taken at ``t`` and return the torque to hold until ``t + dt``."""
        cfg, state = self.cfg, self.state
        q = np.asarray(q_meas, dtype=float)
        state.buffer.push(t, q)
        k = self.k
        self.k += 1
        if k < self.warmup_steps:
            return self._pd(q, ref)
        state.warm = True
        fd = cfg.velocity_source == "fd"
        if cfg.strategy == "TDC":
            q_dot = backward_velocity(state.buffer) if fd else q_dot_true
            if cfg.nhat == "model":
                qdd_h = None
            elif fd:
                qdd_h = central_acceleration(state.buffer, cfg.h_lag)
            else:
                qdd_h = state.buffer.get("qdd", cfg.h_lag)
            return tdc_step(cfg, state, q, q_dot, qdd_h, ref, t=t)
        if cfg.strategy == "FTDC":
            return ftdc_step(cfg, state, q, ref)
        if cfg.strategy == "TARC":
            return tarc_step(cfg, state, q, ref)
        q_dot = backward_velocity(state.buffer) if fd else q_dot_true
        return asmc_step(cfg, state, q, q_dot, ref, t=t)

    def record_acceleration(self, qdd) -> None:
        """Store the plant acceleration produced by the torque just applied."""
        self.state.buffer.set_latest(qdd=qdd)
