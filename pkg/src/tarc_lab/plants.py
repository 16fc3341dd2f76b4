"""Simulated Euler-Lagrange plants ``M(q) q_ddot + N(q, q_dot, t) = tau``.

Each :class:`PlantModel` carries the true dynamics used for integration and
the nominal model available to controllers. ``N`` lumps Coriolis, gravity,
friction and the external disturbance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import IllConditionedInertia, NonPhysicalParams
from .linalg import condition_number, solve

COND_LIMIT = 1e8


# --- disturbances ------------------------------------------------------------


@dataclass(frozen=True)
class Disturbance:
    """External torque profile d(t).

    kind: ``none`` | ``step`` | ``sinusoid`` | ``bandlimited``.
    ``amplitude`` is per-coordinate (scalar broadcast). For ``bandlimited``
    the signal is a sum of ``components`` sinusoids with seeded random
    frequencies up to ``frequency`` Hz and random phases, scaled so each
    coordinate has peak amplitude at most ``amplitude``.
    """

    kind: str = "none"
    amplitude: tuple = (0.0,)
    frequency: float = 1.0
    t_step: float = 0.0
    components: int = 8
    seed: int = 0

    KINDS = ("none", "step", "sinusoid", "bandlimited")

    def build(self, n: int) -> Callable[[float], np.ndarray]:
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        amp = np.broadcast_to(np.asarray(self.amplitude, dtype=float), (n,)).copy()
        if self.kind == "none" or not np.any(amp):
            zero = np.zeros(n)
            return lambda t: zero
        if self.kind == "step":
            t0 = self.t_step
            zero = np.zeros(n)
            return lambda t: amp if t >= t0 else zero
        if self.kind == "sinusoid":
            w = 2 * np.pi * self.frequency
            phase = np.arange(n) * (np.pi / 3)
            return lambda t: amp * np.sin(w * t + phase)
        rng = np.random.default_rng(self.seed)
        freqs = rng.uniform(0.05, 1.0, size=(n, self.components)) * self.frequency * 2 * np.pi
        phases = rng.uniform(0, 2 * np.pi, size=(n, self.components))
        scale = amp / self.components
        return lambda t: scale * np.sin(freqs * t + phases).sum(axis=1)


# --- model container -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PlantModel:
    n: int
    M_true: Callable[[np.ndarray], np.ndarray]
    N_true: Callable[[np.ndarray, np.ndarray, float], np.ndarray]
    M_hat: Callable[[np.ndarray], np.ndarray]
    N_hat_model: Optional[Callable[[np.ndarray, np.ndarray, float], np.ndarray]] = None
    noise_std: float = 0.0
    name: str = "plant"
    energy: Optional[Callable[[np.ndarray, np.ndarray], float]] = None
    info: dict = field(default_factory=dict)


def accelerate(plant: PlantModel, q, q_dot, tau, t: float) -> np.ndarray:
    """Forward dynamics q_ddot = M(q)^-1 (tau - N(q, q_dot, t))."""
    M = plant.M_true(q)
    if condition_number(M) > COND_LIMIT:
        raise IllConditionedInertia(f"inertia condition number exceeds {COND_LIMIT:g} at q={q}")
    return solve(M, np.asarray(tau, dtype=float) - plant.N_true(q, q_dot, t))


def measure(plant: PlantModel, q, rng: np.random.Generator) -> np.ndarray:
    """Position measurement with additive Gaussian noise."""
    q = np.asarray(q, dtype=float)
    if plant.noise_std == 0:
        return q.copy()
    return q + rng.normal(0.0, plant.noise_std, size=q.shape)


def _perturb(values: dict, scale: float, rng: Optional[np.random.Generator]) -> dict:
    if scale == 0 or rng is None:
        return dict(values)
    return {k: v * (1 + rng.uniform(-scale, scale)) for k, v in values.items()}


# --- two-link planar manipulator ---------------------------------------------------


@dataclass(frozen=True)
class TwoLinkParams:
    """Vertical-plane two-link arm; angles measured from the horizontal."""

    m1: float = 1.0
    m2: float = 1.0
    l1: float = 0.5
    l2: float = 0.5
    lc1: float = 0.25
    lc2: float = 0.25
    I1: float = 0.02
    I2: float = 0.02
    g: float = 9.81
    b1: float = 0.1
    b2: float = 0.1

    def validate(self):
        for name in ("m1", "m2", "l1", "l2", "lc1", "lc2", "g"):
            if not getattr(self, name) > 0:
                raise NonPhysicalParams(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("I1", "I2", "b1", "b2"):
            if getattr(self, name) < 0:
                raise NonPhysicalParams(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.lc1 > self.l1 or self.lc2 > self.l2:
            raise NonPhysicalParams("centre of mass must lie on the link")


def _two_link_terms(p: dict):
    m1, m2, l1, lc1, lc2, I1, I2, g = (p[k] for k in ("m1", "m2", "l1", "lc1", "lc2", "I1", "I2", "g"))
    a1 = I1 + I2 + m1 * lc1**2 + m2 * (l1**2 + lc2**2)
    a2 = m2 * l1 * lc2
    a3 = I2 + m2 * lc2**2
    g1 = (m1 * lc1 + m2 * l1) * g
    g2 = m2 * lc2 * g
    b = np.array([p["b1"], p["b2"]])

    def M(q):
        c2 = math.cos(q[1])
        m12 = a3 + a2 * c2
        return np.array([[a1 + 2 * a2 * c2, m12], [m12, a3]])

    def N_rigid(q, qd):
        s2 = math.sin(q[1])
        c1, c12 = math.cos(q[0]), math.cos(q[0] + q[1])
        v1, v2 = qd[0], qd[1]
        return np.array([
            -a2 * s2 * v2 * (2 * v1 + v2) + g1 * c1 + g2 * c12 + b[0] * v1,
            a2 * s2 * v1 * v1 + g2 * c12 + b[1] * v2,
        ])

    def energy(q, qd):
        pe = g1 * np.sin(q[0]) + g2 * np.sin(q[0] + q[1])
        return float(0.5 * qd @ M(q) @ qd + pe)

    return M, N_rigid, energy


def two_link_manipulator(params: TwoLinkParams = TwoLinkParams(), *, uncertainty_scale: float = 0.0,
                         disturbance: Disturbance = Disturbance(), noise_std: float = 0.0,
                         seed: int = 0) -> PlantModel:
    """Two-link arm with nominal parameters drawn within ``+-uncertainty_scale``.

    Link masses, inertias and centre-of-mass offsets of the nominal model are
    each scaled by an independent factor in ``[1 - s, 1 + s]``; the same
    nominal parameters define ``N_hat_model`` (without the disturbance).
    """
    params.validate()
    if uncertainty_scale < 0 or noise_std < 0:
        raise NonPhysicalParams("uncertainty_scale and noise_std must be >= 0")
    true = dict(vars(params))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    perturbable = {k: true[k] for k in ("m1", "m2", "lc1", "lc2", "I1", "I2", "b1", "b2")}
    nominal = dict(true)
    nominal.update(_perturb(perturbable, uncertainty_scale, rng))
    M_t, N_t_rigid, energy = _two_link_terms(true)
    M_h, N_h_rigid, _ = _two_link_terms(nominal)
    d = disturbance.build(2)

    def N_true(q, qd, t):
        return N_t_rigid(q, qd) + d(t)

    def N_hat(q, qd, t):
        return N_h_rigid(q, qd)

    return PlantModel(n=2, M_true=M_t, N_true=N_true, M_hat=M_h, N_hat_model=N_hat,
                      noise_std=noise_std, name="two_link", energy=energy,
                      info={"true": true, "nominal": nominal})


# --- decoupled point masses -----------------------------------------------------------


@dataclass(frozen=True)
class PointMassParams:
    """``dof`` independent unit-axis masses with viscous damping."""

    dof: int = 1
    mass: float = 1.0
    damping: float = 0.5

    def validate(self):
        if int(self.dof) != self.dof or self.dof < 1:
            raise NonPhysicalParams(f"dof must be an integer >= 1, got {self.dof}")
        if not self.mass > 0:
            raise NonPhysicalParams(f"mass must be > 0, got {self.mass}")
        if self.damping < 0:
            raise NonPhysicalParams("damping must be >= 0")


def point_mass(params: PointMassParams = PointMassParams(), *, uncertainty_scale: float = 0.0,
               disturbance: Disturbance = Disturbance(), noise_std: float = 0.0,
               seed: int = 0) -> PlantModel:
    """M = mass I, N = damping q_dot + d(t); the simplest plant with arbitrary dimension."""
    params.validate()
    if uncertainty_scale < 0 or noise_std < 0:
        raise NonPhysicalParams("uncertainty_scale and noise_std must be >= 0")
    n = int(params.dof)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 404]))
    true = {"mass": params.mass, "damping": params.damping}
    nominal = _perturb(true, uncertainty_scale, rng)
    M_t, M_h = true["mass"] * np.eye(n), nominal["mass"] * np.eye(n)
    d = disturbance.build(n)
    return PlantModel(
        n=n,
        M_true=lambda q: M_t,
        N_true=lambda q, qd, t: true["damping"] * qd + d(t),
        M_hat=lambda q: M_h,
        N_hat_model=lambda q, qd, t: nominal["damping"] * qd,
        noise_std=noise_std,
        name="point_mass",
        energy=lambda q, qd: float(0.5 * true["mass"] * qd @ qd),
        info={"true": true, "nominal": nominal},
    )


# --- wheeled mobile robot, velocity-level dynamics -----------------------------------


@dataclass(frozen=True)
class WmrParams:
    """Differential-drive robot reduced to (arc length, heading) coordinates.

    Generalised torques are the net forward force and yaw moment; the
    inertia matrix is ``diag(mass, inertia)``.
    """

    mass: float = 9.0
    inertia: float = 0.16
    wheel_radius: float = 0.095
    track: float = 0.33
    friction_v: float = 0.5
    friction_w: float = 0.05

    def validate(self):
        for name in ("mass", "inertia", "wheel_radius", "track"):
            if not getattr(self, name) > 0:
                raise NonPhysicalParams(f"{name} must be > 0, got {getattr(self, name)}")
        if self.friction_v < 0 or self.friction_w < 0:
            raise NonPhysicalParams("friction coefficients must be >= 0")


def wmr_dynamic(params: WmrParams = WmrParams(), *, uncertainty_scale: float = 0.0,
                disturbance: Disturbance = Disturbance(), noise_std: float = 0.0,
                seed: int = 0) -> PlantModel:
    params.validate()
    if uncertainty_scale < 0 or noise_std < 0:
        raise NonPhysicalParams("uncertainty_scale and noise_std must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    true = dict(vars(params))
    nominal = dict(true)
    nominal.update(_perturb({k: true[k] for k in ("mass", "inertia", "friction_v", "friction_w")},
                            uncertainty_scale, rng))
    M_true_const = np.diag([true["mass"], true["inertia"]])
    M_hat_const = np.diag([nominal["mass"], nominal["inertia"]])
    fr_t = np.array([true["friction_v"], true["friction_w"]])
    fr_h = np.array([nominal["friction_v"], nominal["friction_w"]])
    d = disturbance.build(2)

    def energy(q, qd):
        return float(0.5 * qd @ M_true_const @ qd)

    return PlantModel(
        n=2,
        M_true=lambda q: M_true_const,
        N_true=lambda q, qd, t: fr_t * qd + d(t),
        M_hat=lambda q: M_hat_const,
        N_hat_model=lambda q, qd, t: fr_h * qd,
        noise_std=noise_std,
        name="wmr",
        energy=energy,
        info={"true": true, "nominal": nominal},
    )


def integrate_pose(q: np.ndarray, pose0=(0.0, 0.0)) -> np.ndarray:
    """Planar (x, y, heading) path from sampled (arc length, heading) rows.

    Uses the midpoint heading on each segment; for reporting only.
    """
    q = np.asarray(q, dtype=float)
    ds = np.diff(q[:, 0])
    th_mid = 0.5 * (q[1:, 1] + q[:-1, 1])
    x = pose0[0] + np.concatenate([[0.0], np.cumsum(ds * np.cos(th_mid))])
    y = pose0[1] + np.concatenate([[0.0], np.cumsum(ds * np.sin(th_mid))])
    return np.column_stack([x, y, q[:, 1]])


# --- reference trajectories ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReferenceTrajectory:
    q_d: Callable[[float], np.ndarray]
    q_dot_d: Callable[[float], np.ndarray]
    q_ddot_d: Callable[[float], np.ndarray]
    n: int

    def sample(self, t: float):
        return self.q_d(t), self.q_dot_d(t), self.q_ddot_d(t)

    @classmethod
    def constant(cls, q0) -> "ReferenceTrajectory":
        q0 = np.asarray(q0, dtype=float)
        z = np.zeros_like(q0)
        return cls(lambda t: q0, lambda t: z, lambda t: z, n=q0.size)

    @classmethod
    def sinusoid(cls, offset, amplitude, frequency) -> "ReferenceTrajectory":
        """q_d = offset + amplitude * sin(2 pi f t), per coordinate."""
        off = np.asarray(offset, dtype=float)
        amp = np.broadcast_to(np.asarray(amplitude, dtype=float), off.shape).copy()
        w = 2 * np.pi * np.broadcast_to(np.asarray(frequency, dtype=float), off.shape).copy()
        return cls(
            lambda t: off + amp * np.sin(w * t),
            lambda t: amp * w * np.cos(w * t),
            lambda t: -amp * w * w * np.sin(w * t),
            n=off.size,
        )

    @classmethod
    def polynomial(cls, coeffs) -> "ReferenceTrajectory":
        """Rows of ``coeffs`` are per-power coefficient vectors: q_d = sum_k c_k t^k."""
        c = np.atleast_2d(np.asarray(coeffs, dtype=float))

        def deriv(order):
            def f(t):
                out = np.zeros(c.shape[1])
                for p in range(order, c.shape[0]):
                    fac = np.prod(np.arange(p - order + 1, p + 1)) if order else 1.0
                    out += fac * c[p] * t ** (p - order)
                return out
            return f

        return cls(deriv(0), deriv(1), deriv(2), n=c.shape[1])
