"""Delay-dependent stability certificates for time-delayed control.

Error dynamics of a TDC loop are written as

    e_dot = A1 e + B1 e(t - h) + B sigma,     A = A1 + B1,

with ``e = [e1; e1_dot]``. Given a Lyapunov solution ``P`` of
``A^T P + P A = -Q`` the block conditions ``Psi > 0`` (true-state TDC)
and ``Theta > 0`` (kernel-filtered TDC) are assembled here and tested by
their smallest eigenvalue. :func:`max_feasible_delay` then brackets the
largest delay ``h`` for which the TDC or F-TDC condition still holds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import (
    BracketNotFound,
    DimensionMismatch,
    InfeasibleCertificate,
    KernelOrderMismatch,
    NoFeasiblePoint,
    NonHurwitz,
    NotSPD,
    SingularSystem,
)
from .estimator import KernelSpec, kernel_square_integral

FEASIBILITY_RTOL = 1e-12
LYAPUNOV_RTOL = 1e-10

KINDS = ("TDC", "FTDC")
UUB_CASES = ("TDC", "TARC_i", "TARC_ii", "TARC_iii")


def as_matrix(x, n: Optional[int] = None, name: str = "matrix") -> np.ndarray:
    """Coerce a scalar, diagonal list or nested list into a square float matrix."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a * np.eye(n if n is not None else 1)
    elif a.ndim == 1:
        a = np.diag(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {a.shape}")
    if n is not None and a.shape[0] != n:
        raise DimensionMismatch(f"{name} must be {n}x{n}, got {a.shape}")
    return a


def check_spd(M: np.ndarray, name: str = "matrix") -> np.ndarray:
    M = np.asarray(M, dtype=float)
    scale = max(np.abs(M).max(), 1.0) if M.size else 1.0
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * scale):
        raise NotSPD(f"{name} is not symmetric")
    if M.size == 0 or np.linalg.eigvalsh(0.5 * (M + M.T))[0] <= 0:
        raise NotSPD(f"{name} is not positive definite")
    return M


def is_hurwitz(A: np.ndarray) -> bool:
    return bool(np.all(np.linalg.eigvals(A).real < 0))


@dataclass(frozen=True, eq=False)
class GainSet:
    """Controller gains and the block matrices of the delayed error dynamics."""

    n: int
    K1: np.ndarray
    K2: np.ndarray
    A1: np.ndarray
    B1: np.ndarray
    A: np.ndarray
    B: np.ndarray

    @property
    def B_bar(self) -> np.ndarray:
        """B [K2 0], the velocity-estimate coupling of the filtered loop."""
        return self.B @ np.hstack([self.K2, np.zeros((self.n, self.n))])

    @property
    def B_breve(self) -> np.ndarray:
        """B [0 K2]."""
        return self.B @ np.hstack([np.zeros((self.n, self.n)), self.K2])


def build_error_matrices(K1, K2) -> GainSet:
    K1 = as_matrix(K1, name="K1")
    n = K1.shape[0]
    try:
        K2 = as_matrix(K2, n, name="K2")
    except DimensionMismatch:
        raise DimensionMismatch(f"K1 is {n}x{n} but K2 has shape {np.shape(K2)}") from None
    check_spd(K1, "K1")
    check_spd(K2, "K2")
    I, Z = np.eye(n), np.zeros((n, n))
    A1 = np.block([[Z, I], [Z, Z]])
    B1 = np.block([[Z, Z], [-K1, -K2]])
    B = np.vstack([Z, I])
    A = A1 + B1
    if not is_hurwitz(A):
        raise NonHurwitz(f"A = A1 + B1 has eigenvalues {np.linalg.eigvals(A)}")
    return GainSet(n=n, K1=K1, K2=K2, A1=A1, B1=B1, A=A, B=B)


def solve_lyapunov(A, Q) -> np.ndarray:
    """Solve ``A^T P + P A = -Q`` by a direct Kronecker-form linear solve.

    One step of iterative refinement is applied when the first solve misses
    the residual target.
    """
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or Q.shape != A.shape:
        raise DimensionMismatch(f"A {A.shape} and Q {Q.shape} must be square and equal-sized")
    if not is_hurwitz(A):
        raise NonHurwitz("Lyapunov equation needs a Hurwitz A")
    check_spd(Q, "Q")
    k = A.shape[0]
    I = np.eye(k)
    # column-major vec: vec(A^T P) = (I kron A^T) vec P, vec(P A) = (A^T kron I) vec P
    K = np.kron(I, A.T) + np.kron(A.T, I)
    try:
        vecP = np.linalg.solve(K, -Q.reshape(-1, order="F"))
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    P = vecP.reshape(k, k, order="F")
    P = 0.5 * (P + P.T)
    qn = np.linalg.norm(Q)
    R = A.T @ P + P @ A + Q
    if np.linalg.norm(R) > LYAPUNOV_RTOL * qn:
        dP = np.linalg.solve(K, -R.reshape(-1, order="F")).reshape(k, k, order="F")
        P = P + 0.5 * (dP + dP.T)
        R = A.T @ P + P @ A + Q
    if not np.all(np.isfinite(P)) or np.linalg.norm(R) > LYAPUNOV_RTOL * qn:
        raise SingularSystem(f"Lyapunov residual {np.linalg.norm(R):.3e} exceeds tolerance")
    try:
        check_spd(P, "P")
    except NotSPD as exc:
        raise SingularSystem(f"Lyapunov solution is not positive definite: {exc}") from exc
    return P


@dataclass(frozen=True, eq=False)
class StabilityParams:
    """Free scalars and weights of the delay-dependent conditions.

    ``L`` and ``sigma_win`` only enter the filtered (F-TDC) condition.
    """

    beta: float
    xi: float
    D: np.ndarray
    Q: np.ndarray
    h: float
    L: Optional[np.ndarray] = None
    sigma_win: Optional[float] = None

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not self.xi > 1:
            raise ValueError(f"xi must be > 1, got {self.xi}")
        if not self.h > 0:
            raise ValueError(f"h must be > 0, got {self.h}")
        if self.sigma_win is not None and not self.sigma_win > 0:
            raise ValueError(f"sigma_win must be > 0, got {self.sigma_win}")
        object.__setattr__(self, "D", check_spd(as_matrix(self.D, name="D"), "D"))
        object.__setattr__(self, "Q", check_spd(as_matrix(self.Q, name="Q"), "Q"))
        if self.L is not None:
            object.__setattr__(self, "L", check_spd(as_matrix(self.L, name="L"), "L"))

    @classmethod
    def default(cls, n: int, h: float, **overrides) -> "StabilityParams":
        """beta=1, xi=2, D=Q=I, L=0.1 I for a plant with ``n`` coordinates."""
        kw = dict(beta=1.0, xi=2.0, D=np.eye(2 * n), Q=np.eye(2 * n), L=0.1 * np.eye(2 * n), h=h)
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class StabilityCertificate:
    P: np.ndarray
    condition_matrix: np.ndarray
    lambda_min: float
    feasible: bool
    kind: str
    terms: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "lambda_min": self.lambda_min,
            "feasible": self.feasible,
            "P_eigenvalues": np.linalg.eigvalsh(self.P).tolist(),
        }


def _verdict(M: np.ndarray) -> tuple[float, bool]:
    lam = float(np.linalg.eigvalsh(M)[0])
    return lam, lam > FEASIBILITY_RTOL * np.linalg.norm(M, 2)


def _check_dims(gains: GainSet, params: StabilityParams) -> None:
    k = 2 * gains.n
    for name in ("D", "Q") + (("L",) if params.L is not None else ()):
        M = getattr(params, name)
        if M.shape != (k, k):
            raise DimensionMismatch(f"{name} must be {k}x{k}, got {M.shape}")


def assemble_psi(gains: GainSet, params: StabilityParams) -> StabilityCertificate:
    """Build and test the true-state TDC condition Psi > 0."""
    _check_dims(gains, params)
    P = solve_lyapunov(gains.A, params.Q)
    A1, B1, D = gains.A1, gains.B1, params.D
    Dinv = np.linalg.inv(D)
    PB1 = P @ B1
    E = params.beta * PB1 @ (A1 @ Dinv @ A1.T + B1 @ Dinv @ B1.T + Dinv) @ PB1.T
    a = params.h**2 / params.beta
    top = params.Q - E - (1 + params.xi) * a * D
    bottom = (params.xi - 1) * a * D
    Z = np.zeros_like(D)
    psi = np.block([[top, Z], [Z, bottom]])
    psi = 0.5 * (psi + psi.T)
    lam, ok = _verdict(psi)
    return StabilityCertificate(P=P, condition_matrix=psi, lambda_min=lam, feasible=ok, kind="TDC",
                                terms={"E": E})


def assemble_theta(gains: GainSet, params: StabilityParams, kernel: KernelSpec) -> StabilityCertificate:
    """Build and test the filtered-TDC condition Theta > 0.

    ``kernel`` must be the first-derivative (j = 1) kernel used for the
    velocity estimate; its square integral enters the F_bar block.

    Note: Theta can never be positive definite. Its (e, e_h) principal block
    being positive would force ``(A + B_breve)^T P + P (A + B_breve) < 0``,
    and ``A + B_breve = [[0, I], [-K1, 0]]`` has purely imaginary
    eigenvalues. The verdict is still computed faithfully.
    """
    if kernel.j != 1:
        raise KernelOrderMismatch(f"Theta needs the j=1 kernel, got j={kernel.j}")
    if params.L is None:
        raise NotSPD("L is required for the filtered condition")
    if params.sigma_win is not None and not math.isclose(params.sigma_win, kernel.sigma_win, rel_tol=1e-9):
        raise ValueError(f"params.sigma_win={params.sigma_win} differs from kernel window {kernel.sigma_win}")
    _check_dims(gains, params)
    P = solve_lyapunov(gains.A, params.Q)
    A1, B1, D, L = gains.A1, gains.B1, params.D, params.L
    Bbar, Bbrv = gains.B_bar, gains.B_breve
    Dinv = np.linalg.inv(D)
    PB1 = P @ B1
    E_bar = params.beta * PB1 @ (A1 @ Dinv @ A1.T + B1 @ Dinv @ B1.T + Dinv + Bbar @ Dinv @ Bbar.T) @ PB1.T
    sig = kernel.sigma_win
    ad2 = kernel_square_integral(kernel.Lambda, 1, sig, m=max(1000, kernel.m))
    a = params.h**2 / params.beta
    F_bar = (a * D + L) * sig * ad2
    Z = np.zeros_like(D)
    theta = np.block([
        [params.Q - E_bar - (1 + params.xi) * a * D, P @ Bbrv, P @ Bbar],
        [Bbrv.T @ P, (params.xi - 1) * a * D - F_bar, Z],
        [Bbar.T @ P, Z, L],
    ])
    theta = 0.5 * (theta + theta.T)
    lam, ok = _verdict(theta)
    return StabilityCertificate(P=P, condition_matrix=theta, lambda_min=lam, feasible=ok, kind="FTDC",
                                terms={"E_bar": E_bar, "F_bar": F_bar, "int_Ad2": ad2})


def certify(gains: GainSet, params: StabilityParams, kind: str = "TDC",
            kernel: Optional[KernelSpec] = None) -> StabilityCertificate:
    if kind == "TDC":
        return assemble_psi(gains, params)
    if kind == "FTDC":
        if kernel is None:
            raise ValueError("FTDC certificate needs a kernel")
        return assemble_theta(gains, params, kernel)
    raise ValueError(f"unknown certificate kind {kind!r}; expected one of {KINDS}")


@dataclass(frozen=True)
class DelaySearch:
    """Result of a feasibility-boundary search in the delay."""

    h_star: float
    h_lo: float
    h_hi: float
    lambda_lo: float
    lambda_hi: float
    iterations: int


def search_feasible_delay(gains: GainSet, params: StabilityParams, kind: str = "TDC",
                          kernel: Optional[KernelSpec] = None, h_lo: Optional[float] = None,
                          h_hi: Optional[float] = None, h_cap: float = 1e3,
                          rtol: float = 1e-6) -> DelaySearch:
    """Bisect the largest feasible delay between a feasible and an infeasible probe.

    ``h_lo`` defaults to ``params.h`` (one sampling interval). Without
    ``h_hi`` the upper end is found by doubling until the condition fails or
    ``h_cap`` is passed. Only the bracket endpoints are checked; the feasible
    set is not assumed to be an interval anywhere else.
    """

    def lam(h):
        return certify(gains, replace(params, h=h), kind, kernel)

    lo = params.h if h_lo is None else float(h_lo)
    c_lo = lam(lo)
    if not c_lo.feasible:
        raise NoFeasiblePoint(f"condition already fails at h_lo={lo:g} (lambda_min={c_lo.lambda_min:.3e})")
    if h_hi is None:
        hi = 2 * lo
        c_hi = lam(hi)
        while c_hi.feasible:
            lo, c_lo = hi, c_hi
            hi *= 2
            if hi > h_cap:
                raise BracketNotFound(f"condition still holds at h={lo:g}; cap {h_cap:g} reached")
            c_hi = lam(hi)
    else:
        hi = float(h_hi)
        c_hi = lam(hi)
        if c_hi.feasible:
            raise BracketNotFound(f"condition still holds at h_hi={hi:g}")
    # stop well inside the requested width so both verdicts at h*(1 -/+ rtol) hold
    it = 0
    while hi / lo - 1 > 0.1 * rtol:
        mid = math.sqrt(lo * hi)
        c_mid = lam(mid)
        if c_mid.feasible:
            lo, c_lo = mid, c_mid
        else:
            hi, c_hi = mid, c_mid
        it += 1
    return DelaySearch(h_star=math.sqrt(lo * hi), h_lo=lo, h_hi=hi,
                       lambda_lo=c_lo.lambda_min, lambda_hi=c_hi.lambda_min, iterations=it)


def max_feasible_delay(gains: GainSet, params: StabilityParams, kind: str = "TDC",
                       kernel: Optional[KernelSpec] = None, **kw) -> float:
    """Largest delay (seconds) keeping Psi (``kind="TDC"``) or Theta positive definite."""
    return search_feasible_delay(gains, params, kind, kernel, **kw).h_star


# --- inequalities behind the certificates ----------------------------------------------


def young_gap(z1, z2, beta: float, D, sign: float = 1.0) -> float:
    """beta z1' D^-1 z1 + z2' D z2 / beta - (+-2 z1' z2); nonnegative for beta > 0, D > 0."""
    z1, z2 = np.asarray(z1, dtype=float), np.asarray(z2, dtype=float)
    D = as_matrix(D, len(z1), "D")
    return float(beta * z1 @ np.linalg.solve(D, z1) + z2 @ D @ z2 / beta - 2.0 * sign * (z1 @ z2))


def jensen_gap(samples, weights, D) -> float:
    """Weighted quadrature form of int e'De - (1/h) (int e)' D (int e), with h = sum(weights).

    ``samples`` has one row per node; ``weights`` are positive quadrature
    weights (rectangle, trapezoid, ...). Nonnegative for D > 0.
    """
    e = np.atleast_2d(np.asarray(samples, dtype=float))
    w = np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise ValueError("quadrature weights must be positive")
    D = as_matrix(D, e.shape[1], "D")
    lhs = float(np.einsum("i,ij,jk,ik->", w, e, D, e))
    total = w @ e
    return lhs - float(total @ D @ total) / float(w.sum())


def double_jensen_gap(samples, w_theta, w_psi, F) -> float:
    """Double-integral analogue over a (theta, psi) grid with product weights.

    ``samples[i, j]`` is the vector at (theta_i, psi_j); the normaliser is
    ``h * sigma = sum(w_theta) * sum(w_psi)``.
    """
    v = np.asarray(samples, dtype=float)
    if v.ndim != 3:
        raise ValueError("samples must have shape (n_theta, n_psi, dim)")
    w = np.outer(np.asarray(w_theta, dtype=float), np.asarray(w_psi, dtype=float))
    return jensen_gap(v.reshape(-1, v.shape[2]), w.ravel(), F)


# --- ultimate bounds ---------------------------------------------------------


@dataclass(frozen=True)
class UubDiagnostics:
    """User-supplied constants of the ultimate-bound formulas.

    ``gamma1`` may be given directly; otherwise it is ``iota*sigma_norm/lambda_min``.
    ``Gamma`` is Gamma_1 for the TDC bound and Gamma for the TARC cases.
    ``c_bound`` is the uncertainty bound c and ``upsilon_norm`` is ||Upsilon||.
    """

    Gamma: float = 0.0
    gamma1: Optional[float] = None
    iota: float = 0.0
    sigma_norm: float = 0.0
    iota2: float = 0.0
    iota3: float = 0.0
    alpha: float = 2.0
    c_hat: float = 0.0
    c_bound: float = 0.0
    gamma_floor: float = 0.0
    upsilon_norm: float = 0.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value is not None and value < 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")


def _bound(mu: float, numerator: float, lam: float) -> float:
    return mu + math.sqrt(numerator / lam + mu * mu)


def compute_uub(diag: UubDiagnostics, cert: StabilityCertificate, case: str = "TDC") -> float:
    """Ultimate bound on the (augmented) error norm for the selected case."""
    lam = cert.lambda_min
    if not cert.feasible or lam <= 0:
        raise InfeasibleCertificate(f"ultimate bound needs lambda_min > 0, got {lam:.3e}")
    d = diag
    if case == "TDC":
        g1 = d.gamma1 if d.gamma1 is not None else d.iota * d.sigma_norm / lam
        return _bound(g1, d.Gamma, lam)
    common = d.iota3 * (d.alpha * d.c_hat + d.c_bound + d.upsilon_norm)
    if case == "TARC_i":
        mu = (d.iota2 * d.upsilon_norm + common) / lam
        return _bound(mu, d.Gamma, lam)
    if case == "TARC_ii":
        mu = (d.iota2 * (2 * d.c_bound - (d.alpha + 1) * d.c_hat + d.upsilon_norm) + common) / lam
        return _bound(mu, d.Gamma, lam)
    if case == "TARC_iii":
        mu = (d.iota2 * (d.c_bound - d.alpha * d.c_hat + d.upsilon_norm) + common) / lam
        return _bound(mu, d.Gamma + 2 * d.gamma_floor**2, lam)
    raise ValueError(f"unknown case {case!r}; expected one of {UUB_CASES}")


def reaching_time(e0_norm: float, bound: float, c0: float) -> float:
    """Upper bound on the time to enter the ultimate ball, given the decay constant c0."""
    if not c0 > 0:
        raise ValueError("c0 must be positive")
    return max(0.0, (e0_norm - bound) / c0)
