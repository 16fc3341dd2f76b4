"""Integral-kernel derivative estimation from a sliding window of positions.

The j-th derivative of a signal that is locally a polynomial of degree
``Lambda`` is recovered as a weighted integral of its recent past,

    q^(j)(t) ~= int_{-sigma}^{0} Omega_j(sigma, psi) q(t + psi) dpsi,

with the polynomial kernel ``Omega_j`` evaluated by :func:`kernel_value`.
The integral is discretised once, with composite Simpson weights over the
``m + 1`` uniformly spaced buffer samples, so each estimate is a single dot
product.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np

from .errors import (
    BufferCold,
    DegreeTooLarge,
    DimensionMismatch,
    OddSubintervals,
    OrderExceedsDegree,
    OutOfWindow,
)

MAX_DEGREE = 8


def _check_orders(Lambda: int, j: int) -> None:
    if Lambda < 0 or j < 0:
        raise ValueError(f"Lambda and j must be nonnegative, got Lambda={Lambda}, j={j}")
    if Lambda > MAX_DEGREE:
        raise DegreeTooLarge(f"Lambda={Lambda} exceeds supported maximum {MAX_DEGREE}")
    if j > Lambda:
        raise OrderExceedsDegree(f"derivative order j={j} exceeds polynomial degree Lambda={Lambda}")


def _kernel_coefficients(Lambda: int, j: int, sigma_win: float) -> np.ndarray:
    """Coefficients c_k such that Omega_j(sigma, psi) = sum_k c_k * (-psi/sigma)**k."""
    pre = factorial(Lambda + 1 + j) / (sigma_win ** (j + 1) * factorial(j) * factorial(Lambda - j))
    k = np.arange(Lambda + 1)
    terms = np.array(
        [
            (-1) ** kk * factorial(Lambda + 1 + kk)
            / ((j + kk + 1) * factorial(Lambda - kk) * factorial(kk) ** 2)
            for kk in k
        ],
        dtype=float,
    )
    return pre * terms


def kernel_value(Lambda: int, j: int, sigma_win: float, psi) -> float | np.ndarray:
    """Evaluate the derivative kernel Omega_j(sigma_win, psi).

    ``psi`` may be a scalar or an array; every entry must lie in
    ``[-sigma_win, 0]``.
    """
    _check_orders(Lambda, j)
    if not sigma_win > 0:
        raise ValueError(f"sigma_win must be positive, got {sigma_win}")
    psi_arr = np.asarray(psi, dtype=float)
    tol = 1e-12 * sigma_win
    if np.any(psi_arr < -sigma_win - tol) or np.any(psi_arr > tol):
        raise OutOfWindow(f"psi must lie in [-{sigma_win}, 0]")
    x = -psi_arr / sigma_win
    # Horner on the ascending coefficient list
    val = np.polynomial.polynomial.polyval(x, _kernel_coefficients(Lambda, j, sigma_win))
    return float(val) if np.ndim(val) == 0 else val


def simpson_coefficients(m: int, step: float) -> np.ndarray:
    """Composite Simpson weights for ``m`` (even) uniform subintervals."""
    if m < 2:
        raise ValueError(f"need at least 2 subintervals, got m={m}")
    if m % 2:
        raise OddSubintervals(f"composite Simpson needs an even interval count, got m={m}")
    c = np.ones(m + 1)
    c[1:-1:2] = 4.0
    c[2:-1:2] = 2.0
    return c * (step / 3.0)


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """A discretised derivative kernel.

    ``weights[i]`` multiplies the sample at ``psi_i = -sigma_win + i*sigma_win/m``,
    so index 0 is the oldest sample of the window and index ``m`` the newest.
    """

    Lambda: int
    j: int
    sigma_win: float
    m: int
    weights: np.ndarray = field(repr=False)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(-self.sigma_win, 0.0, self.m + 1)

    @property
    def dt(self) -> float:
        return self.sigma_win / self.m


def build_weights(Lambda: int, j: int, sigma_win: float, m: int) -> KernelSpec:
    """Precompute Simpson-times-kernel weights for an ``m + 1`` sample window."""
    _check_orders(Lambda, j)
    simpson = simpson_coefficients(m, sigma_win / m)
    nodes = np.linspace(-sigma_win, 0.0, m + 1)
    weights = simpson * kernel_value(Lambda, j, sigma_win, nodes)
    weights.setflags(write=False)
    return KernelSpec(Lambda=Lambda, j=j, sigma_win=float(sigma_win), m=int(m), weights=weights)


def kernel_square_integral(Lambda: int, j: int, sigma_win: float, m: int = 1000) -> float:
    """int_{-sigma}^{0} Omega_j(sigma, psi)**2 dpsi with the same Simpson rule.

    The integrand is a polynomial of degree ``2*Lambda``; with the default
    ``m`` the quadrature error is far below double precision for Lambda <= 8.
    """
    nodes = np.linspace(-sigma_win, 0.0, m + 1)
    om = kernel_value(Lambda, j, sigma_win, nodes)
    return float(simpson_coefficients(m, sigma_win / m) @ (om * om))


# --- history -----------------------------------------------------------------


_SCALAR_FIELDS = ("s_norm",)
_VECTOR_FIELDS = ("q", "tau", "u", "qdd")


class HistoryBuffer:
    """Fixed-capacity ring of uniformly sampled controller data.

    Each slot holds ``t``, measured position ``q``, applied torque ``tau``,
    auxiliary input ``u``, the switching-surface norm ``s_norm`` and,
    when the caller has it, the plant acceleration ``qdd``. Samples are
    pushed once per control period (position first) and the remaining
    fields of the newest slot are filled by :meth:`set_latest`.

    Lookups are by integer lag; ``lag=0`` is the newest sample. Nothing is
    ever interpolated.
    """

    def __init__(self, n: int, capacity: int, dt: float):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.n = int(n)
        self.capacity = int(capacity)
        self.dt = float(dt)
        self._t = np.full(self.capacity, np.nan)
        self._vec = {name: np.full((self.capacity, self.n), np.nan) for name in _VECTOR_FIELDS}
        self._scal = {name: np.full(self.capacity, np.nan) for name in _SCALAR_FIELDS}
        self._count = 0
        self._head = -1

    def __len__(self) -> int:
        return min(self._count, self.capacity)

    @property
    def count(self) -> int:
        """Total number of samples ever pushed."""
        return self._count

    def push(self, t: float, q) -> None:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n,):
            raise DimensionMismatch(f"expected q of shape ({self.n},), got {q.shape}")
        if self._count:
            step = t - self._t[self._head]
            if abs(step - self.dt) > 1e-9 * self.dt:
                raise ValueError(f"timestamps must advance by dt={self.dt}, got step {step}")
        self._head = (self._head + 1) % self.capacity
        self._t[self._head] = t
        self._vec["q"][self._head] = q
        for name in ("tau", "u", "qdd"):
            self._vec[name][self._head] = np.nan
        self._scal["s_norm"][self._head] = np.nan
        self._count += 1

    def set_latest(self, **fields) -> None:
        if not self._count:
            raise BufferCold("no sample to update")
        for name, value in fields.items():
            if name in self._vec:
                self._vec[name][self._head] = value
            elif name in self._scal:
                self._scal[name][self._head] = value
            else:
                raise KeyError(name)

    def is_warm(self, lag: int, window: int = 0) -> bool:
        """True when samples at lags ``lag .. lag + window`` are all stored."""
        return lag + window < len(self)

    def _index(self, lag: int) -> int:
        if lag < 0:
            raise ValueError("lag must be nonnegative")
        if not self.is_warm(lag):
            raise BufferCold(f"lag {lag} needs {lag + 1} samples, have {len(self)}")
        return (self._head - lag) % self.capacity

    def time(self, lag: int = 0) -> float:
        return float(self._t[self._index(lag)])

    def get(self, name: str, lag: int = 0):
        i = self._index(lag)
        if name in self._vec:
            return self._vec[name][i].copy()
        if name in self._scal:
            return float(self._scal[name][i])
        if name == "t":
            return float(self._t[i])
        raise KeyError(name)

    def window(self, lag: int, m: int, name: str = "q") -> np.ndarray:
        """Samples at lags ``lag + m .. lag`` in chronological order, shape (m+1, n)."""
        if not self.is_warm(lag, m):
            raise BufferCold(f"window of {m + 1} samples at lag {lag} needs {lag + m + 1}, have {len(self)}")
        idx = (self._head - lag - np.arange(m, -1, -1)) % self.capacity
        return self._vec[name][idx]


def estimate(buffer: HistoryBuffer, kernel: KernelSpec, at_lag: int = 0) -> np.ndarray:
    """Kernel estimate of the ``kernel.j``-th derivative of ``q`` at ``t - at_lag*dt``."""
    if abs(kernel.sigma_win - kernel.m * buffer.dt) > 1e-9 * kernel.sigma_win:
        raise ValueError(
            f"kernel window {kernel.sigma_win} s is not m*dt = {kernel.m}*{buffer.dt}"
        )
    return kernel.weights @ buffer.window(at_lag, kernel.m)


def estimate_series(q: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    """Apply ``kernel`` causally to an evenly sampled array of positions.

    Returns an array aligned with ``q``; the first ``kernel.m`` rows, which
    lack a full window, are NaN.
    """
    q = np.asarray(q, dtype=float)
    squeeze = q.ndim == 1
    if squeeze:
        q = q[:, None]
    out = np.full_like(q, np.nan)
    m = kernel.m
    if len(q) > m:
        view = np.lib.stride_tricks.sliding_window_view(q, m + 1, axis=0)  # (N-m, n, m+1)
        out[m:] = view @ kernel.weights
    return out[:, 0] if squeeze else out
