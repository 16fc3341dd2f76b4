"""Small dense helpers with closed forms for the 2x2 case used in the inner loop."""

from __future__ import annotations

import math

import numpy as np


def condition_number(M: np.ndarray) -> float:
    """2-norm condition number; closed form for symmetric 2x2 matrices."""
    if M.shape == (2, 2) and M[0, 1] == M[1, 0]:
        a, b, d = M[0, 0], M[0, 1], M[1, 1]
        mid = 0.5 * (a + d)
        rad = math.hypot(0.5 * (a - d), b)
        lo, hi = abs(mid - rad), abs(mid + rad)
        big, small = max(lo, hi), min(lo, hi)
        return math.inf if small == 0 else big / small
    return float(np.linalg.cond(M))


def solve(M: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve M x = b; Cramer's rule for 2x2 systems."""
    if M.shape == (2, 2) and b.shape == (2,):
        det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
        if det == 0:
            raise np.linalg.LinAlgError("singular matrix")
        return np.array([(M[1, 1] * b[0] - M[0, 1] * b[1]) / det,
                         (M[0, 0] * b[1] - M[1, 0] * b[0]) / det])
    return np.linalg.solve(M, b)
