import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_spd
from tarc_lab.errors import (
    BracketNotFound,
    DimensionMismatch,
    InfeasibleCertificate,
    KernelOrderMismatch,
    NoFeasiblePoint,
    NonHurwitz,
    NotSPD,
)
from tarc_lab.estimator import build_weights
from tarc_lab.stability import (
    StabilityParams,
    UubDiagnostics,
    assemble_psi,
    assemble_theta,
    build_error_matrices,
    certify,
    compute_uub,
    double_jensen_gap,
    jensen_gap,
    max_feasible_delay,
    reaching_time,
    search_feasible_delay,
    solve_lyapunov,
    young_gap,
)


def scalar_params(h, beta=1.0):
    return StabilityParams(beta=beta, xi=2.0, D=np.eye(2), Q=np.eye(2), h=h, L=0.1 * np.eye(2))


# --- error matrices ------------------------------------------------------------------


def test_scalar_error_matrices():
    g = build_error_matrices(4.0, 4.0)
    np.testing.assert_array_equal(g.A1, [[0, 1], [0, 0]])
    np.testing.assert_array_equal(g.B1, [[0, 0], [-4, -4]])
    np.testing.assert_array_equal(g.B, [[0], [1]])
    np.testing.assert_array_equal(g.A, [[0, 1], [-4, -4]])
    np.testing.assert_allclose(np.linalg.eigvals(g.A), [-2, -2], atol=1e-6)


def test_two_dof_eigenvalues_are_per_joint_roots():
    g = build_error_matrices(np.diag([100.0, 100.0]), np.diag([20.0, 20.0]))
    # s^2 + 20 s + 100 = (s + 10)^2 for each joint
    np.testing.assert_allclose(np.linalg.eigvals(g.A).real, -10.0, atol=1e-5)


def test_gain_validation():
    with pytest.raises(NotSPD):
        build_error_matrices(-1.0, 1.0)
    with pytest.raises(NotSPD):
        build_error_matrices(np.array([[1.0, 2.0], [2.0, 1.0]]), np.eye(2))
    with pytest.raises(DimensionMismatch):
        build_error_matrices(np.eye(2), np.eye(3))


# --- Lyapunov ----------------------------------------------------------------------------


def random_hurwitz(rng, k):
    A = rng.normal(size=(k, k))
    shift = max(0.0, np.linalg.eigvals(A).real.max()) + rng.uniform(0.1, 2.0)
    return A - shift * np.eye(k)


def test_lyapunov_matches_scipy(rng):
    for k in (1, 2, 4, 6, 8):
        A = random_hurwitz(rng, k)
        Q = random_spd(rng, k)
        P = solve_lyapunov(A, Q)
        np.testing.assert_allclose(P, scipy.linalg.solve_continuous_lyapunov(A.T, -Q), rtol=1e-8, atol=1e-10)


def test_lyapunov_rejects_non_hurwitz():
    with pytest.raises(NonHurwitz):
        solve_lyapunov(np.array([[0.0, 1.0], [-1.0, 0.0]]), np.eye(2))
    with pytest.raises(NonHurwitz):
        solve_lyapunov(np.eye(2), np.eye(2))


def test_lyapunov_scalar_closed_form():
    # 2 a p = -q
    assert solve_lyapunov(np.array([[-3.0]]), np.array([[2.0]]))[0, 0] == pytest.approx(1 / 3)


# --- Psi ---------------------------------------------------------------------------------


def psi_oracle(K1, K2, Q, D, beta, xi, h):
    # straight transcription of the block formula, independent of the package assembly
    n = K1.shape[0]
    I, Z = np.eye(n), np.zeros((n, n))
    A1 = np.block([[Z, I], [Z, Z]])
    B1 = np.block([[Z, Z], [-K1, -K2]])
    P = scipy.linalg.solve_continuous_lyapunov((A1 + B1).T, -Q)
    Di = np.linalg.inv(D)
    E = beta * P @ B1 @ (A1 @ Di @ A1.T + B1 @ Di @ B1.T + Di) @ B1.T @ P
    top = Q - E - (1 + xi) * h * h / beta * D
    bot = (xi - 1) * h * h / beta * D
    return np.block([[top, np.zeros_like(D)], [np.zeros_like(D), bot]])


def test_psi_matches_oracle(rng):
    for _ in range(20):
        n = int(rng.integers(1, 4))
        K1, K2 = random_spd(rng, n, 0.5), random_spd(rng, n, 0.5)
        Q, D = random_spd(rng, 2 * n), random_spd(rng, 2 * n)
        beta, xi, h = rng.uniform(1e-3, 2), rng.uniform(1.1, 4), rng.uniform(1e-4, 1e-1)
        cert = assemble_psi(build_error_matrices(K1, K2), StabilityParams(beta=beta, xi=xi, D=D, Q=Q, h=h))
        want = psi_oracle(K1, K2, Q, D, beta, xi, h)
        np.testing.assert_allclose(cert.condition_matrix, want, rtol=1e-8, atol=1e-9 * np.abs(want).max())
        assert cert.lambda_min == pytest.approx(np.linalg.eigvalsh(want)[0], rel=1e-6, abs=1e-9)


def test_scalar_benchmark_verdicts():
    g = build_error_matrices(4.0, 4.0)
    # unit beta leaves Q - E indefinite for every delay
    c = assemble_psi(g, scalar_params(1e-4))
    assert not c.feasible and c.lambda_min < -20
    # a small beta shrinks E, making short delays feasible
    assert assemble_psi(g, scalar_params(1e-4, beta=0.01)).feasible
    assert not assemble_psi(g, scalar_params(10.0, beta=0.01)).feasible


def test_psi_eigenvalue_nonincreasing_in_delay():
    g = build_error_matrices(4.0, 4.0)
    hs = np.geomspace(1e-4, 10, 50)
    lam = [assemble_psi(g, scalar_params(h)).lambda_min for h in hs]
    assert np.all(np.diff(lam) <= 1e-12)


def test_psi_dimension_checks():
    g = build_error_matrices(np.eye(2), np.eye(2))
    with pytest.raises(DimensionMismatch):
        assemble_psi(g, StabilityParams(beta=1, xi=2, D=np.eye(2), Q=np.eye(2), h=0.01))


def test_params_validation():
    with pytest.raises(ValueError):
        StabilityParams(beta=0, xi=2, D=1.0, Q=1.0, h=0.1)
    with pytest.raises(ValueError):
        StabilityParams(beta=1, xi=1.0, D=1.0, Q=1.0, h=0.1)
    with pytest.raises(NotSPD):
        StabilityParams(beta=1, xi=2, D=-1.0, Q=1.0, h=0.1)


# --- Theta -------------------------------------------------------------------------------


def theta_oracle(K1, K2, Q, D, L, beta, xi, h, sig, int_ad2):
    n = K1.shape[0]
    I, Z = np.eye(n), np.zeros((n, n))
    A1 = np.block([[Z, I], [Z, Z]])
    B1 = np.block([[Z, Z], [-K1, -K2]])
    B = np.vstack([Z, I])
    Bbar = B @ np.hstack([K2, Z])
    Bbrv = B @ np.hstack([Z, K2])
    P = scipy.linalg.solve_continuous_lyapunov((A1 + B1).T, -Q)
    Di = np.linalg.inv(D)
    Eb = beta * P @ B1 @ (A1 @ Di @ A1.T + B1 @ Di @ B1.T + Di + Bbar @ Di @ Bbar.T) @ B1.T @ P
    a = h * h / beta
    F = (a * D + L) * sig * int_ad2
    Z2 = np.zeros_like(D)
    return np.block([
        [Q - Eb - (1 + xi) * a * D, P @ Bbrv, P @ Bbar],
        [Bbrv.T @ P, (xi - 1) * a * D - F, Z2],
        [Bbar.T @ P, Z2, L],
    ])


def test_theta_matches_oracle(rng):
    for _ in range(10):
        n = int(rng.integers(1, 3))
        K1, K2 = random_spd(rng, n, 0.5), random_spd(rng, n, 0.5)
        Q, D, L = (random_spd(rng, 2 * n) for _ in range(3))
        beta, xi, h = rng.uniform(1e-3, 2), rng.uniform(1.1, 4), 1e-3
        kern = build_weights(2, 1, 0.02, 20)
        params = StabilityParams(beta=beta, xi=xi, D=D, Q=Q, L=L, h=h, sigma_win=0.02)
        cert = assemble_theta(build_error_matrices(K1, K2), params, kern)
        # 192 / sigma^3: square integral of the degree-2 polynomial with moments (0, 1, 0), solved symbolically
        want = theta_oracle(K1, K2, Q, D, L, beta, xi, h, 0.02, 192 / 0.02**3)
        np.testing.assert_allclose(cert.condition_matrix, want, rtol=1e-7, atol=1e-9 * np.abs(want).max())


def test_theta_f_bar_shrinks_with_window():
    g = build_error_matrices(4.0, 4.0)
    fb = []
    for sig in (0.01, 0.02, 0.04):
        kern = build_weights(1, 1, sig, 20)
        c = assemble_theta(g, scalar_params(1e-3), kern)
        fb.append(c.terms["F_bar"][0, 0])
    # sigma * 12 / sigma^3 for the linear kernel
    assert fb[0] / fb[1] == pytest.approx(4.0, rel=1e-9)
    assert fb[1] / fb[2] == pytest.approx(4.0, rel=1e-9)


def test_theta_needs_first_derivative_kernel():
    g = build_error_matrices(4.0, 4.0)
    with pytest.raises(KernelOrderMismatch):
        assemble_theta(g, scalar_params(1e-3), build_weights(2, 2, 0.02, 20))
    with pytest.raises(ValueError):
        certify(g, scalar_params(1e-3), "FTDC")
    with pytest.raises(ValueError):
        certify(g, scalar_params(1e-3), "XYZ")


@settings(max_examples=50, deadline=None)
@given(
    k1=st.floats(0.1, 1e3), k2=st.floats(0.1, 1e3), beta=st.floats(1e-8, 10),
    xi=st.floats(1.01, 10), h=st.floats(1e-6, 1.0), lam=st.integers(1, 4),
)
def test_theta_never_positive_definite(k1, k2, beta, xi, h, lam):
    # test vector (e, -e) in the first two blocks pins e'((A + B_breve)'P + P(A + B_breve))e,
    # and A + B_breve has purely imaginary eigenvalues
    g = build_error_matrices(k1, k2)
    p = StabilityParams(beta=beta, xi=xi, D=np.eye(2), Q=np.eye(2), h=h, L=1e-6 * np.eye(2))
    assert not assemble_theta(g, p, build_weights(lam, 1, 0.02, 20)).feasible


# --- delay search ------------------------------------------------------------------------


def test_max_delay_matches_grid():
    g = build_error_matrices(4.0, 4.0)
    p = scalar_params(1e-4, beta=0.01)
    h_star = max_feasible_delay(g, p)
    grid = np.linspace(1e-4, 0.2, 2001)
    feas = np.array([assemble_psi(g, scalar_params(h, beta=0.01)).feasible for h in grid])
    last = grid[feas].max()
    assert last <= h_star < last + (grid[1] - grid[0])


def test_search_endpoint_verdicts():
    g = build_error_matrices(4.0, 4.0)
    p = scalar_params(1e-4, beta=0.01)
    res = search_feasible_delay(g, p, rtol=1e-6)
    assert res.lambda_lo > 0 >= res.lambda_hi
    assert assemble_psi(g, scalar_params(res.h_star * (1 - 1e-6), beta=0.01)).feasible
    assert not assemble_psi(g, scalar_params(res.h_star * (1 + 1e-6), beta=0.01)).feasible


def test_search_errors():
    g = build_error_matrices(4.0, 4.0)
    with pytest.raises(NoFeasiblePoint):
        search_feasible_delay(g, scalar_params(1e-4))
    with pytest.raises(BracketNotFound):
        search_feasible_delay(g, scalar_params(1e-4, beta=0.01), h_hi=1e-3)


# --- inequalities ------------------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 6), beta=st.floats(1e-4, 1e4), sign=st.sampled_from([1.0, -1.0]))
def test_young_gap_nonnegative(seed, k, beta, sign):
    rng = np.random.default_rng(seed)
    z1, z2, D = rng.normal(size=k), rng.normal(size=k), random_spd(rng, k)
    gap = young_gap(z1, z2, beta, D, sign)
    scale = beta * z1 @ np.linalg.solve(D, z1) + z2 @ D @ z2 / beta
    assert gap >= -1e-10 * scale


def test_young_gap_equality_case():
    # equality at z2 = beta D^-1 z1
    D = np.diag([2.0, 0.5])
    z1 = np.array([1.0, -3.0])
    assert young_gap(z1, 0.3 * np.linalg.solve(D, z1), 0.3, D) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), nodes=st.integers(2, 40), k=st.integers(1, 4))
def test_jensen_gap_nonnegative(seed, nodes, k):
    rng = np.random.default_rng(seed)
    e, D = rng.normal(size=(nodes, k)), random_spd(rng, k)
    w = rng.uniform(0.01, 1.0, size=nodes)
    assert jensen_gap(e, w, D) >= -1e-10 * np.einsum("i,ij,jk,ik->", w, e, D, e)


def test_jensen_gap_zero_for_constant_signal():
    e = np.tile([1.0, 2.0], (7, 1))
    assert jensen_gap(e, np.full(7, 0.1), np.eye(2)) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        jensen_gap(e, np.zeros(7), np.eye(2))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), nt=st.integers(2, 10), npsi=st.integers(2, 10))
def test_double_jensen_gap_nonnegative(seed, nt, npsi):
    rng = np.random.default_rng(seed)
    v, F = rng.normal(size=(nt, npsi, 2)), random_spd(rng, 2)
    gap = double_jensen_gap(v, rng.uniform(0.01, 1, nt), rng.uniform(0.01, 1, npsi), F)
    assert gap >= -1e-10 * np.abs(v).sum() ** 2 * np.linalg.norm(F)


# --- ultimate bounds --------------------------------------------------------------------


def feasible_cert():
    return assemble_psi(build_error_matrices(4.0, 4.0), scalar_params(1e-4, beta=0.01))


def test_uub_tdc_formula():
    cert = feasible_cert()
    lam = cert.lambda_min
    d = UubDiagnostics(Gamma=0.5, iota=2.0, sigma_norm=0.3)
    g1 = 2.0 * 0.3 / lam
    assert compute_uub(d, cert, "TDC") == pytest.approx(g1 + math.sqrt(0.5 / lam + g1 * g1))


def test_uub_tarc_cases():
    cert = feasible_cert()
    lam = cert.lambda_min
    d = UubDiagnostics(Gamma=0.2, iota2=0.5, iota3=0.25, alpha=2.0, c_hat=0.1, c_bound=1.0,
                       gamma_floor=0.3, upsilon_norm=0.4)
    common = 0.25 * (0.2 + 1.0 + 0.4)
    cases = {
        "TARC_i": ((0.5 * 0.4 + common) / lam, 0.2),
        "TARC_ii": ((0.5 * (2.0 - 0.3 + 0.4) + common) / lam, 0.2),
        "TARC_iii": ((0.5 * (1.0 - 0.2 + 0.4) + common) / lam, 0.2 + 2 * 0.09),
    }
    for case, (mu, gam) in cases.items():
        assert compute_uub(d, cert, case) == pytest.approx(mu + math.sqrt(gam / lam + mu * mu))


def test_uub_needs_feasible_certificate():
    cert = assemble_psi(build_error_matrices(4.0, 4.0), scalar_params(1e-4))
    with pytest.raises(InfeasibleCertificate):
        compute_uub(UubDiagnostics(), cert)
    with pytest.raises(ValueError):
        UubDiagnostics(Gamma=-1.0)
    with pytest.raises(ValueError):
        compute_uub(UubDiagnostics(), feasible_cert(), "nope")


def test_reaching_time():
    assert reaching_time(2.0, 0.5, 3.0) == pytest.approx(0.5)
    assert reaching_time(0.1, 0.5, 3.0) == 0.0
    with pytest.raises(ValueError):
        reaching_time(1.0, 0.5, 0.0)
