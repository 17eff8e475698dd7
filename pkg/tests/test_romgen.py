import numpy as np
import pytest
import scipy.linalg as la
import scipy.sparse as sp
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from sfrom.errors import DeflationRequiredError, SingularShiftError, StieltjesnessError
from sfrom.fine_grid import GridMedium, assemble
from sfrom.partition import SubdomainSplit
from sfrom.romgen import (
    BoundaryBasis,
    block_lanczos,
    boundary_gramian,
    build_bases,
    build_rom,
    build_roms,
    check_skeleton_support,
    default_shift,
    evaluate_sfraction,
    exact_transfer,
    identity_bases,
    partial_fraction_transfer,
    project,
    project_io,
    rational_krylov,
    resolvent_transfer,
    sfraction_coeffs,
    truncate_basis,
)


def random_cell(rng, n):
    """1D cell with variable coefficients, Dirichlet on the left, free boundary node on the right."""
    w = 0.5 + rng.random(n)
    A = np.zeros((n, n))
    for k in range(n):
        A[k, k] -= w[k]
        if k + 1 < n:
            A[k, k] -= w[k + 1]
            A[k, k + 1] = A[k + 1, k] = w[k + 1]
    A[n - 1, n - 1] = -w[n - 1]
    return SubdomainSplit(sp.csr_matrix(A), 0.5 + rng.random(n), np.arange(n))


def rel(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


def random_complex(rng, k, scale=10.0):
    return scale * (rng.standard_normal(k) + 1j * np.abs(rng.standard_normal(k)))


# ---- exact transfer ---------------------------------------------------------

def test_exact_transfer_scalar():
    cell = SubdomainSplit(sp.csr_matrix([[-2.0]]), np.array([1.0]), np.array([0]))
    assert exact_transfer(cell, [0], 3.0)[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_exact_transfer_matches_eigen_sum(rng):
    cell = random_cell(rng, 8)
    gam = [0, 7]
    Bh = np.diag(1 / np.sqrt(cell.B))
    lam, Y = np.linalg.eigh(Bh @ cell.A.toarray() @ Bh)
    Z = Bh @ Y
    for z in random_complex(rng, 5):
        F = exact_transfer(cell, gam, z)
        oracle = sum(np.outer(Z[gam, l], Z[gam, l]) / (lam[l] + z) for l in range(8))
        assert rel(F, oracle) <= 1e-12
        assert np.array_equal(F, F.T)


def test_exact_transfer_at_eigenvalue():
    cell = SubdomainSplit(sp.csr_matrix([[-2.0]]), np.array([1.0]), np.array([0]))
    with pytest.raises(SingularShiftError):
        exact_transfer(cell, [0], 2.0)


# ---- Gramian and basis -------------------------------------------------------

def test_gramian_limits():
    pen = assemble(GridMedium.homogeneous((6, 6), 1.0))
    nodes = [0, 1, 2]
    lam = np.linalg.eigvalsh(-pen.A.toarray())
    assert np.allclose(boundary_gramian(pen.A, pen.B, nodes, np.sqrt(lam.max()) * 1.01), np.eye(3), atol=1e-13)
    assert np.array_equal(boundary_gramian(pen.A, pen.B, nodes, 0.99 * np.sqrt(lam.min())), np.zeros((3, 3)))


def test_gramian_mid_band_matches_eigen_sum(rng):
    pen = assemble(GridMedium((14, 14), 0.1, 1.0, 0.5 + rng.random((14, 14))))
    nodes = np.arange(0, pen.N, 7)
    wmax = 30.0
    D = np.diag(1 / np.sqrt(pen.B))
    lam, Y = np.linalg.eigh(D @ (-pen.A.toarray()) @ D)
    Z = D @ Y
    oracle = sum(np.outer(Z[nodes, l], Z[nodes, l]) for l in range(pen.N) if lam[l] <= wmax**2)
    G = boundary_gramian(pen.A, pen.B, nodes, wmax)
    assert 0 < (lam <= wmax**2).sum() < pen.N
    assert np.abs(G - oracle).max() <= 1e-12


def test_truncate_basis_examples(rng):
    assert np.array_equal(truncate_basis(np.eye(4), 0.5), np.eye(4))
    v = rng.standard_normal(5)
    S = truncate_basis(np.outer(v, v), 1e-12)
    assert S.shape == (5, 1)
    assert np.allclose(S[:, 0], v / np.linalg.norm(v) * np.sign(v[np.argmax(np.abs(v))]), atol=1e-14)
    assert truncate_basis(np.zeros((3, 3))).shape == (3, 0)


def test_truncate_basis_orders_and_signs(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    w = np.array([5.0, 1e-1, 1e-3, 1e-5, 1e-8, 1e-12])
    G = (Q * w) @ Q.T
    S, kept, tail = truncate_basis(G, rel_epsilon=1e-6, full_output=True)
    assert S.shape[1] == 4
    assert np.allclose(kept, w[:4], rtol=1e-6)
    assert tail == pytest.approx(w[4:].sum(), rel=1e-3, abs=1e-15)
    assert np.allclose(S.T @ S, np.eye(4), atol=1e-12)
    assert np.all(S[np.argmax(np.abs(S), axis=0), np.arange(4)] > 0)
    assert truncate_basis(G, rel_epsilon=1e-6, max_size=2).shape[1] == 2


def test_projection_residual_decreases_with_epsilon(square25):
    # in-band part of the cell transfer; the out-of-band near field is not a Gramian quantity
    _, _, _, pen, P, S = square25
    wmax = 12 * np.pi
    i = 0
    lam, Z = la.eigh(-S[i].A.toarray(), np.diag(S[i].B))
    band = lam <= wmax**2
    errors = []
    for eps in (1e-1, 1e-3, 1e-6):
        basis = build_bases(pen, P, wmax, rel_epsilon=eps)
        gamma, Si, _ = basis.cell_layout(P, i)
        V = Z[S[i].local_index(gamma)][:, band]
        proj = Si @ Si.T
        worst = 0.0
        for f in (0.2, 0.4, 0.6, 0.8, 1.0):
            z = (f * wmax) ** 2 * (1 + 0.05j)
            F = (V / (z - lam[band])) @ V.T
            worst = max(worst, rel(proj @ F @ proj, F))
        errors.append(worst)
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] <= 1e-4


def test_shared_interface_basis_is_orthonormal(square25):
    _, _, _, pen, P, _ = square25
    basis = build_bases(pen, P, 2 * np.pi)
    for key, Sij in basis.S.items():
        assert np.abs(Sij.T @ Sij - np.eye(Sij.shape[1])).max() <= 1e-12
    # both cells of an interface see the same block
    g0, S0, sl0 = basis.cell_layout(P, 0)
    g1, S1, sl1 = basis.cell_layout(P, 1)
    key = (0, 1)
    assert np.array_equal(S0[:, sl0[key]][np.isin(g0, P.interfaces[key])], S1[:, sl1[key]][np.isin(g1, P.interfaces[key])])


# ---- Krylov, projection, Lanczos --------------------------------------------

def test_krylov_m1_spans_boundary_indicators(rng):
    cell = random_cell(rng, 10)
    V = rational_krylov(cell, [9], np.eye(1), -1.0, 1)
    assert np.allclose(np.abs(V[:, 0]), np.eye(10)[9], atol=1e-15)


def test_krylov_orthonormal(rng):
    for n in (12, 20, 30):
        cell = random_cell(rng, n)
        V = rational_krylov(cell, [0, n - 1], np.eye(2), -0.3, 5)
        assert V.shape == (n, 10)
        assert np.abs(V.T @ V - np.eye(10)).max() <= 1e-12


def test_full_space_projection_is_exact(rng):
    cell = random_cell(rng, 8)
    V = rational_krylov(cell, [7], np.eye(1), -0.5, 8)
    Am, Bm, Sm = project(cell, V, [7], np.eye(1))
    T, R, _ = block_lanczos(Am, Bm, Sm)
    ladders = sfraction_coeffs(T, R[:1])
    for z in random_complex(rng, 5):
        assert rel(evaluate_sfraction(ladders, z), exact_transfer(cell, [7], z)) <= 1e-9


def test_project_identity_is_exact(rng):
    cell = random_cell(rng, 6)
    Am, Bm, Sm = project(cell, np.eye(6), [5], np.eye(1))
    assert np.array_equal(Am, cell.A.toarray())
    assert np.array_equal(np.diag(Bm), cell.B)


def test_krylov_rank_deficiency_detected(rng):
    cell = random_cell(rng, 4)
    with pytest.raises(DeflationRequiredError):
        rational_krylov(cell, [3], np.eye(1), -0.5, 6)


def test_krylov_rejects_nonnegative_shift(rng):
    with pytest.raises(ValueError):
        rational_krylov(random_cell(rng, 5), [4], np.eye(1), 0.0, 2)


def test_projected_eigenvalues_negative(square25):
    _, _, _, pen, P, S = square25
    basis = build_bases(pen, P, 2 * np.pi)
    rom = build_rom(S[0], P, 0, basis, 3)
    theta = la.eigh(rom.Am, rom.Bm, eigvals_only=True)
    assert theta.max() < 0
    assert np.linalg.eigvalsh(rom.Bm).min() > 0


def test_lanczos_scalar():
    T, R, _ = block_lanczos(np.array([[-2.0]]), np.array([[1.0]]), np.array([[1.0]]))
    assert T[0, 0] == pytest.approx(-2.0) and R[0, 0] == pytest.approx(1.0)


def test_lanczos_resolvent_and_b_orthonormality(rng):
    for K, m in ((1, 2), (2, 3), (3, 4)):
        n = K * m
        X = rng.standard_normal((n, n))
        Am = -(X @ X.T) - 0.1 * np.eye(n)
        Y = rng.standard_normal((n, n))
        Bm = Y @ Y.T + n * np.eye(n)
        Sm = rng.standard_normal((n, K))
        T, R, Q = block_lanczos(Am, Bm, Sm)
        assert np.abs(Q.T @ Bm @ Q - np.eye(n)).max() <= 1e-10
        assert np.array_equal(R[K:], np.zeros((n - K, K)))
        for z in random_complex(rng, 10):
            assert rel(resolvent_transfer(T, R, z), partial_fraction_transfer(Am, Bm, Sm, z)) <= 1e-10


# ---- S-fraction --------------------------------------------------------------

def test_sfraction_scalar_m1(rng):
    alpha, beta = -3.0, 1.7
    Lhat, L = sfraction_coeffs(np.array([[alpha]]), np.array([[beta]]))
    for z in random_complex(rng, 10):
        assert evaluate_sfraction((Lhat, L), z)[0, 0] == pytest.approx(beta**2 / (alpha + z), rel=1e-13)


def test_evaluate_sfraction_scalar_example():
    assert evaluate_sfraction((np.array([[[1.0]]]), np.array([[[2.0]]])), 3.0)[0, 0] == 1.0


def test_sfraction_asymptote(square25):
    _, _, _, pen, P, S = square25
    rom = build_rom(S[0], P, 0, build_bases(pen, P, 2 * np.pi), 3)
    z = 1e12
    assert rel(z * evaluate_sfraction(rom, z), rom.Lhat[0]) <= 1e-6


def test_sfraction_optimal_grid_1d(line17):
    pen, P, S = line17
    h = pen.h
    rom = build_rom(S[0], P, 0, identity_bases(P), S[0].N, shift=-1.0)
    # the full-order ladder is the grid itself: unit primary steps, half mass at the boundary
    assert np.allclose(rom.L[:, 0, 0] * h**2, 1.0, rtol=1e-8)
    assert rom.Lhat[0, 0, 0] == pytest.approx(2.0, rel=1e-10)
    assert np.allclose(rom.Lhat[1:, 0, 0], 1.0, rtol=1e-8)


def direct_sfraction(theta, c):
    """Exact S-fraction of f(z) = sum c_l / (theta_l + z) by continued division at infinity."""
    z = sympy.symbols("z")
    D = sympy.cancel(1 / sum(cl / (tl + z) for tl, cl in zip(theta, c)))
    Lhat, L = [], []
    L_prev = 0
    for _ in range(len(theta)):
        lh = 1 / sympy.limit(D / z, z, sympy.oo)
        r = sympy.cancel(D - z / lh + L_prev)
        lk = -sympy.limit(r, z, sympy.oo)
        Lhat.append(lh)
        L.append(lk)
        if sympy.simplify(r + lk) != 0:
            D = sympy.cancel(-lk**2 / (r + lk))
        L_prev = lk
    return Lhat, L


def test_sfraction_matches_direct_recursion():
    theta = [sympy.Rational(-1), sympy.Rational(-3), sympy.Rational(-7)]
    c = [sympy.Rational(1, 2), sympy.Rational(1, 3), sympy.Rational(2)]
    Lhat_x, L_x = direct_sfraction(theta, c)
    T, R, _ = block_lanczos(np.diag(np.array(theta, float)), np.eye(3), np.sqrt(np.array(c, float))[:, None])
    Lhat, L = sfraction_coeffs(T, R[:1])
    assert np.allclose(Lhat[:, 0, 0], np.array(Lhat_x, float), rtol=1e-12)
    assert np.allclose(L[:, 0, 0], np.array(L_x, float), rtol=1e-12)
    assert all(x > 0 for x in Lhat_x + L_x)


def test_sfraction_rejects_non_stieltjes():
    # a positive pole makes the first ladder step indefinite
    with pytest.raises(StieltjesnessError):
        sfraction_coeffs(np.array([[3.0, 1.0], [1.0, -2.0]]), np.array([[1.0]]))


def test_triple_equality_and_stieltjes(square25, rng):
    _, _, _, pen, P, S = square25
    basis = build_bases(pen, P, 3 * np.pi)
    for rom in build_roms(P, S, basis, 3):
        for k in range(rom.m):
            assert np.linalg.eigvalsh(rom.Lhat[k]).min() > 0
            assert np.linalg.eigvalsh(rom.L[k]).min() > 0
        for z in random_complex(rng, 10, scale=50.0):
            a, b, c = (rom.transfer(z, meth) for meth in ("sfraction", "resolvent", "partial"))
            assert rel(a, b) <= 1e-9 and rel(a, c) <= 1e-9
            # -F is Stieltjes: Im(-F) is nonnegative definite for Im z > 0
            assert np.linalg.eigvalsh((-a).imag).min() >= -1e-12 * np.abs(a).max()


def test_rom_build_is_deterministic(square25):
    _, _, _, pen, P, S = square25
    basis = build_bases(pen, P, 2 * np.pi)
    r1 = build_roms(P, S, basis, 3)
    r2 = build_roms(P, S, basis, 3, threads=4)
    for a, b in zip(r1, r2):
        assert np.array_equal(a.Lhat, b.Lhat) and np.array_equal(a.L, b.L)


def test_default_shift():
    assert default_shift(8.0) == -4.0


@settings(max_examples=15, deadline=None)
@given(n=st.integers(6, 30), m=st.integers(1, 4), seed=st.integers(0, 10**6))
def test_random_cells_give_stieltjes_ladders(n, m, seed):
    rng = np.random.default_rng(seed)
    cell = random_cell(rng, n)
    m = min(m, n // 2)
    V = rational_krylov(cell, [0, n - 1], np.eye(2), -0.2, m)
    Am, Bm, Sm = project(cell, V, [0, n - 1], np.eye(2))
    T, R, _ = block_lanczos(Am, Bm, Sm)
    Lhat, L = sfraction_coeffs(T, R[:2])
    assert all(np.linalg.eigvalsh(x).min() > 0 for x in Lhat)
    z = 1.3 + 0.4j
    assert rel(evaluate_sfraction((Lhat, L), z), resolvent_transfer(T, R, z)) <= 1e-9


# ---- projected sources -------------------------------------------------------

def test_project_io_examples(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((6, 3)))
    assert np.array_equal(project_io(Q, np.zeros(6)), np.zeros(3))
    assert np.allclose(project_io(Q, Q[:, 0]), [1, 0, 0], atol=1e-15)
    g, q = project_io(Q, Q[:, 1], Q[:, 2])
    assert np.allclose(g, [0, 1, 0], atol=1e-15) and np.allclose(q, [0, 0, 1], atol=1e-15)


def test_project_io_round_trip_within_tail(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    w = 10.0 ** -np.arange(8)
    G = (Q * w) @ Q.T
    S, _, tail = truncate_basis(G, rel_epsilon=1e-4, full_output=True)
    for _ in range(5):
        v = rng.standard_normal(8)
        v /= np.linalg.norm(v)
        g = G @ v
        assert np.linalg.norm(S @ project_io(S, g) - g) <= tail + 1e-15


def test_skeleton_support_check(square25):
    _, _, _, pen, P, _ = square25
    g = np.zeros(pen.N)
    g[P.skeleton[3]] = 1.0
    check_skeleton_support(g, P)
    g[P.interior(0)[0]] = 1.0
    with pytest.raises(ValueError, match="off the skeleton"):
        check_skeleton_support(g, P)


def test_basis_container_layout():
    b = BoundaryBasis({(0, 1): np.eye(2)}, 1.0)
    assert b.size((0, 1)) == 2
