import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from sfrom.errors import ConfigError, DegenerateRowError, NotSplittableError
from sfrom.fine_grid import GridMedium, assemble
from sfrom.partition import (
    Partition,
    adjacency,
    carry_vector,
    divide_and_conquer,
    find_separator,
    reassemble,
    regular_partition,
    remove_corner_set,
    split_two,
)


def path_laplacian(n):
    return sp.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1]).tocsr()


def random_laplacian(rng, n, density=0.08):
    """Symmetric diagonally dominant nonpositive matrix on a random graph."""
    M = sp.random(n, n, density=density, random_state=rng, data_rvs=rng.random)
    W = sp.triu(M + M.T, 1)
    W = (W + W.T).tocsr()
    d = np.asarray(W.sum(axis=1)).ravel() + rng.random(n) * 0.5
    return (W - sp.diags(d)).tocsr()


def is_diag_dominant(A, tol=1e-12):
    A = sp.csr_matrix(A)
    d = np.abs(A.diagonal())
    off = np.asarray(abs(A).sum(axis=1)).ravel() - d
    return bool(np.all(d >= off - tol * max(1.0, d.max())))


def brute_separated(A, int1, int2):
    D = sp.csr_matrix(A).toarray()
    return not np.any(D[np.ix_(int1, int2)])


def rel_reassembly_error(A, B, splits, n, z):
    As, Bs = reassemble(splits, n)
    ref = (sp.csr_matrix(A) + z * sp.diags(B)).toarray()
    got = (As + z * sp.diags(Bs)).toarray()
    return np.abs(got - ref).max() / np.abs(ref).max()


def test_find_separator_path_example():
    int1, int2, gamma = find_separator(path_laplacian(5), [1])
    assert int2.tolist() == [3, 4] and int1.tolist() == [0, 1] and gamma.tolist() == [2]


def test_find_separator_disconnected_graph_has_empty_separator():
    A = sp.block_diag([path_laplacian(3), path_laplacian(4)]).tocsr()
    int1, int2, gamma = find_separator(A, [0, 1, 2])
    assert gamma.size == 0
    assert int1.tolist() == [0, 1, 2] and int2.tolist() == [3, 4, 5, 6]


def test_find_separator_rejects_bad_seed():
    with pytest.raises(NotSplittableError):
        find_separator(path_laplacian(3), [1])
    with pytest.raises(NotSplittableError):
        find_separator(path_laplacian(3), [])


@pytest.mark.parametrize("seed", range(10))
def test_find_separator_random_graph(seed):
    rng = np.random.default_rng(seed)
    A = random_laplacian(rng, 30, density=0.06)
    adj = adjacency(A).toarray().astype(bool)
    int1, int2, gamma = find_separator(A, [int(rng.integers(30))])
    allnodes = np.concatenate([int1, int2, gamma])
    assert np.array_equal(np.sort(allnodes), np.arange(30))
    assert brute_separated(A, int1, int2)
    # Gamma = A(int_i) minus int_i for the side that generated it
    hood2 = set(int2) | {l for k in int2 for l in np.flatnonzero(adj[k])}
    assert set(gamma) == hood2 - set(int2)


def test_split_two_example_1d():
    n, h = 7, 0.125
    A = path_laplacian(n) / h**2
    B = np.ones(n)
    c1, c2 = split_two(A, B, np.arange(3), np.arange(4, 7), [3])
    k1, k2 = c1.local_index([3])[0], c2.local_index([3])[0]
    assert c1.A[k1, k1] == pytest.approx(-1 / h**2)
    assert c2.A[k2, k2] == pytest.approx(-1 / h**2)
    assert c1.B[k1] == 0.5 and c2.B[k2] == 0.5


def test_split_two_alpha_one_collapses_gamma_couplings():
    pen = assemble(GridMedium.homogeneous((7, 7), 1.0))
    gamma = np.flatnonzero(pen.coords[:, 0] == 3)
    int1 = np.flatnonzero(pen.coords[:, 0] < 3)
    int2 = np.flatnonzero(pen.coords[:, 0] > 3)
    c1, c2 = split_two(pen.A, pen.B, int1, int2, gamma, alpha=1.0)
    loc = c2.local_index(gamma)
    sub = c2.A.toarray()[np.ix_(loc, loc)]
    assert np.count_nonzero(sub - np.diag(np.diag(sub))) == 0
    assert np.count_nonzero(c1.A.toarray()[np.ix_(c1.local_index(gamma), c1.local_index(gamma))]) > gamma.size


def test_split_two_degenerate_row():
    A = sp.csr_matrix(np.diag([-1.0, -1.0, -1.0]))
    with pytest.raises(DegenerateRowError):
        split_two(A, np.ones(3), [0], [2], [1])


def test_split_two_rejects_invalid_triple():
    A = path_laplacian(5)
    with pytest.raises(ValueError):
        split_two(A, np.ones(5), [0, 1, 2], [3, 4], [])
    with pytest.raises(ValueError):
        split_two(A, np.ones(5), [0, 1], [3, 4], [2], beta=1.0)


def test_random_laplacians_inherit_dominance():
    rng = np.random.default_rng(2024)
    for trial in range(200):
        n = int(rng.integers(10, 201))
        A = random_laplacian(rng, n, density=min(0.5, 4.0 / n))
        B = 0.5 + rng.random(n)
        alpha = float(rng.random())
        beta = float(rng.uniform(0.05, 0.95))
        _, splits = divide_and_conquer((A, B), max(5, n // 3), alpha=alpha, beta=beta)
        for s in splits:
            assert is_diag_dominant(s.A), trial
            assert np.all(s.A.diagonal() <= 0)
            assert s.B.min() > 0
            d = np.sqrt(np.maximum(np.abs(s.A.diagonal()), 1e-300))
            scaled = (sp.diags(1 / d) @ s.A @ sp.diags(1 / d)).toarray()
            assert np.linalg.eigvalsh(scaled).max() <= 1e-10
        assert rel_reassembly_error(A, B, splits, n, 2 + 3j) <= 1e-13


def test_divide_and_conquer_path_9():
    A = path_laplacian(9)
    part, splits = divide_and_conquer((A, np.ones(9)), 5)
    assert part.n_cells == 2
    assert part.skeleton.size == 1


def test_divide_and_conquer_matches_regular_2x2(square25):
    pen0 = assemble(GridMedium.homogeneous((19, 19), 1.0 / 18))
    part_dc, splits_dc = divide_and_conquer(pen0, 81, seed_strategy="coordinate")
    part_reg, _ = regular_partition(pen0, 2)
    assert part_dc.n_cells == 4
    assert np.array_equal(part_dc.skeleton, part_reg.skeleton)
    assert sorted(map(tuple, map(list, part_dc.cells))) == sorted(map(tuple, map(list, part_reg.cells)))
    assert not part_dc.check_separation(pen0.A)


@pytest.mark.parametrize("cpa", [2, 3, (2, 3)])
def test_regular_partition_reassembles(cpa):
    pen = assemble(GridMedium((19, 19), 0.1, 1.0 + np.random.default_rng(3).random((19, 19))))
    part, splits = regular_partition(pen, cpa)
    rng = np.random.default_rng(1)
    for z in rng.standard_normal(5) + 1j * rng.standard_normal(5):
        assert rel_reassembly_error(pen.A, pen.B, splits, pen.N, z) <= 1e-13
    assert not part.check_separation(pen.A)


def test_regular_partition_weights():
    pen = assemble(GridMedium.homogeneous((9, 9), 1.0))
    part, splits = regular_partition(pen, 2)
    s = splits[0]
    A = s.A.toarray()
    # interior node (2, 2): full stencil
    k = s.local_index([pen.index_of((2, 2))])[0]
    assert A[k, k] == -4.0 and s.B[k] == 1.0
    # interface node (4, 2): tangential couplings halved, normal coupling full, mass halved
    k = s.local_index([pen.index_of((4, 2))])[0]
    t = s.local_index([pen.index_of((4, 1)), pen.index_of((4, 3))])
    nrm = s.local_index([pen.index_of((3, 2))])[0]
    assert A[k, t].tolist() == [0.5, 0.5] and A[k, nrm] == 1.0
    assert s.B[k] == 0.5
    assert A[k].sum() == 0.0
    # corner node (4, 4): mass quartered
    k = s.local_index([pen.index_of((4, 4))])[0]
    assert s.B[k] == 0.25


def test_regular_partition_rejects_non_divisible():
    pen = assemble(GridMedium.homogeneous((10, 10), 1.0))
    with pytest.raises(ConfigError):
        regular_partition(pen, 2)


def test_corner_removal_2x2(square25):
    pen0, P0, S0, pen, P, S = square25
    assert P0.corner_set.size == 1
    k = int(P0.corner_set[0])
    copies = P.hanging[k]
    assert len(copies) == 4
    assert P.corner_set.size == 0
    assert (pen.A - pen.A.T).nnz == 0 or abs(pen.A - pen.A.T).max() <= 1e-14 * abs(pen.A).max()
    assert pen.B.min() > 0
    assert pen.B[copies].sum() == pytest.approx(pen0.B[k], rel=1e-15)
    assert pen.B.sum() == pytest.approx(pen0.B.sum(), rel=1e-14)
    assert np.all(pen.parent[copies] == k)
    rng = np.random.default_rng(0)
    for z in rng.standard_normal(5) + 1j * rng.standard_normal(5):
        assert rel_reassembly_error(pen.A, pen.B, S, pen.N, z) <= 1e-13


def test_corner_removal_noop_without_corners(line17):
    pen, part, splits = line17
    out = remove_corner_set(pen, part, splits)
    assert out[0] is pen and out[1] is part and out[2] is splits


def test_corner_removal_3x3_mass():
    pen0 = assemble(GridMedium((19, 19), 0.1, 1.0, 1.0 + np.random.default_rng(5).random((19, 19))))
    part0, splits0 = regular_partition(pen0, 3)
    pen, part, splits = remove_corner_set(pen0, part0, splits0)
    assert part.corner_set.size == 0
    for k, rows in part.hanging.items():
        assert pen.B[rows].sum() == pytest.approx(pen0.B[k], rel=1e-14)
    assert abs(pen.A - pen.A.T).max() <= 1e-13 * abs(pen.A).max()


def test_carry_vector(square25):
    pen0, P0, _, pen, P, _ = square25
    v = np.arange(pen0.N, dtype=float)
    k = int(P0.corner_set[0])
    with pytest.raises(Exception):
        carry_vector(v, pen, P)
    v[k] = 0.0
    w = carry_vector(v, pen, P)
    assert np.array_equal(w[P.hanging[k]], np.zeros(4))
    keep = np.flatnonzero(pen.parent != k)
    assert np.array_equal(w[keep], v[pen.parent[keep]])


def test_partition_json_roundtrip(square25):
    _, _, _, _, P, _ = square25
    Q = Partition.from_json(P.to_json())
    assert Q.to_json() == P.to_json()
    assert Q.hanging == {k: list(v) for k, v in P.hanging.items()}


def test_partition_must_cover():
    with pytest.raises(ValueError):
        Partition(5, [[0, 1], [3, 4]])


@settings(max_examples=20, deadline=None)
@given(nx=st.integers(8, 20), ny=st.integers(8, 20), target=st.integers(10, 80), seed=st.integers(0, 1000))
def test_divide_and_conquer_properties(nx, ny, target, seed):
    rng = np.random.default_rng(seed)
    pen = assemble(GridMedium((nx, ny), 0.1, 0.5 + rng.random((nx, ny))))
    part, splits = divide_and_conquer(pen, target)
    assert not part.check_separation(pen.A)
    assert rel_reassembly_error(pen.A, pen.B, splits, pen.N, 1.5 - 0.7j) <= 1e-13
    for s in splits:
        assert is_diag_dominant(s.A)
