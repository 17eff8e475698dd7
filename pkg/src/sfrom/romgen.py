"""Off-line stage: per-cell reduced models of the Neumann-to-Dirichlet map.

For one cell with local pencil (A_i, B_i) and boundary rows Gamma_i the
transfer function is

    F_i(z) = P^T (A_i + z B_i)^{-1} P,        z = w^2,

with eigenvalues of (A_i, B_i) nonpositive.  The pipeline is

1. interface bases ``S_ij`` from frequency-limited Gramians,
2. a block rational Krylov subspace at the shift ``s < 0``,
3. Galerkin projection to ``(Am, Bm, Sm)``,
4. block Lanczos in the ``Bm`` inner product giving ``(T, R)``,
5. matrix S-fraction ladders ``Lhat^k, L^k`` of the three-term scheme

    L^1 (U^2 - U^1) + z Lhat^1^{-1} U^1 = I,
    L^k (U^{k+1} - U^k) - L^{k-1} (U^k - U^{k-1}) + z Lhat^k^{-1} U^k = 0,

with ``U^{m+1} = 0`` and ``F = U^1``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DeflationRequiredError, SingularShiftError, StieltjesnessError
from .partition import graph_ball

__all__ = [
    "DENSE_LIMIT",
    "BoundaryBasis",
    "SubdomainROM",
    "exact_transfer",
    "boundary_gramian",
    "truncate_basis",
    "band_modes",
    "interface_gramian",
    "build_bases",
    "identity_bases",
    "rational_krylov",
    "project",
    "block_lanczos",
    "sfraction_coeffs",
    "evaluate_sfraction",
    "resolvent_transfer",
    "partial_fraction_transfer",
    "project_io",
    "check_skeleton_support",
    "build_rom",
    "build_roms",
    "default_shift",
]

DENSE_LIMIT = 5000


def _sym(M):
    return 0.5 * (M + M.T)


def _sqrtm_spd(M, what):
    w, Q = np.linalg.eigh(_sym(M))
    if w.min() <= 1e-13 * max(abs(w).max(), 1e-300):
        raise DeflationRequiredError(f"{what} is rank deficient (eigenvalues {w.min():.3e} .. {w.max():.3e}); deflation is not implemented")
    return (Q * np.sqrt(w)) @ Q.T


def default_shift(omega_max):
    """Default Krylov shift ``s = -(omega_max / 4)^2``."""
    return -((omega_max / 4.0) ** 2)


def _factor(A, B, z):
    M = (sp.csr_matrix(A) + z * sp.diags(B)).tocsc()
    if np.iscomplexobj(M.data) or np.iscomplex(z):
        M = M.astype(complex)
    try:
        lu = spla.splu(M)
    except RuntimeError as exc:
        raise SingularShiftError(f"A + ({z}) B is singular") from exc
    return lu, M


def exact_transfer(split, gamma_local, w2):
    """Dense ``F(w2) = P^T (A_i + w2 B_i)^{-1} P`` on the local rows ``gamma_local``."""
    gamma_local = np.asarray(gamma_local, dtype=np.int64)
    lu, M = _factor(split.A, split.B, w2)
    rhs = np.zeros((split.N, gamma_local.size), dtype=M.dtype)
    rhs[gamma_local, np.arange(gamma_local.size)] = 1.0
    X = lu.solve(rhs)
    scale = spla.norm(M, 1)
    if not np.all(np.isfinite(X)) or np.abs(X).max() * scale > 1e13:
        raise SingularShiftError(f"w^2 = {w2} is at or near a pencil eigenvalue")
    F = X[gamma_local]
    return _sym(F)


def boundary_gramian(A, B, nodes, omega_max):
    """Frequency-limited Gramian of the rows ``nodes``.

    ``G = sum_{lam <= omega_max^2} z|nodes z|nodes^T`` over the B-orthonormal
    eigenvectors ``z`` of ``(-A, B)``.  Computed by dense eigendecomposition.
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    if n > DENSE_LIMIT:
        raise ValueError(f"dense Gramian limited to N <= {DENSE_LIMIT}, got {n}")
    lam, Z = la.eigh(-A.toarray(), np.diag(np.asarray(B, float)))
    V = Z[np.asarray(nodes)][:, lam <= omega_max**2]
    return _sym(V @ V.T)


def truncate_basis(G, epsilon=None, *, rel_epsilon=1e-6, max_size=None, full_output=False):
    """Orthonormal eigenvectors of ``G`` with eigenvalue above ``epsilon``.

    ``epsilon`` defaults to ``rel_epsilon`` times the largest eigenvalue.  Columns
    are ordered by decreasing eigenvalue and signed so that the entry of
    largest magnitude is positive.  ``max_size`` caps the number of columns.

    With ``full_output`` also return the kept eigenvalues and the sum of the
    discarded ones.
    """
    w, Q = np.linalg.eigh(_sym(np.asarray(G, float)))
    order = np.argsort(-w, kind="stable")
    w, Q = w[order], Q[:, order]
    top = max(w[0], 0.0) if w.size else 0.0
    eps = rel_epsilon * top if epsilon is None else float(epsilon)
    keep = w > eps if top > 0 else np.zeros(w.size, dtype=bool)
    if max_size is not None:
        keep &= np.arange(w.size) < int(max_size)
    S = Q[:, keep]
    if S.size:
        piv = np.argmax(np.abs(S), axis=0)
        S = S * np.sign(S[piv, np.arange(S.shape[1])])
    if full_output:
        return S, w[keep], float(np.clip(w[~keep], 0, None).sum())
    return S


def band_modes(pencil, omega_max, *, batch=64, seed=0):
    """B-orthonormal eigenvectors of ``(-A, B)`` with eigenvalue ``<= omega_max^2``.

    Dense for ``N <= DENSE_LIMIT``; otherwise shift-invert Lanczos at zero
    with a growing number of requested pairs until the band is exhausted;
    ``seed`` fixes the Lanczos start vector.
    """
    n = pencil.N
    s = 1.0 / np.sqrt(pencil.B)
    H = sp.diags(s) @ (-pencil.A) @ sp.diags(s)
    cut = omega_max**2
    if n <= DENSE_LIMIT:
        lam, Y = la.eigh(H.toarray())
    else:
        k = min(batch, n - 2)
        v0 = np.random.default_rng(seed).standard_normal(n)
        while True:
            lam, Y = spla.eigsh(H.tocsc(), k=k, sigma=-1e-8 * max(cut, 1.0), which="LM", tol=1e-12, v0=v0)
            order = np.argsort(lam)
            lam, Y = lam[order], Y[:, order]
            if lam[-1] > cut or k >= n - 2:
                break
            k = min(2 * k, n - 2)
    keep = lam <= cut
    return s[:, None] * Y[:, keep], lam[keep]


def interface_gramian(pencil, partition, key, omega_max, *, collar=None, modes=None):
    """Gramian of interface ``key`` on a surrogate region around it.

    With ``collar="global"`` (or precomputed ``modes`` from
    :func:`band_modes`) the exact Gramian of the whole pencil is formed.
    Otherwise the region is the union of the cells sharing the interface
    (``collar=None``, one cell width on each side) or the ball of ``collar``
    graph hops around it, restricted with Dirichlet conditions outside.
    """
    i, j = key
    nodes = partition.ports[i] if j < 0 else partition.interfaces[key]
    if modes is not None or collar == "global":
        Z = band_modes(pencil, omega_max)[0] if modes is None else modes
        V = Z[nodes]
        return _sym(V @ V.T)
    if collar is None:
        region = partition.cells[i] if j < 0 else np.union1d(partition.cells[i], partition.cells[j])
    else:
        region = graph_ball(pencil.A, nodes, collar)
    A = pencil.A[region][:, region]
    local = np.searchsorted(region, nodes)
    return boundary_gramian(A, pencil.B[region], local, omega_max)


@dataclass
class BoundaryBasis:
    """Interface bases ``S[key]`` (orthonormal columns, rows in interface order)."""

    S: dict
    omega_max: float
    epsilon: object = None
    kept: dict = field(default_factory=dict)
    tail: dict = field(default_factory=dict)

    def size(self, key):
        return self.S[key].shape[1]

    def cell_layout(self, partition, i):
        """Boundary rows, block-diagonal ``S_i`` and column slices for cell ``i``."""
        groups = partition.cell_interfaces(i)
        rows = [nodes for _, nodes in groups]
        mats = [self.S[key] for key, _ in groups]
        gamma = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        S_i = la.block_diag(*mats) if mats else np.zeros((0, 0))
        slices, c = {}, 0
        for (key, _), M in zip(groups, mats):
            slices[key] = slice(c, c + M.shape[1])
            c += M.shape[1]
        return gamma, S_i, slices


def _interface_keys(partition):
    keys = list(partition.interfaces)
    keys += [(i, -1) for i in sorted(partition.ports) if partition.ports[i].size]
    return keys


def build_bases(pencil, partition, omega_max, *, epsilon=None, rel_epsilon=1e-6, max_size=None, collar="global", threads=1):
    """Gramian-truncated bases for every interface and port of the partition.

    ``epsilon`` is absolute when given; the default is ``rel_epsilon``
    times the largest eigenvalue of each interface Gramian.  ``collar`` selects the
    Gramian region (see :func:`interface_gramian`).
    """
    keys = _interface_keys(partition)
    modes = band_modes(pencil, omega_max)[0] if collar == "global" else None

    def one(key):
        G = interface_gramian(pencil, partition, key, omega_max, collar=collar, modes=modes)
        return truncate_basis(G, epsilon, rel_epsilon=rel_epsilon, max_size=max_size, full_output=True)

    results = _pmap(one, keys, threads)
    basis = BoundaryBasis({}, float(omega_max), rel_epsilon if epsilon is None else epsilon)
    for key, (S, kept, tail) in zip(keys, results):
        if S.shape[1] == 0:
            raise DeflationRequiredError(f"interface {key} carries no energy below omega_max; empty basis")
        basis.S[key], basis.kept[key], basis.tail[key] = S, kept, tail
    return basis


def identity_bases(partition, omega_max=np.inf):
    """Untruncated bases (identity on every interface)."""
    keys = _interface_keys(partition)
    S = {}
    for key in keys:
        n = partition.ports[key[0]].size if key[1] < 0 else partition.interfaces[key].size
        S[key] = np.eye(n)
    return BoundaryBasis(S, float(omega_max), 0.0, {k: np.ones(v.shape[1]) for k, v in S.items()}, {k: 0.0 for k in S})


def _orthonormalize_block(V_blocks, W, tol=1e-10):
    """Two-pass block Gram-Schmidt of ``W`` against ``V_blocks``, then QR."""
    ref = np.linalg.norm(W, axis=0).max()
    for _ in range(2):
        for Q in V_blocks:
            W = W - Q @ (Q.T @ W)
    Q, R = np.linalg.qr(W)
    d = np.abs(np.diag(R))
    if ref == 0 or d.min() <= tol * ref:
        raise DeflationRequiredError(
            f"Krylov block lost rank (min |R_kk| = {d.min() if d.size else 0:.3e}, block norm {ref:.3e}); "
            "the boundary inputs are linearly dependent in the subspace and deflation is not implemented"
        )
    # deterministic sign: positive diagonal of R
    sgn = np.sign(np.diag(R))
    sgn[sgn == 0] = 1.0
    return Q * sgn


def rational_krylov(split, gamma_local, S_i, s, m, *, zero_power=True):
    """Orthonormal basis of the block rational Krylov subspace at shift ``s``.

    With ``K = A_i + s B_i`` and ``X = B_i^{-1} P S_i`` the subspace is
    ``span{X, (K^{-1} B_i) X, ..., (K^{-1} B_i)^{m-1} X}`` (``zero_power``)
    or ``span{(K^{-1} B_i) X, ..., (K^{-1} B_i)^m X}``.  The first block of
    the latter is ``K^{-1} P S_i``.  Blocks are generated from the previous
    orthonormal block, which spans the same space and is better conditioned.

    Returns ``V`` with ``V^T V = I`` and ``m * K`` columns.
    """
    if not s < 0:
        raise ValueError("the Krylov shift must be negative")
    gamma_local = np.asarray(gamma_local, dtype=np.int64)
    S_i = np.asarray(S_i, dtype=float)
    lu, _ = _factor(split.A, split.B, s)
    X = np.zeros((split.N, S_i.shape[1]))
    X[gamma_local] = S_i / split.B[gamma_local, None]
    blocks = []
    cur = X
    if zero_power:
        cur = _orthonormalize_block(blocks, cur)
        blocks.append(cur)
    while len(blocks) < m:
        cur = lu.solve(split.B[:, None] * cur)
        cur = _orthonormalize_block(blocks, np.real(cur))
        blocks.append(cur)
    return np.hstack(blocks)


def project(split, V, gamma_local, S_i):
    """Galerkin projection ``(V^T A V, V^T B V, V^T P S_i)``, symmetrised."""
    AV = split.A @ V
    Am = _sym(V.T @ AV)
    Bm = _sym(V.T @ (split.B[:, None] * V))
    Sm = V[np.asarray(gamma_local)].T @ S_i
    return Am, Bm, Sm


def block_lanczos(Am, Bm, Sm):
    """Block Lanczos for ``Bm^{-1} Am`` in the ``Bm`` inner product.

    Returns
    -------
    T : (mK, mK) block tridiagonal, ``T = Q^T Am Q`` with ``Q^T Bm Q = I``
    R : (mK, K) equal to ``[beta_1; 0; ...]``
    Q : the Lanczos basis

    so that ``R^T (T + z I)^{-1} R = Sm^T (Am + z Bm)^{-1} Sm``.
    """
    Am, Bm, Sm = (np.asarray(x, float) for x in (Am, Bm, Sm))
    n, K = Sm.shape
    if n % K:
        raise ValueError("reduced dimension must be a multiple of the block size")
    m = n // K
    cB = la.cho_factor(Bm)
    X = la.cho_solve(cB, Sm)
    beta1 = _sqrtm_spd(X.T @ Bm @ X, "Sm^T Bm^{-1} Sm (first Lanczos block)")
    Qk = la.solve(beta1, X.T, assume_a="sym").T
    Qs = [Qk]
    Q_prev, beta_k = None, None
    for k in range(1, m):
        W = la.cho_solve(cB, Am @ Qk)
        alpha = _sym(Qk.T @ Am @ Qk)
        W = W - Qk @ alpha
        if Q_prev is not None:
            W = W - Q_prev @ beta_k.T
        for _ in range(2):
            for Qj in Qs:
                W = W - Qj @ (Qj.T @ (Bm @ W))
        beta_next = _sqrtm_spd(W.T @ Bm @ W, f"Lanczos block beta_{k + 1}")
        Q_prev, beta_k = Qk, beta_next
        Qk = la.solve(beta_next, W.T, assume_a="sym").T
        Qs.append(Qk)
    Q = np.hstack(Qs)
    T_full = _sym(Q.T @ Am @ Q)
    T = np.zeros_like(T_full)
    for a in range(m):
        for b in range(max(0, a - 1), min(m, a + 2)):
            T[a * K:(a + 1) * K, b * K:(b + 1) * K] = T_full[a * K:(a + 1) * K, b * K:(b + 1) * K]
    R = np.zeros((n, K))
    R[:K] = beta1
    return T, R, Q


SPD_RTOL = 1e-10


def _check_spd(M, name):
    w = np.linalg.eigvalsh(M)
    if not w.min() > 0:
        raise StieltjesnessError(f"{name} is not positive definite (min eigenvalue {w.min():.3e})")


def _clip_psd(M, name, rtol=SPD_RTOL):
    """Accept ``M`` if it is semidefinite up to ``rtol * max|eig|``; clip the roundoff.

    A cell without Dirichlet rows has a pole at ``z = 0`` and the deepest
    conductance is singular along the constant mode.
    """
    w, U = np.linalg.eigh(M)
    scale = max(abs(w[0]), abs(w[-1]))
    if w[0] < -rtol * scale:
        raise StieltjesnessError(f"{name} is not positive semidefinite (min eigenvalue {w[0]:.3e}, scale {scale:.3e})")
    if w[0] >= 0:
        return M
    return _sym((U * np.maximum(w, 0.0)) @ U.T)


def sfraction_coeffs(T, beta1):
    """S-fraction ladders from the block tridiagonal Lanczos form.

    With ``Lhat^k = G_k G_k^T`` and ``G_1 = beta_1^T`` the congruence
    ``T = -G^T Kmat G`` (``Kmat`` the stiffness of the three-term scheme)
    gives ``L^k = -G_k^{-T} alpha_k G_k^{-1} - L^{k-1}`` and
    ``G_{k+1} = (G_k^T L^k)^{-1} T_{k,k+1}``.  The first is evaluated in the
    equivalent form

        L^k = G_k^{-T} S_k G_k^{-1},   S_k = -alpha_k - T_{k-1,k}^T S_{k-1}^{-1} T_{k-1,k},

    with ``S_k`` the block Schur complements of ``-T``; this avoids
    cancellation between ladders of very different scale.

    Returns arrays ``Lhat, L`` of shape ``(m, K, K)``.  Raises
    ``StieltjesnessError`` if some ``Lhat^k`` is not positive definite or
    some ``L^k`` is indefinite beyond ``SPD_RTOL`` relative roundoff.
    """
    T = np.asarray(T, float)
    beta1 = np.asarray(beta1, float)
    K = beta1.shape[0]
    m = T.shape[0] // K
    blk = lambda a, b: T[a * K:(a + 1) * K, b * K:(b + 1) * K]
    Lhat = np.zeros((m, K, K))
    L = np.zeros((m, K, K))
    G = beta1.T.copy()
    Schur = None
    for k in range(m):
        Lhat[k] = _sym(G @ G.T)
        _check_spd(Lhat[k], f"Lhat^{k + 1}")
        # block Schur complement of -T, formed in Lanczos coordinates
        Sk = -blk(k, k)
        if k > 0:
            C = blk(k - 1, k)
            Sk = Sk - C.T @ np.linalg.solve(Schur, C)
        Schur = _clip_psd(_sym(Sk), f"L^{k + 1}", SPD_RTOL * max(1.0, np.abs(T).max() / max(np.abs(Sk).max(), 1e-300)))
        Ginv = np.linalg.inv(G)
        L[k] = _clip_psd(_sym(Ginv.T @ Schur @ Ginv), f"L^{k + 1}")
        if k + 1 < m:
            G = np.linalg.solve(G.T @ L[k], blk(k, k + 1))
    return Lhat, L


def evaluate_sfraction(rom_or_ladders, w2):
    """``U^1`` of the three-term scheme at ``w2`` by backward block elimination.

    Accepts a :class:`SubdomainROM` or a pair ``(Lhat, L)``.
    """
    if isinstance(rom_or_ladders, SubdomainROM):
        Lhat, L = rom_or_ladders.Lhat, rom_or_ladders.L
    else:
        Lhat, L = rom_or_ladders
    m = Lhat.shape[0]
    dtype = np.result_type(Lhat.dtype, type(w2))
    Schur = None
    for k in range(m - 1, -1, -1):
        D = w2 * np.linalg.inv(Lhat[k]) - L[k]
        if k > 0:
            D = D - L[k - 1]
        if Schur is not None:
            D = D - L[k] @ np.linalg.solve(Schur, L[k])
        Schur = D.astype(dtype)
    try:
        F = np.linalg.inv(Schur)
    except np.linalg.LinAlgError as exc:
        raise SingularShiftError(f"three-term scheme is singular at w^2 = {w2}") from exc
    return _sym(F)


def resolvent_transfer(T, R, w2):
    """``R^T (T + w2 I)^{-1} R``."""
    M = T + w2 * np.eye(T.shape[0])
    return _sym(R.T @ np.linalg.solve(M, R))


def partial_fraction_transfer(Am, Bm, Sm, w2):
    """``sum_l v_l v_l^T / (theta_l + w2)`` over the eigenpairs of ``(Am, Bm)``."""
    theta, Y = la.eigh(Am, Bm)
    V = Sm.T @ Y
    return _sym((V / (theta + w2)) @ V.T)


def check_skeleton_support(vec, partition):
    """Raise if ``vec`` is nonzero off the skeleton (reports the nodes)."""
    vec = np.asarray(vec)
    off = np.flatnonzero((vec != 0) & (partition.multiplicity <= 1))
    if partition.ports:
        ported = np.concatenate(list(partition.ports.values()))
        off = np.setdiff1d(off, ported)
    if off.size:
        raise ValueError(f"source/receiver is nonzero off the skeleton at nodes {off[:20].tolist()}")


def project_io(S_ij, g_gamma, q_gamma=None):
    """Projected source and receiver ``S_ij^T g|_Gamma_ij`` (and for ``q``)."""
    g_t = S_ij.T @ np.asarray(g_gamma, float)
    if q_gamma is None:
        return g_t
    return g_t, S_ij.T @ np.asarray(q_gamma, float)


@dataclass
class SubdomainROM:
    """Reduced model of one cell.

    ``interfaces`` lists ``(key, column slice)`` of the reduced boundary
    coordinates in cell order.  ``V`` and ``Q`` are kept only when requested.
    """

    cell: int
    m: int
    shift: float
    Am: np.ndarray
    Bm: np.ndarray
    Sm: np.ndarray
    T: np.ndarray
    R: np.ndarray
    Lhat: np.ndarray
    L: np.ndarray
    interfaces: list
    V: np.ndarray | None = None

    @property
    def K(self):
        return self.Sm.shape[1]

    def transfer(self, w2, method="sfraction"):
        if method == "sfraction":
            return evaluate_sfraction(self, w2)
        if method == "resolvent":
            return resolvent_transfer(self.T, self.R, w2)
        if method == "partial":
            return partial_fraction_transfer(self.Am, self.Bm, self.Sm, w2)
        raise ValueError(f"unknown evaluation method {method!r}")


def build_rom(split, partition, i, basis, m, shift=None, *, zero_power=True, keep_basis=False):
    """Build the reduced model of cell ``i`` (Krylov, projection, Lanczos, S-fraction)."""
    shift = default_shift(basis.omega_max) if shift is None else float(shift)
    gamma, S_i, slices = basis.cell_layout(partition, i)
    gamma_local = split.local_index(gamma)
    V = rational_krylov(split, gamma_local, S_i, shift, m, zero_power=zero_power)
    Am, Bm, Sm = project(split, V, gamma_local, S_i)
    T, R, _ = block_lanczos(Am, Bm, Sm)
    K = Sm.shape[1]
    Lhat, L = sfraction_coeffs(T, R[:K])
    return SubdomainROM(i, m, shift, Am, Bm, Sm, T, R, Lhat, L, list(slices.items()), V if keep_basis else None)


def _pmap(fn, items, threads):
    items = list(items)
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def build_roms(partition, splits, basis, m, shift=None, *, zero_power=True, threads=1):
    """Build every cell ROM; ``threads > 1`` runs the independent builds as a parallel map."""
    return _pmap(lambda i: build_rom(splits[i], partition, i, basis, m, shift, zero_power=zero_power), range(partition.n_cells), threads)
