"""Graph partitioning of the pencil into coarse cells and operator splitting.

A partition covers the node set by cells ``Omega_i``.  Nodes owned by one
cell form its interior, nodes shared by several cells form the skeleton, and
the pencil is split so that

    sum_i P_i (A_i + w^2 B_i) P_i^T = A + w^2 B        for every w^2.

Cells are stored as sorted arrays of global row indices, so ``P_i`` is the
column selection ``cells[i]``.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, CornerSetError, DegenerateRowError, NotSplittableError
from .fine_grid import SparsePencil

__all__ = [
    "Partition",
    "SubdomainSplit",
    "adjacency",
    "neighbourhood",
    "find_separator",
    "split_two",
    "divide_and_conquer",
    "regular_partition",
    "remove_corner_set",
    "reassemble",
    "carry_vector",
    "graph_ball",
]


def _as_matrix(obj):
    return obj.A if isinstance(obj, SparsePencil) else sp.csr_matrix(obj)


def adjacency(A):
    """Boolean off-diagonal sparsity pattern of ``A``."""
    A = _as_matrix(A).tocsr()
    pattern = (A != 0).astype(np.int8).tolil()
    pattern.setdiag(0)
    pattern = pattern.tocsr()
    pattern.eliminate_zeros()
    return pattern


def _mask(nodes, n):
    nodes = np.asarray(nodes)
    if nodes.dtype == bool:
        if nodes.shape != (n,):
            raise ValueError("boolean node mask has the wrong length")
        return nodes.copy()
    m = np.zeros(n, dtype=bool)
    m[nodes.astype(int)] = True
    return m


def neighbourhood(adj, mask):
    """The set A(S): ``mask`` together with every node adjacent to it."""
    return mask | ((adj @ mask.astype(np.int8)) > 0)


def graph_ball(A, nodes, radius):
    """Nodes within ``radius`` graph hops of ``nodes`` (sorted index array)."""
    adj = adjacency(A)
    m = _mask(nodes, adj.shape[0])
    for _ in range(int(radius)):
        m = neighbourhood(adj, m)
    return np.flatnonzero(m)


@dataclass
class SubdomainSplit:
    """Local pencil of one cell.

    ``nodes`` are the rows of the parent pencil that the local rows map to
    (the prolongation ``P_i``).  ``alpha``/``beta`` record the weights used
    for the split that produced this cell (scalars or None).
    """

    A: sp.csr_matrix
    B: np.ndarray
    nodes: np.ndarray
    alpha: object = None
    beta: object = None

    def __post_init__(self):
        self.A = sp.csr_matrix(self.A, dtype=float)
        self.A.eliminate_zeros()
        self.A.sort_indices()
        self.B = np.asarray(self.B, dtype=float)
        self.nodes = np.asarray(self.nodes, dtype=np.int64)

    @property
    def N(self):
        return self.A.shape[0]

    def local_index(self, global_nodes):
        """Local row positions of ``global_nodes`` (all must belong to the cell)."""
        global_nodes = np.asarray(global_nodes, dtype=np.int64)
        pos = np.searchsorted(self.nodes, global_nodes)
        ok = (pos < self.nodes.size) & (self.nodes[np.minimum(pos, self.nodes.size - 1)] == global_nodes)
        if not np.all(ok):
            raise ValueError(f"nodes {global_nodes[~ok].tolist()} are not in this cell")
        return pos


@dataclass
class Partition:
    """Cell cover of ``n_nodes`` graph nodes.

    ``hanging`` maps a removed corner node of the parent pencil to the rows
    of its hanging copies; it is empty unless corner removal was applied.
    ``ports`` optionally names extra one-sided boundary groups of a cell
    (external inputs that are not shared with a neighbour).
    """

    n_nodes: int
    cells: list
    hanging: dict = field(default_factory=dict)
    ports: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cells = [np.unique(np.asarray(c, dtype=np.int64)) for c in self.cells]
        self.ports = {int(i): np.unique(np.asarray(p, dtype=np.int64)) for i, p in self.ports.items()}
        cover = np.zeros(self.n_nodes, dtype=bool)
        for c in self.cells:
            cover[c] = True
        if not cover.all():
            raise ValueError(f"cells do not cover nodes {np.flatnonzero(~cover)[:10].tolist()}")

    @property
    def n_cells(self):
        return len(self.cells)

    @cached_property
    def multiplicity(self):
        """Number of cells containing each node."""
        return np.bincount(np.concatenate(self.cells), minlength=self.n_nodes)

    @cached_property
    def membership(self):
        """``{node: [cells]}`` for every skeleton node."""
        out = {}
        for i, c in enumerate(self.cells):
            for k in c[self.multiplicity[c] > 1]:
                out.setdefault(int(k), []).append(i)
        return out

    @cached_property
    def interfaces(self):
        """``{(i, j): sorted nodes of Omega_i & Omega_j}`` for i < j, nonempty only."""
        acc = {}
        for k, owners in sorted(self.membership.items()):
            for i, j in combinations(sorted(owners), 2):
                acc.setdefault((i, j), []).append(k)
        return {key: np.asarray(v, dtype=np.int64) for key, v in sorted(acc.items())}

    @cached_property
    def skeleton(self):
        return np.flatnonzero(self.multiplicity > 1)

    @cached_property
    def corner_set(self):
        """Nodes in three or more cells (shared by two interfaces of some cell)."""
        return np.flatnonzero(self.multiplicity > 2)

    def interior(self, i):
        c = self.cells[i]
        return c[self.multiplicity[c] == 1]

    def boundary(self, i):
        c = self.cells[i]
        return c[self.multiplicity[c] > 1]

    def neighbours(self, i):
        return sorted(j if a == i else a for (a, j) in self.interfaces if i in (a, j))

    def cell_interfaces(self, i):
        """Ordered interface groups of cell ``i``: ``[(key, nodes), ...]``.

        Shared interfaces come first, sorted by neighbour index, then the
        cell's port (key ``(i, -1)``) if any.  This order defines ``Gamma_i``.
        """
        out = []
        for j in self.neighbours(i):
            key = (min(i, j), max(i, j))
            out.append((key, self.interfaces[key]))
        if i in self.ports and self.ports[i].size:
            out.append(((i, -1), self.ports[i]))
        return out

    def gamma(self, i):
        """Concatenated boundary nodes of cell ``i`` in interface order."""
        groups = [nodes for _, nodes in self.cell_interfaces(i)]
        return np.concatenate(groups) if groups else np.zeros(0, dtype=np.int64)

    def check_separation(self, A):
        """Return the list of nonzero couplings between distinct interiors."""
        owner = np.full(self.n_nodes, -1)
        for i in range(self.n_cells):
            owner[self.interior(i)] = i
        coo = sp.coo_matrix(_as_matrix(A))
        oi, oj = owner[coo.row], owner[coo.col]
        bad = (oi >= 0) & (oj >= 0) & (oi != oj) & (coo.data != 0)
        return list(zip(coo.row[bad].tolist(), coo.col[bad].tolist()))

    def to_json(self):
        doc = {
            "n_nodes": int(self.n_nodes),
            "cells": [c.tolist() for c in self.cells],
            "interfaces": [{"cells": list(k), "nodes": v.tolist()} for k, v in self.interfaces.items()],
            "skeleton": self.skeleton.tolist(),
            "corner_set": self.corner_set.tolist(),
            "hanging": {str(k): list(map(int, v)) for k, v in sorted(self.hanging.items())},
            "ports": {str(k): v.tolist() for k, v in sorted(self.ports.items())},
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(
            int(doc["n_nodes"]),
            doc["cells"],
            hanging={int(k): list(v) for k, v in doc.get("hanging", {}).items()},
            ports={int(k): v for k, v in doc.get("ports", {}).items()},
        )


def find_separator(A, seed):
    """Split the node set as ``Omega = int1 | int2 | gamma`` from a seed.

    Constructive rule: ``int2 = Omega \\ A(seed)``, ``int1 = Omega \\ A(int2)``,
    ``gamma`` the rest.  No edge of ``A`` joins ``int1`` and ``int2``.

    Returns three sorted index arrays.
    """
    adj = adjacency(A)
    n = adj.shape[0]
    s = _mask(seed, n)
    if not s.any():
        raise NotSplittableError("seed set is empty")
    hood = neighbourhood(adj, s)
    if hood.all():
        raise NotSplittableError("the neighbourhood of the seed is the whole node set")
    int2 = ~hood
    int1 = ~neighbourhood(adj, int2)
    gamma = ~(int1 | int2)
    return np.flatnonzero(int1), np.flatnonzero(int2), np.flatnonzero(gamma)


def _edge_weight_matrix(alpha, pattern):
    """Per-edge alpha on the sparsity ``pattern`` (scalar or symmetric sparse)."""
    if np.isscalar(alpha):
        a = float(alpha)
        if not 0.0 <= a <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        out = pattern.astype(float) * a
        return out.tocsr()
    W = sp.csr_matrix(alpha, dtype=float)
    if (W != W.T).nnz:
        raise ValueError("alpha must be symmetric")
    if W.nnz and (W.data.min() < 0 or W.data.max() > 1):
        raise ValueError("alpha must lie in [0, 1]")
    return W.multiply(pattern).tocsr()


def split_two(A, B, int1, int2, gamma, alpha=0.5, beta=0.5):
    """Split a pencil across the separator ``gamma`` (two-cell algorithm).

    Couplings touching an interior are copied to that side.  Off-diagonal
    couplings inside ``gamma`` are weighted by ``alpha`` and ``1 - alpha``.
    A diagonal entry on ``gamma`` is shared in proportion to the off-diagonal
    mass ``s_i`` each side received.  Masses on ``gamma`` are split by
    ``beta`` and ``1 - beta``.

    Parameters
    ----------
    A, B
        Sparse matrix and diagonal (vector) of the pencil, or a
        :class:`SparsePencil` as ``A`` with ``B=None``.
    alpha
        Scalar or symmetric sparse matrix of edge weights in [0, 1].
    beta
        Scalar or length-N vector in (0, 1).

    Returns
    -------
    tuple of SubdomainSplit
        Cell 1 on ``int1 | gamma`` and cell 2 on ``int2 | gamma``; ``nodes``
        index the rows of ``A``.
    """
    if isinstance(A, SparsePencil):
        A, B = A.A, A.B if B is None else B
    A = sp.csr_matrix(A, dtype=float)
    n = A.shape[0]
    B = np.asarray(B, dtype=float)
    i1, i2, g = (_mask(x, n) for x in (int1, int2, gamma))
    if np.any((i1 & i2) | (i1 & g) | (i2 & g)) or not np.all(i1 | i2 | g):
        raise ValueError("int1, int2 and gamma must partition the node set")
    coo = sp.coo_matrix(A)
    r, c, v = coo.row, coo.col, coo.data
    if np.any(v[(i1[r] & i2[c]) | (i2[r] & i1[c])] != 0):
        raise ValueError("gamma does not separate int1 from int2")

    beta_v = np.broadcast_to(np.asarray(beta, dtype=float), (n,))
    if np.any((beta_v[g] <= 0) | (beta_v[g] >= 1)):
        raise ValueError("beta must lie strictly inside (0, 1)")

    offd = r != c
    gg = g[r] & g[c] & offd
    pattern = sp.csr_matrix((np.ones(gg.sum()), (r[gg], c[gg])), shape=(n, n))
    W = _edge_weight_matrix(alpha, pattern)
    w_gg = np.asarray(W[r[gg], c[gg]]).ravel() if gg.any() else np.zeros(0)

    # Off-diagonal values per side.
    v1 = np.where(i1[r] | i1[c], v, 0.0)
    v2 = np.where(i2[r] | i2[c], v, 0.0)
    v1[gg] = w_gg * v[gg]
    v2[gg] = (1.0 - w_gg) * v[gg]
    diag = ~offd
    v1[diag & i1[r]] = v[diag & i1[r]]
    v2[diag & i2[r]] = v[diag & i2[r]]

    # Diagonal entries on gamma, shared in proportion to s_i.
    s1 = np.bincount(r[offd], weights=np.abs(v1[offd]), minlength=n)
    s2 = np.bincount(r[offd], weights=np.abs(v2[offd]), minlength=n)
    akk = A.diagonal()
    tot = s1 + s2
    bad = g & (tot == 0) & (akk != 0)
    if bad.any():
        raise DegenerateRowError(f"interface rows {np.flatnonzero(bad).tolist()} have no off-diagonal coupling")
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(tot > 0, s1 / tot, 0.5)
    dg = diag & g[r]
    v1[dg] = akk[r[dg]] * f1[r[dg]]
    v2[dg] = akk[r[dg]] * (1.0 - f1[r[dg]])

    out = []
    for interior, vals, bfac in ((i1, v1, beta_v), (i2, v2, 1.0 - beta_v)):
        nodes = np.flatnonzero(interior | g)
        loc = np.full(n, -1)
        loc[nodes] = np.arange(nodes.size)
        keep = (loc[r] >= 0) & (loc[c] >= 0) & (vals != 0)
        Ai = sp.csr_matrix((vals[keep], (loc[r[keep]], loc[c[keep]])), shape=(nodes.size, nodes.size))
        Bi = np.where(g[nodes], bfac[nodes] * B[nodes], B[nodes])
        out.append(SubdomainSplit(Ai, Bi, nodes, alpha if np.isscalar(alpha) else None, beta if np.isscalar(beta) else None))
    return out[0], out[1]


def _bfs_order(adj, start):
    """Breadth-first visiting order and levels from ``start`` (connected part only)."""
    n = adj.shape[0]
    level = np.full(n, -1)
    level[start] = 0
    order = [start]
    q = deque([start])
    indptr, indices = adj.indptr, adj.indices
    while q:
        k = q.popleft()
        for l in indices[indptr[k]:indptr[k + 1]]:
            if level[l] < 0:
                level[l] = level[k] + 1
                order.append(l)
                q.append(l)
    return np.asarray(order), level


def _bfs_seed(adj):
    """Half of the nodes in BFS order from a pseudo-peripheral node."""
    n = adj.shape[0]
    order, level = _bfs_order(adj, 0)
    start = int(order[-1])
    for _ in range(4):
        order, level = _bfs_order(adj, start)
        far = int(order[-1])
        if level[far] <= level[start] or far == start:
            break
        start = far
    if order.size < n:
        # disconnected: seed with one whole component
        return _mask(order, n)
    # whole BFS levels before the median node; the median level becomes the separator
    cut_level = level[order[(n - 1) // 2]]
    seed = (level >= 0) & (level < max(cut_level, 1))
    return seed


def _coordinate_seed(coords):
    """Nodes strictly below the midpoint of the longest coordinate extent."""
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    axis = int(np.argmax(hi - lo))
    mid = (lo[axis] + hi[axis]) // 2
    return coords[:, axis] < mid


def _try_split(A_loc, coords, strategy):
    adj = adjacency(A_loc)
    n = adj.shape[0]
    seeds = []
    if strategy in ("auto", "coordinate") and coords is not None:
        seeds.append(_coordinate_seed(coords))
    if strategy in ("auto", "bfs") or not seeds:
        seeds.append(_bfs_seed(adj))
    for seed in seeds:
        if not seed.any():
            continue
        try:
            int1, int2, gamma = find_separator(A_loc, seed)
        except NotSplittableError:
            continue
        if int1.size and int2.size and int1.size + gamma.size < n and int2.size + gamma.size < n:
            return int1, int2, gamma
    return None


def divide_and_conquer(pencil, target_cell_size, *, alpha=0.5, beta=0.5, seed_strategy="auto"):
    """Repeated two-way splitting until every cell is at most ``target_cell_size``.

    Parameters
    ----------
    seed_strategy
        ``"coordinate"`` bisects the longest grid extent, ``"bfs"`` takes
        whole breadth-first levels from a pseudo-peripheral node up to half
        the cell.  ``"auto"`` tries the coordinate seed first when grid
        coordinates are available.

    Returns
    -------
    (Partition, list of SubdomainSplit)
        Cells are ordered by their smallest node.  Unsplittable cells larger
        than the target are returned unchanged.
    """
    if seed_strategy not in ("auto", "coordinate", "bfs"):
        raise ConfigError(f"unknown seed strategy {seed_strategy!r}")
    if isinstance(pencil, SparsePencil):
        A, B, coords = pencil.A, pencil.B, pencil.coords
    else:
        A, B = pencil
        A, coords = sp.csr_matrix(A), None
    n = A.shape[0]
    work = [SubdomainSplit(A, np.asarray(B, float), np.arange(n), alpha, beta)]
    frozen = []
    while work:
        work.sort(key=lambda c: (-c.N, int(c.nodes[0])))
        cell = work.pop(0)
        if cell.N <= target_cell_size:
            frozen.append(cell)
            continue
        local_coords = None if coords is None else coords[cell.nodes]
        found = _try_split(cell.A, local_coords, seed_strategy)
        if found is None:
            frozen.append(cell)
            continue
        c1, c2 = split_two(cell.A, cell.B, *found, alpha=alpha, beta=beta)
        for c in (c1, c2):
            c.nodes = cell.nodes[c.nodes]
            work.append(c)
    frozen.sort(key=lambda c: int(c.nodes[0]))
    return Partition(n, [c.nodes for c in frozen]), frozen


def regular_partition(pencil, cells_per_axis, *, beta=None):
    """Regular Cartesian cells with equal sharing of interface couplings.

    Every coupling between two nodes is divided equally among the cells
    containing both nodes and every mass equally among the cells containing
    the node, so interface off-diagonals and masses are halved (quartered at
    2D corners) while interior entries keep weight 1.  Diagonal entries keep
    each cell's local row sum proportional to the node's share.

    ``cells_per_axis`` is an int or one int per axis; ``dims - 1`` must be
    divisible by it on every axis.
    """
    if pencil.coords is None or pencil.dims is None:
        raise ConfigError("regular_partition needs a grid pencil")
    if beta is not None and beta != 0.5:
        raise ConfigError("regular_partition uses equal mass sharing (beta = 1/2)")
    dims = np.asarray(pencil.dims)
    cpa = np.broadcast_to(np.asarray(cells_per_axis, dtype=int), dims.shape)
    if np.any(cpa < 1) or np.any((dims - 1) % cpa):
        raise ConfigError(f"cells per axis {cpa.tolist()} do not divide dims-1 = {(dims - 1).tolist()}")
    width = (dims - 1) // cpa
    if np.any(width < 2):
        raise ConfigError("each cell needs at least one interior node per axis")
    coords = pencil.coords
    n = pencil.N
    # cell index ranges per axis for every node: a node on a cell wall belongs to both
    lo_idx = np.maximum((coords - 1) // width, 0)
    hi_idx = np.minimum(coords // width, cpa - 1)
    cells = []
    strides = np.cumprod(np.concatenate([[1], cpa[::-1][:-1]]))[::-1]
    members = [[] for _ in range(int(np.prod(cpa)))]
    for multi in np.ndindex(*cpa):
        multi = np.asarray(multi)
        inside = np.all((lo_idx <= multi) & (hi_idx >= multi), axis=1)
        members[int(multi @ strides)] = np.flatnonzero(inside)
    cells = members
    count = np.zeros(n, dtype=int)
    for c in cells:
        count[c] += 1

    A = pencil.A.tocoo()
    r, cidx, v = A.row, A.col, A.data
    rowsum = np.asarray(pencil.A.sum(axis=1)).ravel()
    splits = []
    for nodes in cells:
        loc = np.full(n, -1)
        loc[nodes] = np.arange(nodes.size)
        keep = (loc[r] >= 0) & (loc[cidx] >= 0) & (r != cidx)
        rr, cc, vv = r[keep], cidx[keep], v[keep]
        # number of cells containing both endpoints of each edge
        shared = _edge_share_count(rr, cc, lo_idx, hi_idx)
        vv = vv / shared
        off = np.bincount(loc[rr], weights=vv, minlength=nodes.size)
        dg = -off + rowsum[nodes] / count[nodes]
        Ai = sp.csr_matrix(
            (np.concatenate([vv, dg]), (np.concatenate([loc[rr], np.arange(nodes.size)]), np.concatenate([loc[cc], np.arange(nodes.size)]))),
            shape=(nodes.size, nodes.size),
        )
        Bi = pencil.B[nodes] / count[nodes]
        splits.append(SubdomainSplit(Ai, Bi, nodes, 0.5, 0.5))
    return Partition(n, cells), splits


def _edge_share_count(r, c, lo_idx, hi_idx):
    lo = np.maximum(lo_idx[r], lo_idx[c])
    hi = np.minimum(hi_idx[r], hi_idx[c])
    return np.prod(np.maximum(hi - lo + 1, 0), axis=1).astype(float)


def reassemble(splits, n):
    """Sum of ``P_i A_i P_i^T`` and of ``P_i B_i P_i^T`` (as a vector)."""
    rows, cols, vals = [], [], []
    Bsum = np.zeros(n)
    for s in splits:
        coo = sp.coo_matrix(s.A)
        rows.append(s.nodes[coo.row])
        cols.append(s.nodes[coo.col])
        vals.append(coo.data)
        np.add.at(Bsum, s.nodes, s.B)
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return A, Bsum


def _arms(partition):
    """Interfaces that carry at least one non-corner node."""
    corner = np.zeros(partition.n_nodes, dtype=bool)
    corner[partition.corner_set] = True
    return {key for key, nodes in partition.interfaces.items() if np.any(~corner[nodes])}


def remove_corner_set(pencil, partition, splits):
    """Replace each corner node by one hanging copy per interface through it.

    A corner node ``k`` lies in three or more cells.  Every interface
    ``Gamma_ij`` through ``k`` that also carries non-corner nodes (an *arm*)
    gets a hanging copy ``k_ij`` owned by cells ``i`` and ``j`` only.  Cell
    ``i`` shares its local row and mass of ``k`` equally among its arm
    copies; couplings between two corner nodes go to the copies on their
    common arms, and the copy diagonals keep the local row sums in
    proportion.  On a regular 2D grid each copy carries half the
    interface-tangential coupling and the full one-sided normal coupling of
    the corner, scaled by 1/2 so that the global mass at ``k`` is conserved
    and the modified split remains an exact splitting of ``A'``.

    Returns
    -------
    (SparsePencil, Partition, list of SubdomainSplit)
        The modified pencil (``parent`` maps new rows to old rows), the
        corner-free partition with ``hanging = {k: [rows]}`` and the new
        splits.  Inputs are returned unchanged when there is no corner.
    """
    corners = partition.corner_set
    if corners.size == 0:
        return pencil, partition, splits
    n = partition.n_nodes
    is_corner = np.zeros(n, dtype=bool)
    is_corner[corners] = True
    arm_keys = _arms(partition)
    members = partition.membership

    arms = {}  # (cell, corner) -> sorted neighbour cells along arms
    for k in corners:
        owners = members[int(k)]
        for i in owners:
            js = sorted(j for j in owners if j != i and (min(i, j), max(i, j)) in arm_keys)
            if not js:
                raise CornerSetError(f"corner node {int(k)} has no interface arm in cell {i}")
            arms[(i, int(k))] = js

    # new numbering: non-corner nodes keep their order, then hanging copies
    new_index = np.full(n, -1)
    keep = np.flatnonzero(~is_corner)
    new_index[keep] = np.arange(keep.size)
    hang = {}
    hanging = {}
    parent = list(keep)
    nxt = keep.size
    for k in corners:
        owners = members[int(k)]
        for i, j in combinations(sorted(owners), 2):
            if (i, j) in arm_keys:
                hang[(int(k), i, j)] = nxt
                hanging.setdefault(int(k), []).append(nxt)
                parent.append(int(k))
                nxt += 1
    n_new = nxt

    def copy_of(k, i, j):
        return hang[(int(k), min(i, j), max(i, j))]

    new_splits = []
    for i, s in enumerate(splits):
        coo = sp.coo_matrix(s.A)
        gr, gc, v = s.nodes[coo.row], s.nodes[coo.col], coo.data
        rows, cols, vals = [], [], []
        plain = ~is_corner[gr] & ~is_corner[gc]
        rows.append(new_index[gr[plain]])
        cols.append(new_index[gc[plain]])
        vals.append(v[plain])
        # entries with at least one corner endpoint, handled row-wise (k corner)
        diag_acc = {}
        rowsum = {}
        for a, b, val in zip(gr[~plain], gc[~plain], v[~plain]):
            a, b = int(a), int(b)
            if is_corner[a]:
                rowsum[a] = rowsum.get(a, 0.0) + val
            if a == b:
                continue
            if is_corner[a] and not is_corner[b]:
                js = arms[(i, a)]
                for j in js:
                    ca = copy_of(a, i, j)
                    rows.append([ca]); cols.append([new_index[b]]); vals.append([val / len(js)])
                    diag_acc[ca] = diag_acc.get(ca, 0.0) + val / len(js)
            elif is_corner[b] and not is_corner[a]:
                js = arms[(i, b)]
                for j in js:
                    rows.append([new_index[a]]); cols.append([copy_of(b, i, j)]); vals.append([val / len(js)])
            else:
                common = sorted(set(arms[(i, a)]) & set(arms[(i, b)]))
                if not common:
                    raise CornerSetError(f"corner nodes {a} and {b} share no interface arm in cell {i}")
                for j in common:
                    ca, cb = copy_of(a, i, j), copy_of(b, i, j)
                    rows.append([ca]); cols.append([cb]); vals.append([val / len(common)])
                    diag_acc[ca] = diag_acc.get(ca, 0.0) + val / len(common)
        node_corner = s.nodes[is_corner[s.nodes]]
        loc_b = dict(zip(s.nodes.tolist(), s.B.tolist()))
        Bnew = {int(new_index[k]): loc_b[int(k)] for k in s.nodes[~is_corner[s.nodes]]}
        for k in node_corner:
            k = int(k)
            js = arms[(i, k)]
            for j in js:
                ck = copy_of(k, i, j)
                rows.append([ck]); cols.append([ck])
                vals.append([-diag_acc.get(ck, 0.0) + rowsum.get(k, 0.0) / len(js)])
                Bnew[ck] = loc_b[k] / len(js)
        rows = np.concatenate([np.asarray(x, dtype=np.int64) for x in rows])
        cols = np.concatenate([np.asarray(x, dtype=np.int64) for x in cols])
        vals = np.concatenate([np.asarray(x, dtype=float) for x in vals])
        nodes = np.asarray(sorted(Bnew))
        loc = np.full(n_new, -1)
        loc[nodes] = np.arange(nodes.size)
        Ai = sp.csr_matrix((vals, (loc[rows], loc[cols])), shape=(nodes.size, nodes.size))
        Bi = np.asarray([Bnew[k] for k in nodes])
        new_splits.append(SubdomainSplit(Ai, Bi, nodes, s.alpha, s.beta))

    A_new, B_new = reassemble(new_splits, n_new)
    parent = np.asarray(parent, dtype=np.int64)
    coords = None if pencil.coords is None else pencil.coords[parent]
    new_pencil = SparsePencil(A_new, B_new, dims=pencil.dims, h=pencil.h, coords=coords, parent=parent)
    ports = {i: new_index[p] for i, p in partition.ports.items()}
    new_partition = Partition(n_new, [s.nodes for s in new_splits], hanging=hanging, ports=ports)
    return new_pencil, new_partition, new_splits


def carry_vector(vec, new_pencil, new_partition, *, strict=True):
    """Map a vector on the pre-removal pencil onto the corner-free pencil.

    Non-corner rows are copied and hanging rows receive zero.  With
    ``strict`` a nonzero value at a removed corner raises ``CornerSetError``.
    """
    vec = np.asarray(vec, dtype=float)
    if new_pencil.parent is None or not new_partition.hanging:
        return vec.copy()
    if strict:
        lost = [k for k in new_partition.hanging if vec[k] != 0]
        if lost:
            raise CornerSetError(f"vector is nonzero at removed corner nodes {lost}")
    out = vec[new_pencil.parent].copy()
    for rows in new_partition.hanging.values():
        out[rows] = 0.0
    return out
