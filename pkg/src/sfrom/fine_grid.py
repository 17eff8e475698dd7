"""Fine-grid pencil assembly for the scalar acoustic wave equation.

The operator is the conservative second-order stencil

    (A u)_k = sum_l sigma_kl (u_l - u_k) / h^2,

with sigma_kl the arithmetic (or optionally harmonic) mean of the node
values on each edge and the
Dirichlet boundary nodes eliminated from the unknowns.  Both A and B are
normalised per unit cell volume (the common factor h^d is dropped), so the
pencil eigenvalues, B^{-1}A and all time traces are unchanged by it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError

__all__ = [
    "GridMedium",
    "SparsePencil",
    "SourceReceiver",
    "assemble",
    "assemble_1d",
    "assemble_nd",
    "make_source",
    "medium_from_descriptor",
]


@dataclass
class GridMedium:
    """Node-based medium on a uniform Cartesian grid.

    ``dims`` counts grid nodes per axis *including* the Dirichlet end nodes,
    so a 1D grid with ``dims=(2n+1,)`` has ``2n-1`` unknowns.  ``sigma`` and
    ``rho`` are given on the full grid (shape ``dims``).
    """

    dims: tuple
    h: float
    sigma: np.ndarray
    rho: np.ndarray | None = None
    averaging: str = "arithmetic"

    def __post_init__(self):
        if self.averaging not in ("arithmetic", "harmonic"):
            raise ConfigError(f"unknown edge averaging {self.averaging!r}")
        self.dims = tuple(int(n) for n in self.dims)
        if not 1 <= len(self.dims) <= 3:
            raise ConfigError(f"grid must have 1 to 3 axes, got {len(self.dims)}")
        if not self.h > 0:
            raise ConfigError(f"grid step must be positive, got {self.h}")
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), self.dims).copy()
        if self.rho is None:
            self.rho = np.ones(self.dims)
        self.rho = np.broadcast_to(np.asarray(self.rho, dtype=float), self.dims).copy()
        if np.any(self.sigma < 0) or not np.all(np.isfinite(self.sigma)):
            raise ConfigError("sigma must be finite and nonnegative")
        if np.any(self.rho <= 0) or not np.all(np.isfinite(self.rho)):
            raise ConfigError("rho must be finite and positive")

    @classmethod
    def homogeneous(cls, dims, h, sigma=1.0, rho=1.0):
        return cls(tuple(dims), h, np.full(tuple(dims), float(sigma)), np.full(tuple(dims), float(rho)))

    @property
    def ndim(self):
        return len(self.dims)

    def node_positions(self):
        """Physical coordinates of every full-grid node, shape ``dims + (ndim,)``."""
        grids = np.meshgrid(*[np.arange(n) * self.h for n in self.dims], indexing="ij")
        return np.stack(grids, axis=-1)


@dataclass
class SparsePencil:
    """The pair (A, B): sparse symmetric A <= 0 and diagonal B > 0.

    ``B`` is stored as the vector of diagonal entries.  ``coords`` holds the
    full-grid multi-index of every unknown when the pencil comes from a grid;
    ``parent`` maps rows of a modified pencil (hanging nodes) back to rows of
    the pencil it was derived from.
    """

    A: sp.csr_matrix
    B: np.ndarray
    dims: tuple | None = None
    h: float | None = None
    coords: np.ndarray | None = None
    parent: np.ndarray | None = None
    _lookup: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.A = sp.csr_matrix(self.A, dtype=float)
        self.A.eliminate_zeros()
        self.A.sort_indices()
        self.B = np.asarray(self.B, dtype=float).ravel()
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape != (n,):
            raise ValueError("A must be square and B must match its size")
        if np.any(self.B <= 0):
            raise ValueError("mass matrix B must have strictly positive diagonal")

    @property
    def N(self):
        return self.A.shape[0]

    @property
    def Bmat(self):
        return sp.diags(self.B, format="csr")

    @property
    def ndim(self):
        return None if self.dims is None else len(self.dims)

    def index_of(self, coord):
        """Row index of the unknown at full-grid multi-index ``coord``."""
        if self.coords is None:
            raise ValueError("pencil carries no grid coordinates")
        if self._lookup is None:
            lookup = {}
            for row, c in enumerate(map(tuple, self.coords)):
                lookup.setdefault(c, []).append(row)
            self._lookup = lookup
        rows = self._lookup.get(tuple(int(c) for c in np.atleast_1d(coord)))
        if not rows:
            raise ValueError(f"grid index {tuple(coord)} is not an unknown of this pencil")
        if len(rows) > 1:
            raise ValueError(f"grid index {tuple(coord)} is shared by hanging copies {rows}")
        return rows[0]

    def positions(self):
        """Physical coordinates of the unknowns, shape (N, ndim)."""
        if self.coords is None or self.h is None:
            raise ValueError("pencil carries no grid coordinates")
        return self.coords * self.h

    def nearest_index(self, point):
        """Full-grid multi-index nearest to a physical ``point``."""
        if self.h is None:
            raise ValueError("pencil carries no grid step")
        return tuple(int(round(x / self.h)) for x in np.atleast_1d(point))


@dataclass
class SourceReceiver:
    """A source (or receiver) weight vector and its support."""

    vector: np.ndarray
    support: np.ndarray

    @classmethod
    def from_vector(cls, vector):
        vector = np.asarray(vector, dtype=float)
        return cls(vector, np.flatnonzero(vector))


def _edge_weights(sigma, h, axis, averaging="arithmetic"):
    """Edge coefficients along ``axis`` over the interior cross-section."""
    d = sigma.ndim
    other = [slice(1, n - 1) for n in sigma.shape]
    lo, hi = list(other), list(other)
    lo[axis] = slice(0, sigma.shape[axis] - 1)
    hi[axis] = slice(1, sigma.shape[axis])
    a, b = sigma[tuple(lo)], sigma[tuple(hi)]
    if averaging == "harmonic":
        with np.errstate(divide="ignore", invalid="ignore"):
            mean = np.where(a * b > 0, 2.0 * a * b / (a + b), 0.0)
    else:
        mean = 0.5 * (a + b)
    w = mean / h**2
    assert w.ndim == d
    return w


def _assemble(medium):
    dims = np.asarray(medium.dims)
    if np.any(dims < 3):
        raise ConfigError(f"every axis needs at least 3 nodes (one unknown), got dims={medium.dims}")
    inner = tuple(int(n) for n in dims - 2)
    n_unknowns = int(np.prod(inner))
    index = np.arange(n_unknowns).reshape(inner)
    diag = np.zeros(inner)
    rows, cols, vals = [], [], []
    for axis in range(medium.ndim):
        w = np.moveaxis(_edge_weights(medium.sigma, medium.h, axis, medium.averaging), axis, 0)
        dg = np.moveaxis(diag, axis, 0)
        dg -= w[:-1] + w[1:]
        idx = np.moveaxis(index, axis, 0)
        r, c, v = idx[:-1].ravel(), idx[1:].ravel(), w[1:-1].ravel()
        rows += [r, c]
        cols += [c, r]
        vals += [v, v]
    rows.append(index.ravel())
    cols.append(index.ravel())
    vals.append(diag.ravel())
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_unknowns, n_unknowns),
    )
    interior = tuple(slice(1, n - 1) for n in medium.dims)
    B = medium.rho[interior].ravel()
    coords = np.indices(inner).reshape(medium.ndim, -1).T + 1
    return SparsePencil(A, B, dims=medium.dims, h=medium.h, coords=coords)


def assemble_1d(medium):
    """Three-point conservative stencil on ``dims = (2n+1,)`` with Dirichlet ends.

    >>> m = GridMedium.homogeneous((5,), 0.5)
    >>> assemble_1d(m).A.toarray()
    array([[-8.,  4.,  0.],
           [ 4., -8.,  4.],
           [ 0.,  4., -8.]])
    """
    if medium.ndim != 1:
        raise ConfigError("assemble_1d needs a 1D medium")
    return _assemble(medium)


def assemble_nd(medium):
    """5-point (2D) or 7-point (3D) conservative stencil with Dirichlet walls."""
    if medium.ndim not in (2, 3):
        raise ConfigError("assemble_nd needs a 2D or 3D medium")
    return _assemble(medium)


def assemble(medium):
    return assemble_1d(medium) if medium.ndim == 1 else assemble_nd(medium)


def make_source(pencil, location, kind="delta", *, mass_scaled=False, nodes=None, width=None):
    """Build a source or receiver vector.

    Parameters
    ----------
    location
        Row index (int) or full-grid multi-index (tuple) of the centre node.
    kind
        ``"delta"`` for a unit vector, ``"taper"`` for Gaussian weights over
        ``nodes`` (e.g. one skeleton face) centred at ``location`` with
        standard deviation ``width`` (physical units); taper weights sum to 1.
    mass_scaled
        Scale a delta by ``B_kk`` so that ``B^{-1} g`` is a unit impulse.
    """
    if isinstance(location, (int, np.integer)):
        k = int(location)
        if not 0 <= k < pencil.N:
            raise ValueError(f"node {k} outside the grid (N={pencil.N})")
    else:
        try:
            k = pencil.index_of(location)
        except ValueError as exc:
            raise ValueError(f"location {tuple(location)} outside the grid") from exc
    g = np.zeros(pencil.N)
    if kind == "delta":
        g[k] = pencil.B[k] if mass_scaled else 1.0
    elif kind == "taper":
        if nodes is None or width is None:
            raise ValueError("taper sources need the face nodes and a width")
        nodes = np.asarray(nodes)
        dist = np.linalg.norm(pencil.positions()[nodes] - pencil.positions()[k], axis=1)
        w = np.exp(-0.5 * (dist / width) ** 2)
        g[nodes] = w / w.sum()
    else:
        raise ValueError(f"unknown source kind {kind!r}")
    return SourceReceiver.from_vector(g)


def _field_from_spec(spec, medium_dims, h, base_dir, name):
    kind = spec.get("kind", "homogeneous")
    default = 1.0
    if kind == "homogeneous":
        return np.full(medium_dims, float(spec.get(name, default)))
    pos = np.stack(np.meshgrid(*[np.arange(n) * h for n in medium_dims], indexing="ij"), axis=-1)
    if kind == "blocks":
        out = np.full(medium_dims, float(spec.get(name, default)))
        for block in spec.get("blocks", []):
            lo, hi = np.asarray(block["lo"], float), np.asarray(block["hi"], float)
            inside = np.all((pos >= lo - 1e-12) & (pos <= hi + 1e-12), axis=-1)
            out[inside] = float(block[name]) if name in block else out[inside]
        return out
    if kind == "smooth":
        base = float(spec.get(name, default))
        amp = float(spec.get("amplitude", 0.5)) if name == "sigma" else 0.0
        centre = np.asarray(spec.get("center", [(n - 1) * h / 2 for n in medium_dims]), float)
        radius = float(spec.get("radius", 1.0))
        r2 = np.sum((pos - centre) ** 2, axis=-1)
        return base * (1.0 + amp * np.exp(-0.5 * r2 / radius**2))
    if kind == "file":
        if name != "sigma":
            return np.full(medium_dims, float(spec.get(name, default)))
        path = spec["file"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        data = np.fromfile(path, dtype="<f8")
        if data.size != int(np.prod(medium_dims)):
            raise ConfigError(f"{path}: expected {int(np.prod(medium_dims))} values, found {data.size}")
        return data.reshape(medium_dims)
    raise ConfigError(f"unknown medium kind {kind!r}")


def medium_from_descriptor(desc, base_dir="."):
    """Build a :class:`GridMedium` from a JSON descriptor (dict or path).

    Keys: ``dims``, ``h`` and ``kind`` (``homogeneous``, ``blocks``,
    ``smooth`` or ``file``) with kind-specific fields.  A ``file`` medium reads
    one little-endian float64 sigma value per node in row-major order.
    """
    if isinstance(desc, (str, os.PathLike)):
        base_dir = os.path.dirname(os.fspath(desc)) or "."
        with open(desc) as fh:
            desc = json.load(fh)
    try:
        dims = tuple(int(n) for n in desc["dims"])
        h = float(desc["h"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"medium descriptor needs integer 'dims' and float 'h': {exc}") from exc
    sigma = _field_from_spec(desc, dims, h, base_dir, "sigma")
    rho = _field_from_spec(desc, dims, h, base_dir, "rho") if desc.get("kind") != "smooth" else np.full(dims, float(desc.get("rho", 1.0)))
    return GridMedium(dims, h, sigma, rho, averaging=desc.get("averaging", "arithmetic"))
