"""On-line stage: coupled S-fraction ROMs stepped with leapfrog.

Unknowns are the shared interface values ``u_ij`` (one copy per interface,
so the conjugation condition holds by construction) and the hidden layers
``U^2 .. U^m`` of every cell.  The semi-discrete system is

    U^k'' = Lhat^k [L^k (U^{k+1} - U^k) - L^{k-1} (U^k - U^{k-1})],  k >= 2,
    u_ij''  = M_ij [sum_c P_c^T L^1_c (U^2_c - U^1_c) + w(t) g_ij],

with ``M_ij = (sum_c (P_c^T Lhat^1_c P_c)^{-1})^{-1}`` over the cells ``c``
sharing the interface.  In matrix form ``D x'' = -K x + w(t) E``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InstabilityError, NumericalError
from .romgen import check_skeleton_support

__all__ = [
    "CornerFix",
    "MultiscaleSystem",
    "flops_per_step",
    "WaveState",
    "Trace",
    "assemble_system",
    "estimate_dt",
    "initial_state",
    "step",
    "corner_correct",
    "run",
    "energy",
    "frequency_map",
]


@dataclass
class CornerFix:
    """Hanging copies of one removed corner node."""

    parent: int
    copies: list  # (interface key, row within the interface, mass b_ll)
    mass: float  # b_kk of the parent node


@dataclass
class MultiscaleSystem:
    """Assembled coupled ROMs.

    ``keys`` fixes the order of the interface unknowns; ``iface[key]`` is
    the slice of ``u~`` for that interface and ``owners[key]`` lists
    ``(cell, slice within the cell's reduced boundary)``.  Hidden layers of
    cell ``i`` occupy ``layers[i]`` in the state vector after all interfaces.
    """

    roms: list
    keys: list
    iface: dict
    owners: dict
    M: dict
    Mass: dict
    layers: list
    n_state: int
    source: np.ndarray
    receiver: np.ndarray
    bases: dict = field(default_factory=dict)
    corner_fixup: list = field(default_factory=list)

    @property
    def n_iface(self):
        return self.layers[0].start if self.layers else self.n_state

    @property
    def dof(self):
        """Reduced degrees of freedom ``sum_i m_i K_i``."""
        return sum(r.m * r.K for r in self.roms)


@dataclass
class WaveState:
    """Leapfrog state at time levels ``n`` (``x``) and ``n - 1`` (``x_prev``)."""

    x: np.ndarray
    x_prev: np.ndarray
    n: int
    dt: float

    @property
    def t(self):
        return self.n * self.dt

    def copy(self):
        return WaveState(self.x.copy(), self.x_prev.copy(), self.n, self.dt)


@dataclass
class Trace:
    """Receiver samples on the uniform grid ``times``."""

    times: np.ndarray
    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t,value\n")
            for t, v in zip(self.times, self.values):
                fh.write(f"{float(t)!r},{float(v)!r}\n")

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1])


def assemble_system(partition, roms, basis, source=None, receiver=None, *, pencil=None):
    """Couple the cell ROMs through their shared interface unknowns.

    Parameters
    ----------
    partition, roms, basis
        Corner-free partition, one ROM per cell and the interface bases
        the ROMs were built with.
    source, receiver
        Full-length vectors supported on the skeleton (or None).
    pencil
        The pencil of the partition; needed only for corner correction
        (hanging masses).
    """
    keys = []
    owners = {}
    for rom in roms:
        for key, sl in rom.interfaces:
            if key not in owners:
                keys.append(key)
                owners[key] = []
            owners[key].append((rom.cell, sl))
    keys.sort(key=lambda k: (k[1] < 0, k))
    iface, off = {}, 0
    for key in keys:
        sizes = {sl.stop - sl.start for _, sl in owners[key]}
        if len(sizes) != 1 or sizes.pop() != basis.size(key):
            raise ValueError(f"interface {key}: neighbour cells use different bases")
        n = basis.size(key)
        iface[key] = slice(off, off + n)
        off += n
    M, Mass = {}, {}
    for rom in roms:
        L1 = rom.Lhat[0]
        mask = np.zeros_like(L1, dtype=bool)
        for _, sl in rom.interfaces:
            mask[sl, sl] = True
        scale = np.abs(L1).max()
        if np.abs(L1[~mask]).max(initial=0.0) > 1e-8 * scale:
            raise NumericalError(
                f"cell {rom.cell}: first-layer block Lhat^1 couples different interfaces; "
                "build the Krylov space with the zero-power block"
            )
    for key in keys:
        mass = sum(np.linalg.inv(roms[c].Lhat[0][sl, sl]) for c, sl in owners[key])
        Mass[key] = 0.5 * (mass + mass.T)
        M[key] = np.linalg.inv(Mass[key])
        M[key] = 0.5 * (M[key] + M[key].T)
    layers = []
    for rom in roms:
        n = (rom.m - 1) * rom.K
        layers.append(slice(off, off + n))
        off += n

    def project(vec):
        out = np.zeros(iface[keys[-1]].stop if keys else 0)
        if vec is None:
            return out
        check_skeleton_support(vec, partition)
        for key in keys:
            nodes = partition.ports[key[0]] if key[1] < 0 else partition.interfaces[key]
            out[iface[key]] = basis.S[key].T @ np.asarray(vec, float)[nodes]
        return out

    system = MultiscaleSystem(
        roms, keys, iface, owners, M, Mass, layers, off, project(source), project(receiver), dict(basis.S)
    )
    if partition.hanging:
        if pencil is None:
            raise ValueError("corner correction data needs the pencil with hanging nodes")
        system.corner_fixup = _corner_fixup(partition, pencil)
    return system


def _corner_fixup(partition, pencil):
    where = {}
    for key, nodes in partition.interfaces.items():
        for r, k in enumerate(nodes):
            where[int(k)] = (key, r)
    fixes = []
    for parent, rows in sorted(partition.hanging.items()):
        copies = [(where[int(l)][0], where[int(l)][1], float(pencil.B[l])) for l in rows]
        fixes.append(CornerFix(int(parent), copies, float(sum(c[2] for c in copies))))
    return fixes


def initial_state(system, dt):
    z = np.zeros(system.n_state)
    return WaveState(z, z.copy(), 0, float(dt))


def _cell_layers(system, i, x):
    """List ``[U^1, ..., U^m, U^{m+1}=0]`` of cell ``i`` from state ``x``."""
    rom = system.roms[i]
    U1 = np.zeros(rom.K)
    for key, sl in rom.interfaces:
        U1[sl] = x[system.iface[key]]
    hidden = x[system.layers[i]].reshape(rom.m - 1, rom.K) if rom.m > 1 else np.zeros((0, rom.K))
    return [U1, *hidden, np.zeros(rom.K)]


def _flux(system, i, x):
    """Phase 2.1: first-layer flux ``L^1 (U^2 - U^1)`` of cell ``i``."""
    rom = system.roms[i]
    U = _cell_layers(system, i, x)
    return rom.L[0] @ (U[1] - U[0])


def _interior_accel(system, i, x):
    """Phase 2.2: accelerations of the hidden layers of cell ``i``."""
    rom = system.roms[i]
    U = _cell_layers(system, i, x)
    out = np.empty((rom.m - 1, rom.K))
    for k in range(1, rom.m):
        rhs = rom.L[k] @ (U[k + 1] - U[k]) - rom.L[k - 1] @ (U[k] - U[k - 1])
        out[k - 1] = rom.Lhat[k] @ rhs
    return out.ravel()


def _boundary_accel(system, fluxes, w):
    """Phase 2.3: interface accelerations from the published fluxes."""
    out = np.empty(system.n_iface)
    for key in system.keys:
        total = np.zeros(system.iface[key].stop - system.iface[key].start)
        for c, sl in system.owners[key]:
            total += fluxes[c][sl]
        out[system.iface[key]] = system.M[key] @ (total + w * system.source[system.iface[key]])
    return out


def acceleration(system, x, w=0.0, *, threads=1):
    """``x'' = D^{-1}(-K x + w E)`` evaluated through the three step phases."""
    cells = range(len(system.roms))
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as ex:
            fluxes = list(ex.map(lambda i: _flux(system, i, x), cells))
            interior = list(ex.map(lambda i: _interior_accel(system, i, x), cells))
    else:
        fluxes = [_flux(system, i, x) for i in cells]
        interior = [_interior_accel(system, i, x) for i in cells]
    a = np.empty(system.n_state)
    a[: system.n_iface] = _boundary_accel(system, fluxes, w)
    for i in cells:
        a[system.layers[i]] = interior[i]
    return a


def step(system, state, w=0.0, *, threads=1, corner_correction=False):
    """One leapfrog step ``x^{n+1} = 2 x^n - x^{n-1} + dt^2 a(x^n, w(t^n))``."""
    a = acceleration(system, state.x, w, threads=threads)
    x_new = 2.0 * state.x - state.x_prev + state.dt**2 * a
    if not np.all(np.isfinite(x_new)):
        raise InstabilityError(f"non-finite state at step {state.n + 1}", step=state.n + 1)
    new = WaveState(x_new, state.x, state.n + 1, state.dt)
    if corner_correction:
        new = corner_correct(system, new)
    return new


def corner_correct(system, state):
    """Replace hanging-node values by the mass-weighted mean of each corner.

    Applied to both stored time levels.  A no-op without hanging nodes.
    """
    if not system.corner_fixup:
        return state
    out = state.copy()
    for x in (out.x, out.x_prev):
        delta = {}
        for fix in system.corner_fixup:
            vals = [system.bases[key][row] @ x[system.iface[key]] for key, row, _ in fix.copies]
            mean = sum(v * b for v, (_, _, b) in zip(vals, fix.copies)) / fix.mass
            for (key, row, _), v in zip(fix.copies, vals):
                delta.setdefault(key, np.zeros(system.bases[key].shape[0]))[row] += mean - v
        for key, d in delta.items():
            x[system.iface[key]] += system.bases[key].T @ d
    return out


def monolithic(system):
    """Sparse ``(D, K, E)`` of ``D x'' = -K x + w E``."""
    n = system.n_state
    D = sp.lil_matrix((n, n))
    Kmat = sp.lil_matrix((n, n))
    for key in system.keys:
        s = system.iface[key]
        D[s, s] = system.Mass[key]
    for i, rom in enumerate(system.roms):
        # global rows of each layer of cell i
        U1 = np.zeros(rom.K, dtype=np.int64)
        for key, sl in rom.interfaces:
            U1[sl] = np.arange(system.iface[key].start, system.iface[key].stop)
        rows = [U1] + [np.arange(system.layers[i].start + k * rom.K, system.layers[i].start + (k + 1) * rom.K) for k in range(rom.m - 1)]
        for k in range(rom.m):
            if k > 0:
                D[np.ix_(rows[k], rows[k])] = np.linalg.inv(rom.Lhat[k])
            Kmat[np.ix_(rows[k], rows[k])] += rom.L[k] + (rom.L[k - 1] if k > 0 else 0)
            if k + 1 < rom.m:
                Kmat[np.ix_(rows[k], rows[k + 1])] += -rom.L[k]
                Kmat[np.ix_(rows[k + 1], rows[k])] += -rom.L[k]
    E = np.zeros(n)
    E[: system.n_iface] = system.source
    return D.tocsr(), Kmat.tocsr(), E


def energy(system, state, Kmat=None, D=None):
    """Discrete leapfrog energy ``v^T D v / 2 + x^{n}^T K x^{n-1} / 2`` with ``v = (x^n - x^{n-1}) / dt``."""
    if Kmat is None or D is None:
        D, Kmat, _ = monolithic(system)
    v = (state.x - state.x_prev) / state.dt
    return 0.5 * v @ (D @ v) + 0.5 * state.x @ (Kmat @ state.x_prev)


def frequency_map(system, w2):
    """Interface response ``(w2 D - K)^{-1}`` restricted to the interface unknowns."""
    D, Kmat, _ = monolithic(system)
    M = (w2 * D - Kmat).toarray()
    n = system.n_iface
    rhs = np.zeros((system.n_state, n), dtype=complex)
    rhs[:n, :n] = np.eye(n)
    X = np.linalg.solve(M, rhs)
    return X[:n]


def flops_per_step(system):
    """Floating-point operations of one :func:`step` as implemented (no corner correction)."""
    total = 0
    for rom in system.roms:
        K = rom.K
        total += 2 * K * K + K
        total += (rom.m - 1) * (6 * K * K + 4 * K)
    for key in system.keys:
        n = system.iface[key].stop - system.iface[key].start
        total += n * len(system.owners[key]) + 2 * n * n + 2 * n
    return int(total + 4 * system.n_state)


def _lanczos_lam_max(system, seed):
    D, Kmat, _ = monolithic(system)
    v0 = np.random.default_rng(seed).standard_normal(system.n_state)
    lam = spla.eigsh(Kmat.tocsc(), k=1, M=D.tocsc(), which="LA", v0=v0, return_eigenvectors=False)
    return float(lam[0])


def estimate_dt(system, safety=0.9, *, max_iter=5000, tol=1e-10, seed=0):
    """Leapfrog step ``safety * 2 / sqrt(lam_max)`` of the ROM system.

    ``lam_max`` of ``D^{-1} K`` comes from power iteration with the
    ``D``-Rayleigh quotient; a Lanczos solve of ``K x = lam D x`` takes
    over if it stalls.
    """
    D, Kmat, _ = monolithic(system)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(system.n_state)
    lam_old = 0.0
    lam = None
    for _ in range(max_iter):
        y = -acceleration(system, x)
        lam = float((x @ (Kmat @ x)) / (x @ (D @ x)))
        nrm = np.linalg.norm(y)
        if nrm == 0:
            return math.inf
        x = y / nrm
        if abs(lam - lam_old) <= tol * abs(lam):
            break
        lam_old = lam
    else:
        lam = _lanczos_lam_max(system, seed)
    return safety * 2.0 / math.sqrt(lam)


def run(system, wavelet, T_final, dt, *, corner_correction=False, threads=1, record_energy=True, state=None, energy_every=1):
    """Time-step from rest (or ``state``) to ``T_final`` and record the receiver.

    The source enters as ``w(t^n) E`` at every step.  Returns a
    :class:`Trace` with ``n_steps + 1`` samples of ``q~^T u~``, each
    interface counted once; ``metadata['energy']`` holds the energy log.
    """
    state = initial_state(system, dt) if state is None else state.copy()
    n_steps = int(round((T_final - state.t) / dt))
    D = Kmat = None
    if record_energy:
        D, Kmat, _ = monolithic(system)
    q = system.receiver
    n_if = system.n_iface
    values = [float(q @ state.x[:n_if])]
    times = [state.t]
    elog = []
    for _ in range(n_steps):
        w = float(wavelet(state.t))
        state = step(system, state, w, threads=threads, corner_correction=corner_correction)
        values.append(float(q @ state.x[:n_if]))
        times.append(state.t)
        if record_energy and state.n % energy_every == 0:
            elog.append((state.t, float(energy(system, state, Kmat, D))))
        peak = np.abs(state.x).max()
        if not np.isfinite(peak):
            raise InstabilityError(f"non-finite state at step {state.n}", step=state.n)
    meta = {"dt": dt, "steps": n_steps, "energy": elog, "final_state": state}
    return Trace(np.asarray(times), np.asarray(values), meta)
