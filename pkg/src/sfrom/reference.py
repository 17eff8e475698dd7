"""Fine-grid reference solver, dense oracles and source wavelets."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InstabilityError, SingularShiftError
from .msolver import Trace

__all__ = [
    "DENSE_LIMIT",
    "GaussianDerivative",
    "ReferenceRun",
    "fine_cfl",
    "fine_leapfrog",
    "fine_flops_per_step",
    "dense_skeleton_transfer",
]

DENSE_LIMIT = 5000


@dataclass(frozen=True)
class GaussianDerivative:
    """First derivative of a Gaussian, band-limited below ``omega_max``.

    ``w(t) = -((t - t0) / tau) exp(-(t - t0)^2 / (2 tau^2))`` with
    ``tau = x / omega_max``; ``x = 4.2`` puts the spectrum at ``omega_max``
    about 1e-3 below its peak.  ``t0 = 6 tau`` makes ``w(0)`` negligible.
    """

    omega_max: float
    sharpness: float = 4.2
    delay: float = 6.0

    @property
    def tau(self):
        return self.sharpness / self.omega_max

    @property
    def t0(self):
        return self.delay * self.tau

    def __call__(self, t):
        s = (np.asarray(t, dtype=float) - self.t0) / self.tau
        return -s * np.exp(-0.5 * s * s)

    def to_dict(self):
        return {"kind": "gaussian_derivative", "omega_max": self.omega_max, "sharpness": self.sharpness, "delay": self.delay}


@dataclass
class ReferenceRun:
    """Fine-grid leapfrog state and recorded trace."""

    pencil: object
    u: np.ndarray
    u_prev: np.ndarray
    dt: float
    trace: Trace | None = None
    n: int = 0
    meta: dict = field(default_factory=dict)


def fine_cfl(pencil, *, seed=0):
    """Largest stable leapfrog step ``2 / sqrt(lam_max(-B^{-1} A))``."""
    s = 1.0 / np.sqrt(pencil.B)
    H = sp.diags(s) @ (-pencil.A) @ sp.diags(s)
    if pencil.N <= 64:
        lam = float(np.linalg.eigvalsh(H.toarray())[-1])
    else:
        v0 = np.random.default_rng(seed).standard_normal(pencil.N)
        lam = float(spla.eigsh(H, k=1, which="LA", tol=1e-10, v0=v0, return_eigenvectors=False)[0])
    return 2.0 / math.sqrt(lam)


def fine_flops_per_step(pencil):
    """Floating-point operations of one fine leapfrog step: sparse matvec plus 7 per node."""
    return int(2 * pencil.A.nnz + 7 * pencil.N)


def fine_leapfrog(pencil, g, q, wavelet, T_final, dt, *, u0=None, u_prev=None, n0=0):
    """``u^{n+1} = 2 u^n - u^{n-1} + dt^2 B^{-1} (A u^n + w(t^n) g)`` from rest.

    Returns a :class:`Trace` of ``q^T u^n`` with ``n_steps + 1`` samples;
    ``metadata['run']`` holds the final :class:`ReferenceRun`.
    """
    A = pencil.A
    Binv = 1.0 / pencil.B
    g = np.asarray(g, float)
    q = np.asarray(q, float)
    u = np.zeros(pencil.N) if u0 is None else np.asarray(u0, float).copy()
    up = np.zeros(pencil.N) if u_prev is None else np.asarray(u_prev, float).copy()
    n_steps = int(round(T_final / dt)) - n0
    times = [n0 * dt]
    values = [float(q @ u)]
    n = n0
    for _ in range(n_steps):
        w = float(wavelet(n * dt))
        un = 2.0 * u - up + dt * dt * (Binv * (A @ u + w * g))
        up, u = u, un
        n += 1
        times.append(n * dt)
        values.append(float(q @ u))
        if not np.isfinite(values[-1]):
            raise InstabilityError(f"fine-grid leapfrog blew up at step {n}", step=n)
    run = ReferenceRun(pencil, u, up, dt, n=n)
    trace = Trace(np.asarray(times), np.asarray(values), {"dt": dt, "steps": n - n0, "run": run})
    run.trace = trace
    return trace


def dense_skeleton_transfer(pencil, gamma, w2):
    """Dense ``P_G^T (A + w2 B)^{-1} P_G`` on the rows ``gamma`` (oracle, N <= 5000)."""
    if pencil.N > DENSE_LIMIT:
        raise ValueError(f"dense oracle limited to N <= {DENSE_LIMIT}, got {pencil.N}")
    gamma = np.asarray(gamma, dtype=np.int64)
    M = pencil.A.toarray() + w2 * np.diag(pencil.B)
    rhs = np.zeros((pencil.N, gamma.size), dtype=M.dtype)
    rhs[gamma, np.arange(gamma.size)] = 1.0
    try:
        with warnings.catch_warnings():
            # singularity is reported below from the pivots
            warnings.simplefilter("ignore", la.LinAlgWarning)
            lu = la.lu_factor(M, check_finite=True)
    except (la.LinAlgError, ValueError) as exc:
        raise SingularShiftError(f"A + ({w2}) B is singular") from exc
    if np.abs(np.diag(lu[0])).min() <= 1e-14 * np.abs(M).max():
        raise SingularShiftError(f"w^2 = {w2} is at or near a pencil eigenvalue")
    X = la.lu_solve(lu, rhs)
    F = X[gamma]
    return 0.5 * (F + F.T)
