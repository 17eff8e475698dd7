import numpy as np
import pytest
import scipy.sparse as sp

from sfrom.errors import SingularShiftError
from sfrom.fine_grid import GridMedium, SparsePencil, assemble, make_source
from sfrom.partition import regular_partition
from sfrom.reference import (
    GaussianDerivative,
    dense_skeleton_transfer,
    fine_cfl,
    fine_flops_per_step,
    fine_leapfrog,
)
from sfrom.romgen import exact_transfer


def test_oscillator_impulse():
    pen = SparsePencil(sp.csr_matrix([[-1.0]]), np.array([1.0]))
    dt = 0.01
    impulse = lambda t: 1.0 / dt if t == 0.0 else 0.0
    tr = fine_leapfrog(pen, [1.0], [1.0], impulse, 10.0, dt)
    err = np.abs(tr.values - np.sin(tr.times)).max()
    assert err <= 10.0 * dt**2
    assert tr.values.size == 1001


def test_zero_source_zero_trace():
    pen = assemble(GridMedium.homogeneous((9, 9), 0.1))
    tr = fine_leapfrog(pen, np.zeros(pen.N), np.ones(pen.N), GaussianDerivative(5.0), 1.0, 0.01)
    assert not tr.values.any()


def test_2d_dispersion_at_20_points_per_wavelength():
    n, h = 161, 1.0 / 160
    pen = assemble(GridMedium.homogeneous((n, n), h))
    x = pen.coords * h
    # Dirichlet sine mode with 20 points per wavelength along the diagonal direction
    kx = ky = 2 * np.pi / (20 * h) / np.sqrt(2)
    kx = np.pi * round(kx / np.pi)
    ky = np.pi * round(ky / np.pi)
    u = np.sin(kx * x[:, 0]) * np.sin(ky * x[:, 1])
    w_h = np.sqrt(-(u @ (pen.A @ u)) / (u @ (pen.B * u)))
    w = np.hypot(kx, ky)
    assert 2 * np.pi / w / h == pytest.approx(20, rel=0.05)
    assert abs(w_h - w) / w < 0.01


def test_fine_cfl_1d_equals_h():
    h = 1.0 / 1000
    pen = assemble(GridMedium.homogeneous((1001,), h))
    assert fine_cfl(pen) == pytest.approx(h, rel=1e-4)


def test_fine_cfl_sigma_scaling():
    rng = np.random.default_rng(4)
    sig = 0.5 + rng.random((30, 30))
    a = fine_cfl(assemble(GridMedium((30, 30), 0.1, sig)))
    b = fine_cfl(assemble(GridMedium((30, 30), 0.1, 4 * sig)))
    assert b == pytest.approx(a / 2, rel=1e-6)


def test_fine_cfl_2d_dense():
    rng = np.random.default_rng(5)
    pen = assemble(GridMedium((42, 42), 0.05, 1.0, 0.5 + rng.random((42, 42))))
    D = np.diag(1 / np.sqrt(pen.B))
    lam = np.linalg.eigvalsh(D @ (-pen.A.toarray()) @ D).max()
    assert fine_cfl(pen) == pytest.approx(2 / np.sqrt(lam), rel=0.01)


def test_richardson_order_two():
    pen = assemble(GridMedium.homogeneous((21,), 1.0 / 20))
    g = make_source(pen, (7,)).vector
    q = make_source(pen, (13,)).vector
    wav = GaussianDerivative(15.0)
    dt0 = 0.4 * fine_cfl(pen)
    T = 400 * dt0
    runs = [fine_leapfrog(pen, g, q, wav, T, dt0 / 2**k).values[:: 2**k] for k in range(3)]
    ratio = np.abs(runs[0] - runs[1]).max() / np.abs(runs[1] - runs[2]).max()
    assert ratio == pytest.approx(4.0, abs=0.3)


def test_dense_transfer_matches_cell_composition(line17):
    pen, P, S = line17
    k = int(P.skeleton[0])
    for z in (3.0 + 2.0j, -5.0 + 0.5j, 40.0 + 1.0j):
        F = dense_skeleton_transfer(pen, [k], z)[0, 0]
        f = [exact_transfer(s, s.local_index([k]), z)[0, 0] for s in S]
        assert F == pytest.approx(1.0 / (1.0 / f[0] + 1.0 / f[1]), rel=1e-12)


def test_dense_transfer_symmetry_and_sign(rng):
    pen = assemble(GridMedium((15, 15), 0.1, 1.0 + rng.random((15, 15))))
    gamma = regular_partition(pen, 2)[0].skeleton
    for z in 50.0 * (rng.standard_normal(5) + 1j * np.abs(rng.standard_normal(5))):
        F = dense_skeleton_transfer(pen, gamma, z)
        assert np.abs(F - F.T).max() <= 1e-12 * np.abs(F).max()
        assert np.linalg.eigvalsh(-F.imag).min() >= -1e-12 * np.abs(F).max()


def test_dense_transfer_guards():
    pen = assemble(GridMedium.homogeneous((73, 73), 0.1))
    with pytest.raises(ValueError):
        dense_skeleton_transfer(pen, [0], 1.0j)
    one = SparsePencil(sp.csr_matrix([[-2.0]]), np.array([1.0]))
    with pytest.raises(SingularShiftError):
        dense_skeleton_transfer(one, [0], 2.0)


def test_wavelet_band_limit():
    wav = GaussianDerivative(10.0)
    t = np.arange(0, 20 * wav.t0, 1e-3)
    spec = np.abs(np.fft.rfft(wav(t)))
    freq = 2 * np.pi * np.fft.rfftfreq(t.size, 1e-3)
    assert spec[freq >= 10.0].max() <= 2e-3 * spec.max()
    assert abs(wav(0.0)) < 1e-6
    assert wav.to_dict()["omega_max"] == 10.0


def test_fine_flops():
    pen = assemble(GridMedium.homogeneous((5, 5), 1.0))
    assert fine_flops_per_step(pen) == 2 * pen.A.nnz + 7 * pen.N
