import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from cmslf.photostereo import (BILINEAR, LIFTED, PhotometricError, lifted_design,
                               recover_reflectance, scan_normals, solve_bilinear,
                               solve_bilinear_batch, solve_lifted, solve_rows)
from cmslf.spectral import reflectance_at_band

from conftest import lambertian_instance


def _angle(a, b):
    return float(np.degrees(np.arccos(np.clip(np.dot(a, b), -1, 1))))


def _rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def test_lifted_design_layout():
    rng = np.random.default_rng(0)
    L = rng.normal(size=(12, 3))
    W = rng.normal(size=(3, 12))
    A = lifted_design(L, W)
    for j in range(12):
        for k in range(3):
            for d in range(3):
                assert A[j, 3 * k + d] == W[k, j] * L[j, d]


def test_zero_row_raises(rig, spectral):
    L = np.tile([0.0, 0.0, -1.0], (12, 1))
    with pytest.raises(PhotometricError):
        solve_lifted(np.zeros(12), L, spectral.W, np.ones(12))
    with pytest.raises(PhotometricError):
        solve_bilinear(np.zeros(12), L, spectral.W, np.ones(12), [0, 0, -1.0])


def test_lifted_exact_on_lambertian(rig, spectral):
    rng = np.random.default_rng(1)
    for _ in range(10):
        X, N, c, row, L, fall = lambertian_instance(rng, rig, spectral.W)
        r = solve_lifted(row, L, spectral.W, fall, -X / np.linalg.norm(X))
        assert _angle(r.normal, N) < 0.01
        assert _rel(r.coefficients, c) < 1e-6
        assert r.rank_ratio < 1e-8
        assert r.method == LIFTED


def test_lifted_needs_enough_bands(spectral):
    with pytest.raises(PhotometricError):
        solve_lifted(np.ones(8), np.tile([0, 0, -1.0], (8, 1)), np.ones((3, 8)), np.ones(8))


def test_bilinear_fixed_point(rig, spectral):
    rng = np.random.default_rng(2)
    X, N, c, row, L, fall = lambertian_instance(rng, rig, spectral.W)
    r = solve_bilinear(row, L, spectral.W, fall, N, c)
    assert r.residual < 1e-10
    assert np.linalg.norm(r.normal - N) < 1e-10 and _rel(r.coefficients, c) < 1e-10
    assert r.method == BILINEAR


def test_bilinear_agrees_with_lifted(rig, spectral):
    rng = np.random.default_rng(3)
    for _ in range(30):
        X, N, c, row, L, fall = lambertian_instance(rng, rig, spectral.W)
        toward = -X / np.linalg.norm(X)
        a = solve_lifted(row, L, spectral.W, fall, toward)
        start = scan_normals(row[None], L[None], spectral.W, fall[None], toward[None])[0, 0]
        b = solve_bilinear(row, L, spectral.W, fall, start)
        assert _angle(a.normal, b.normal) < 0.1
        assert _rel(b.coefficients, a.coefficients) < 1e-4


def test_bilinear_five_coefficients(rig):
    # w = 5 exceeds m / 3, so only the bilinear route applies
    rng = np.random.default_rng(4)
    W = np.abs(rng.normal(size=(5, 12))) + 0.2
    with pytest.raises(PhotometricError):
        solve_lifted(np.ones(12), np.tile([0, 0, -1.0], (12, 1)), W, np.ones(12))
    for _ in range(10):
        X, N, c, row, L, fall = lambertian_instance(rng, rig, W)
        toward = -X / np.linalg.norm(X)
        starts = scan_normals(row[None], L[None], W, fall[None], toward[None])[0]
        fits = [solve_bilinear(row, L, W, fall, s) for s in starts]
        r = min(fits, key=lambda f: f.residual)
        assert _angle(r.normal, N) < 1.0
        assert _rel(r.coefficients, c) < 0.01


def test_bilinear_needs_enough_bands():
    with pytest.raises(PhotometricError):
        solve_bilinear(np.ones(6), np.tile([0, 0, -1.0], (6, 1)), np.ones((5, 6)), np.ones(6),
                       [0, 0, -1.0])


def test_scale_equivariance(rig, spectral):
    rng = np.random.default_rng(5)
    X, N, c, row, L, fall = lambertian_instance(rng, rig, spectral.W)
    a = solve_lifted(row, L, spectral.W, fall)
    for g in (0.01, 3.0, 250.0):
        b = solve_lifted(g * row, L, spectral.W, fall)
        assert np.linalg.norm(a.normal - b.normal) < 1e-8
        assert np.allclose(b.coefficients, g * a.coefficients, rtol=1e-8)


def test_rotation_equivariance(rig, spectral):
    rng = np.random.default_rng(6)
    X, N, c, row, L, fall = lambertian_instance(rng, rig, spectral.W)
    toward = -X / np.linalg.norm(X)
    a = solve_lifted(row, L, spectral.W, fall, toward)
    for seed in range(5):
        R = Rotation.random(random_state=seed).as_matrix()
        b = solve_lifted(row, L @ R.T, spectral.W, fall, R @ toward)
        assert np.linalg.norm(b.normal - R @ a.normal) < 1e-8
        assert np.allclose(b.coefficients, a.coefficients, rtol=1e-8)


def test_bilinear_never_increases_residual(rig, spectral):
    rng = np.random.default_rng(7)
    for _ in range(10):
        X, N, c, row, L, fall = lambertian_instance(rng, rig, spectral.W)
        rows = row * (1 + rng.normal(scale=0.01, size=row.size))
        init = N + rng.normal(scale=0.2, size=3)
        init /= np.linalg.norm(init)
        c0 = c * 1.1
        start = solve_bilinear_batch(rows[None], L[None], spectral.W, fall[None], init[None],
                                     c0[None], max_iter=0)
        end = solve_bilinear(rows, L, spectral.W, fall, init, c0)
        assert end.residual <= start.residual[0] + 1e-15


def test_solve_rows_recovers_points(rig, spectral):
    rng = np.random.default_rng(8)
    inst = [lambertian_instance(rng, rig, spectral.W) for _ in range(20)]
    X = np.array([t[0] for t in inst])
    rows = np.array([t[3] for t in inst])
    r = solve_rows(rows, X, rig, spectral)
    for k, t in enumerate(inst):
        assert _angle(r.normal[k], t[1]) < 0.01
        assert _rel(r.coefficients[k], t[2]) < 1e-5


def test_solve_rows_drops_shadowed_bands(rig, spectral):
    # a normal tilted so that some lights sit behind the surface
    X = np.array([0.0, 0.0, 112.0])
    N = np.array([0.0, np.sin(np.radians(60)), -np.cos(np.radians(60))])
    c = np.array([0.7, 0.1, -0.05])
    P = rig.light_positions()
    d = P - X
    fall = (d ** 2).sum(1)
    L = d / np.sqrt(fall)[:, None]
    shade = np.clip(L @ N, 0, None)
    assert np.sum(shade == 0) >= 1 and np.sum(shade > 0) >= 5
    row = (c @ spectral.W) * shade / fall
    r = solve_rows(row[None], X[None], rig, spectral)
    assert _angle(r.normal[0], N) < 0.1
    assert _rel(r.coefficients[0], c) < 1e-3


def test_recover_reflectance(spectral):
    assert np.all(recover_reflectance(np.zeros(3), spectral) == 0)
    c = np.array([0.7, 0.1, -0.05])
    curve = recover_reflectance(c, spectral)
    for j in range(spectral.num_bands):
        idx = spectral.band_index[j]
        integral = float(curve[idx] @ (spectral.illumination[j] * spectral.response[j]))
        assert integral == pytest.approx(float(c @ spectral.W[:, j]), abs=1e-10)
        assert integral == pytest.approx(reflectance_at_band(spectral, c, j)[1], abs=1e-12)
