import numpy as np
import pytest

from cmslf.renderer import render_lightfield
from cmslf.rig import RigConfig
from cmslf.scene import Material, Scene, Sphere
from cmslf.spectral import build_spectral_model

RINGS = np.arange(29, 41.0)
BANDS = np.arange(440, 661, 20.0)
COEFFS = [0.7, 0.1, -0.05]


def make_rig(res=48, **kw):
    return RigConfig(ring_radii=RINGS, wavelengths=BANDS, image_width=res, image_height=res, **kw)


def sphere_scene(beta=0.0, shininess=8.0, texture=None, center=(0, 0, 128), radius=20.0):
    return Scene([Sphere(list(center), radius, Material(COEFFS, beta, shininess, texture))])


@pytest.fixture(scope="session")
def rig():
    return make_rig()


@pytest.fixture(scope="session")
def spectral():
    return build_spectral_model(BANDS)


@pytest.fixture(scope="session")
def diffuse_lf(rig, spectral):
    return render_lightfield(sphere_scene(), rig, spectral)


@pytest.fixture(scope="session")
def specular_lf(rig, spectral):
    return render_lightfield(sphere_scene(beta=0.3), rig, spectral)


@pytest.fixture(scope="session")
def diffuse_lf96(spectral):
    return render_lightfield(sphere_scene(), make_rig(96), spectral)


@pytest.fixture(scope="session")
def specular_lf96(spectral):
    return render_lightfield(sphere_scene(beta=0.3), make_rig(96), spectral)


@pytest.fixture(scope="session")
def rig160():
    return make_rig(160)


@pytest.fixture(scope="session")
def diffuse_lf160(rig160, spectral):
    return render_lightfield(sphere_scene(), rig160, spectral)


def lobe_oracle(N, X, beta, shininess, rig):
    """Spoke gradients ``beta ((D.V_{i+1})^s - (D.V_i)^s)`` written loop by loop.

    Independent of the package's vectorised lobe model; returns (n-1, m).
    """
    n, m = rig.cameras_per_ring, rig.num_rings
    cams = rig.camera_positions()
    lights = rig.light_positions()
    f = np.zeros((n, m))
    for j in range(m):
        L = lights[j] - X
        L = L / np.linalg.norm(L)
        ln = float(L @ N)
        if ln <= 0:
            continue
        D = 2 * ln * N - L
        for i in range(n):
            V = np.array([cams[i, j, 0], cams[i, j, 1], 0.0]) - X
            V = V / np.linalg.norm(V)
            f[i, j] = max(float(D @ V), 0.0) ** shininess
    return beta * (f[1:] - f[:-1]), f


def specular_trial(rng, rig, min_peak=1e-3):
    """A random surface point with an observable mirror lobe.

    Draws points in the sweep volume, normals facing the rig, beta in
    [0.1, 0.8] and shininess in [4, 40] until the largest lobe value seen by
    any camera reaches ``min_peak``.
    """
    while True:
        X = np.array([rng.uniform(-12, 12), rng.uniform(-12, 12), rng.uniform(108, 125)])
        toward = -X / np.linalg.norm(X)
        N = toward + rng.normal(scale=0.35, size=3)
        N /= np.linalg.norm(N)
        if N @ toward < 0.3:
            continue
        beta, shin = rng.uniform(0.1, 0.8), rng.uniform(4, 40)
        G, f = lobe_oracle(N, X, beta, shin, rig)
        if f.max() >= min_peak:
            return X, N, beta, shin, G


def lambertian_instance(rng, rig, W):
    """Random diffuse point: ``(X, N, c, row, L, falloff)`` with every band lit.

    The row is built band by band from ``(c . W_j) (L_j . N) / |P_j - X|^2``.
    """
    lights = rig.light_positions()
    while True:
        X = np.array([rng.uniform(-12, 12), rng.uniform(-12, 12), rng.uniform(108, 125)])
        toward = -X / np.linalg.norm(X)
        N = toward + rng.normal(scale=0.3, size=3)
        N /= np.linalg.norm(N)
        c = np.asarray(COEFFS[:1] + [0.0] * (W.shape[0] - 1)) + rng.normal(scale=0.1,
                                                                           size=W.shape[0])
        row = np.zeros(W.shape[1])
        L = np.zeros((W.shape[1], 3))
        falloff = np.zeros(W.shape[1])
        for j in range(W.shape[1]):
            d = lights[j] - X
            falloff[j] = float(d @ d)
            L[j] = d / np.sqrt(falloff[j])
            row[j] = float(c @ W[:, j]) * float(L[j] @ N) / falloff[j]
        if np.all(L @ N > 0.05) and np.all(row > 0):
            return X, N, c, row, L, falloff


@pytest.fixture(scope="session")
def rig64():
    return make_rig(64)


@pytest.fixture(scope="session")
def diffuse_lf64(rig64, spectral):
    return render_lightfield(sphere_scene(), rig64, spectral)


@pytest.fixture(scope="session")
def specular_lf64(rig64, spectral):
    return render_lightfield(sphere_scene(beta=0.3), rig64, spectral)


# ----------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture(scope="session")
def acceptance(request):
    """``acceptance(number, ok, detail)`` records and prints one verdict line."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number, ok, detail):
        lines[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[number])
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
