"""Forward imaging with the Phong-dichromatic near-point-light model.

Only light ``j`` is seen by ring ``j`` (spectral multiplexing), so each
single-band image is shaded by exactly one point light.  Both shading terms
fall off with the squared light distance; ``L.N`` and ``D.V`` are clamped at
zero.  The diffuse scale is folded into the basis coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math

import numpy as np

from .bvh import intersect_bvh
from .rig import RigConfig, Ray, center_view_directions, project_points
from .scene import Mesh, Scene, Sphere
from .spectral import SpectralModel, check_nonnegative

log = logging.getLogger(__name__)

HIGHLIGHT_RATIO = 0.5
"""A pixel is a ground-truth highlight if some camera sees a specular term of at
least this fraction of the diffuse term in the same band."""


class RenderError(ValueError):
    pass


@dataclass
class Hit:
    t: float
    X: np.ndarray
    N: np.ndarray
    obj: int


@dataclass
class HitBatch:
    t: np.ndarray          # (R,) inf on miss
    X: np.ndarray          # (R, 3)
    N: np.ndarray          # (R, 3) shading normal
    obj: np.ndarray        # (R,) object index, -1 on miss

    @property
    def hit(self) -> np.ndarray:
        return self.obj >= 0


@dataclass
class LightField:
    """``images[i, j]`` is the band-``j`` image of spoke ``i`` on ring ``j``."""

    images: np.ndarray
    rig: RigConfig
    spectral: SpectralModel | None = None
    ground_truth: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n, m = self.rig.cameras_per_ring, self.rig.num_rings
        H, W = self.rig.image_height, self.rig.image_width
        if self.images.shape != (n, m, H, W):
            raise RenderError(f"light field shape {self.images.shape} does not match "
                              f"rig {(n, m, H, W)}")

    def image(self, i: int, j: int) -> np.ndarray:
        return self.images[i, j]


# ----------------------------------------------------------------------
# intersection

def _intersect_sphere(sph: Sphere, o: np.ndarray, d: np.ndarray):
    oc = o - sph.center
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - sph.radius ** 2
    disc = b * b - c
    # tangent rays (disc == 0) count as a single hit
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    return np.where(ok, t, np.inf)


def intersect_rays(scene: Scene, origins: np.ndarray, dirs: np.ndarray) -> HitBatch:
    """Nearest positive hit for each ray against every object."""
    R = origins.shape[0]
    best = np.full(R, np.inf)
    obj = np.full(R, -1, dtype=np.int64)
    normal = np.zeros((R, 3))
    for k, ob in enumerate(scene.objects):
        if isinstance(ob, Sphere):
            t = _intersect_sphere(ob, origins, dirs)
            closer = t < best
            if np.any(closer):
                X = origins[closer] + t[closer, None] * dirs[closer]
                normal[closer] = (X - ob.center) / ob.radius
        elif isinstance(ob, Mesh):
            t, f, b = intersect_bvh(ob.bvh, origins, dirs)
            closer = t < best
            if np.any(closer):
                ff = ob.faces[f[closer]]
                b1, b2 = b[closer, 0:1], b[closer, 1:2]
                nn = ((1 - b1 - b2) * ob.normals[ff[:, 0]] + b1 * ob.normals[ff[:, 1]]
                      + b2 * ob.normals[ff[:, 2]])
                normal[closer] = nn / np.linalg.norm(nn, axis=1, keepdims=True)
        else:
            raise RenderError(f"unsupported object {type(ob).__name__}")
        best = np.where(closer, t, best)
        obj = np.where(closer, k, obj)
    X = origins + np.where(np.isfinite(best), best, 0.0)[:, None] * dirs
    return HitBatch(best, X, normal, obj)


def intersect(ray: Ray, scene: Scene) -> Hit | None:
    hb = intersect_rays(scene, ray.origin[None, :], ray.direction[None, :])
    if not hb.hit[0]:
        return None
    return Hit(float(hb.t[0]), hb.X[0], hb.N[0], int(hb.obj[0]))


def material_at(scene: Scene, hits: HitBatch):
    """Per-hit coefficient vectors, specular reflectivity and shininess."""
    R = hits.t.size
    w = scene.objects[0].material.coefficients.size
    c = np.zeros((R, w))
    beta = np.zeros(R)
    sig = np.ones(R)
    for k, ob in enumerate(scene.objects):
        sel = hits.obj == k
        if not np.any(sel):
            continue
        d = hits.X[sel] - ob.center
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        c[sel] = ob.material.coefficients_at(d)
        beta[sel] = ob.material.specular
        sig[sel] = ob.material.shininess
    return c, beta, sig


# ----------------------------------------------------------------------
# shading

def shade(X, N, c, beta, shininess, j: int, V, rig: RigConfig, spectral: SpectralModel) -> float:
    """Band-``j`` intensity of a surface point seen along view vector ``V``."""
    X = np.asarray(X, dtype=float)
    P = rig.light_positions()[j]
    d2 = float(np.dot(P - X, P - X))
    if d2 == 0.0:
        raise RenderError("surface point coincides with the light")
    return float(shade_terms(X[None], np.asarray(N, float)[None], np.asarray(c, float)[None],
                             np.array([beta]), np.array([shininess]), P,
                             np.asarray(V, float)[None], spectral.W[:, j],
                             spectral.JEQ[j]).sum())


def shade_terms(X, N, c, beta, sig, P, V, W_j, JEQ_j):
    """Vectorised diffuse + specular terms, returned stacked as (2, R)."""
    PX = P - X
    d2 = np.einsum("ij,ij->i", PX, PX)
    if np.any(d2 == 0.0):
        raise RenderError("surface point coincides with the light")
    L = PX / np.sqrt(d2)[:, None]
    LN = np.einsum("ij,ij->i", L, N)
    D = 2.0 * LN[:, None] * N - L
    # no specular term in attached shadow
    DV = np.where(LN > 0, np.clip(np.einsum("ij,ij->i", D, V), 0.0, None), 0.0)
    diffuse = np.clip(LN, 0.0, None) / d2 * (c @ W_j)
    specular = beta * DV ** sig / d2 * JEQ_j
    return np.stack([diffuse, specular])


# ----------------------------------------------------------------------
# rendering

def _camera_rays(rig: RigConfig, cx: float, cy: float):
    dirs = center_view_directions(rig).reshape(-1, 3)
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.zeros_like(dirs)
    origins[:, 0] = cx
    origins[:, 1] = cy
    return origins, dirs


def _check_materials(scene: Scene, spectral: SpectralModel, samples: int = 2000) -> None:
    """Reject materials whose reflectance goes negative anywhere on the dense grid."""
    k = np.arange(samples) + 0.5
    z = 1.0 - 2.0 * k / samples
    r = np.sqrt(1.0 - z ** 2)
    ph = k * math.pi * (3.0 - math.sqrt(5.0))
    dirs = np.stack([r * np.cos(ph), r * np.sin(ph), z], axis=1)
    for ob in scene.objects:
        c = ob.material.coefficients_at(dirs)
        if c.shape[1] != spectral.basis_dim:
            raise RenderError(f"material has {c.shape[1]} coefficients, basis has "
                              f"{spectral.basis_dim}")
        if not check_nonnegative(spectral, c):
            raise RenderError("material reflectance is negative at some wavelength")


def render_lightfield(scene: Scene, rig: RigConfig, spectral: SpectralModel,
                      noise_sigma: float = 0.0, seed: int = 0,
                      ground_truth: bool = True) -> LightField:
    """Render all ``n x m`` single-band views, plus center-view ground truth.

    ``noise_sigma`` is relative to the maximum clean intensity; noisy values
    are clamped at zero.
    """
    if not scene.objects:
        raise RenderError("empty scene")
    _check_materials(scene, spectral)
    n, m = rig.cameras_per_ring, rig.num_rings
    H, W = rig.image_height, rig.image_width
    cams = rig.camera_positions()
    lights = rig.light_positions()
    Wm, JEQ = spectral.W, spectral.JEQ
    images = np.zeros((n, m, H, W))
    objmaps = np.full((n, m, H, W), -1, dtype=np.int8)
    for i in range(n):
        for j in range(m):
            o, d = _camera_rays(rig, *cams[i, j])
            hits = intersect_rays(scene, o, d)
            sel = hits.hit
            if np.any(sel):
                c, beta, sig = material_at(scene, hits)
                terms = shade_terms(hits.X[sel], hits.N[sel], c[sel], beta[sel], sig[sel],
                                    lights[j], -d[sel], Wm[:, j], JEQ[j])
                img = np.zeros(H * W)
                img[sel] = terms.sum(axis=0)
                images[i, j] = img.reshape(H, W)
            objmaps[i, j] = hits.obj.reshape(H, W)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        scale = noise_sigma * images.max()
        images = np.clip(images + rng.normal(0.0, scale, images.shape), 0.0, None)
    lf = LightField(images.astype(np.float32), rig, spectral,
                    metadata={"noise_sigma": noise_sigma, "seed": seed})
    if ground_truth:
        lf.ground_truth = center_ground_truth(scene, rig, spectral, objmaps)
    return lf


def center_ground_truth(scene: Scene, rig: RigConfig, spectral: SpectralModel,
                        objmaps: np.ndarray) -> dict:
    """Center-view maps: depth, normal, coefficients, specular parameters, masks.

    ``eval_mask`` marks pixels whose surface point is seen unoccluded by every
    camera, whose bilinear footprint lies on the object in every view, and
    whose depth lies in the sweep range.
    """
    H, W = rig.image_height, rig.image_width
    n, m = rig.cameras_per_ring, rig.num_rings
    o, d = _camera_rays(rig, 0.0, 0.0)
    hits = intersect_rays(scene, o, d)
    mask = hits.hit
    c, beta, sig = material_at(scene, hits)
    depth = np.where(mask, hits.X[:, 2], 0.0)
    normal = np.where(mask[:, None], hits.N, 0.0)

    idx = np.flatnonzero(mask)
    X, N = hits.X[idx], hits.N[idx]
    cams = rig.camera_positions()
    lights = rig.light_positions()
    Wm, JEQ = spectral.W, spectral.JEQ
    visible_all = np.ones(idx.size, dtype=bool)
    footprint_ok = np.ones(idx.size, dtype=bool)
    highlight = np.zeros(idx.size, dtype=bool)
    spec_energy = np.zeros(idx.size)
    for i in range(n):
        for j in range(m):
            C = np.array([cams[i, j, 0], cams[i, j, 1], 0.0])
            toX = X - C
            dist = np.linalg.norm(toX, axis=1)
            hb = intersect_rays(scene, np.broadcast_to(C, X.shape).copy(), toX / dist[:, None])
            vis = hb.t >= dist * (1 - 1e-7)
            visible_all &= vis
            u, v = project_points(X, cams[i, j], rig)
            inb = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
            u0 = np.clip(np.floor(u).astype(int), 0, W - 2)
            v0 = np.clip(np.floor(v).astype(int), 0, H - 2)
            om = objmaps[i, j]
            on = ((om[v0, u0] >= 0) & (om[v0, u0 + 1] >= 0)
                  & (om[v0 + 1, u0] >= 0) & (om[v0 + 1, u0 + 1] >= 0))
            footprint_ok &= inb & on
            V = -toX / dist[:, None]
            terms = shade_terms(X, N, c[idx], beta[idx], sig[idx], lights[j], V, Wm[:, j], JEQ[j])
            hl = vis & (terms[0] > 0) & (terms[1] >= HIGHLIGHT_RATIO * terms[0])
            highlight |= hl
            spec_energy = np.maximum(spec_energy, np.where(vis, terms[1], 0.0))
    in_range = (X[:, 2] >= rig.depth_min) & (X[:, 2] <= rig.depth_max)

    def full(vals, dtype=bool):
        out = np.zeros(H * W, dtype=dtype)
        out[idx] = vals
        return out.reshape(H, W)

    w = c.shape[1]
    return {
        "mask": mask.reshape(H, W),
        "depth": depth.reshape(H, W).astype(np.float32),
        "normal": normal.reshape(H, W, 3).astype(np.float32),
        "coefficients": np.where(mask[:, None], c, 0.0).reshape(H, W, w).astype(np.float32),
        "specular": np.where(mask, beta, 0.0).reshape(H, W).astype(np.float32),
        "shininess": np.where(mask, sig, 0.0).reshape(H, W).astype(np.float32),
        "highlight": full(highlight),
        "eval_mask": full(visible_all & footprint_ok & in_range),
        "specular_peak": full(spec_energy, float).astype(np.float32),
    }
