"""Normal integration and the full shape-and-reflectance pipeline.

For the center view a surface point is ``X = z x`` with ``x = (u_m, v_m, 1)``.
Requiring the normal to be orthogonal to the image tangents gives the
perspective log-depth gradients

    d log z / du = -pitch * N_x / (N . x),   d log z / dv = -pitch * N_y / (N . x)

which blow up at grazing normals.  The integrator therefore uses the
equivalent, division-free form on each pair of 4-neighbours ``a, b``:

    (N_a + N_b) . (z_b x_b - z_a x_a) = 0

(the chord between two points of a sphere is orthogonal to the sum of their
normals, so this is exact there).  These equations are solved in least
squares with a weak pull toward anchor depths, one connected component at a
time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging

import numpy as np
from scipy import ndimage, sparse
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import spsolve

from .consistency import (DIFFUSE, INVALID, SPECULAR, SweepOptions, photo_consistency_batch,
                          sweep_pixels)
from .msscam import Sampler
from .photostereo import solve_rows
from .rig import RigConfig, center_view_directions, center_view_points
from .specular import (PointGeometry, column_medians, fit_specular, normalized_gradients,
                       remove_specular)

log = logging.getLogger(__name__)


class SurfaceError(ValueError):
    pass


def log_depth_gradients(normals: np.ndarray, rig: RigConfig):
    """Per-pixel ``(d log z/du, d log z/dv, cos)`` for a normal map (H, W, 3).

    ``cos`` is the cosine between the normal and the direction back to the
    center of projection; it is positive for visible surfaces.
    """
    x = center_view_directions(rig)
    nx = np.einsum("hwk,hwk->hw", normals, x)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = -rig.pixel_pitch * normals[..., 0] / nx
        q = -rig.pixel_pitch * normals[..., 1] / nx
    return p, q, -nx / np.linalg.norm(x, axis=-1)


def _edges(mask):
    """4-neighbour pixel pairs inside ``mask``: (a, b, axis) with b right of / below a."""
    H, W = mask.shape
    idx = np.arange(H * W).reshape(H, W)
    h = mask[:, :-1] & mask[:, 1:]
    v = mask[:-1, :] & mask[1:, :]
    a = np.concatenate([idx[:, :-1][h], idx[:-1, :][v]])
    b = np.concatenate([idx[:, 1:][h], idx[1:, :][v]])
    axis = np.concatenate([np.zeros(h.sum(), int), np.ones(v.sum(), int)])
    return a, b, axis


def integrate_normals(normals: np.ndarray, mask: np.ndarray, anchor: np.ndarray, rig: RigConfig,
                      anchor_weight=1e-3, fill_weight: float = 0.1) -> np.ndarray:
    """Depth map consistent with ``normals`` and held near ``anchor``.

    ``anchor_weight`` is a scalar or a per-pixel map; a component whose
    anchor weights are all zero falls back to uniform weights.
    Every 4-connected component of ``mask`` is solved on its own.  Edges
    touching a pixel without a valid (finite, nonzero) normal ask for equal
    depth with weight ``fill_weight``, which fills such pixels in from their
    neighbours.  Outside ``mask`` the result is 0.
    """
    normals = np.asarray(normals, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    anchor = np.asarray(anchor, dtype=float)
    if not mask.any():
        raise SurfaceError("empty mask")
    if np.any(anchor[mask] <= 0):
        raise SurfaceError("anchor depths must be positive")
    x = center_view_directions(rig).reshape(-1, 3)
    Nf = normals.reshape(-1, 3)
    good = (np.all(np.isfinite(Nf), axis=1) & (np.linalg.norm(np.nan_to_num(Nf), axis=1) > 0.5)
            & mask.ravel())
    Nf = np.where(good[:, None], Nf, 0.0)
    labels, count = ndimage.label(mask)
    out = np.zeros(mask.shape)
    za = anchor.ravel()
    aw = np.broadcast_to(np.asarray(anchor_weight, dtype=float), mask.shape).ravel()
    if np.any(aw < 0):
        raise SurfaceError("anchor weights must be nonnegative")
    base = float(aw[mask.ravel()].max())
    for comp in range(1, count + 1):
        cm = labels == comp
        pix = np.flatnonzero(cm.ravel())
        local = np.full(mask.size, -1)
        local[pix] = np.arange(pix.size)
        a, b, _ = _edges(cm)
        both = good[a] & good[b]
        Ns = Nf[a] + Nf[b]
        ca = np.where(both, -np.einsum("ek,ek->e", Ns, x[a]), -np.sqrt(fill_weight))
        cb = np.where(both, np.einsum("ek,ek->e", Ns, x[b]), np.sqrt(fill_weight))
        ne = a.size
        rows = np.concatenate([np.arange(ne), np.arange(ne), ne + np.arange(pix.size)])
        cols = np.concatenate([local[a], local[b], np.arange(pix.size)])
        w_a = aw[pix]
        if not np.any(w_a > 0):
            w_a = np.full(pix.size, base if base > 0 else 1e-3)
        sa = np.sqrt(w_a)
        vals = np.concatenate([ca, cb, sa])
        A = sparse.csr_matrix((vals, (rows, cols)), shape=(ne + pix.size, pix.size))
        rhs = np.concatenate([np.zeros(ne), sa * za[pix]])
        zc = spsolve((A.T @ A).tocsc(), A.T @ rhs)
        out.ravel()[pix] = np.atleast_1d(zc)
    return out


def integration_residual(depth: np.ndarray, normals: np.ndarray, mask: np.ndarray,
                         rig: RigConfig) -> float:
    """RMS of ``(N_a + N_b) . (X_b - X_a)`` over 4-neighbour pairs inside ``mask``."""
    x = center_view_directions(rig).reshape(-1, 3)
    X = x * np.where(mask, depth, 0.0).reshape(-1, 1)
    Nf = normals.reshape(-1, 3)
    a, b, _ = _edges(mask)
    r = np.einsum("ek,ek->e", Nf[a] + Nf[b], X[b] - X[a])
    return float(np.sqrt(np.mean(r ** 2))) if r.size else 0.0


def refine_scale(sampler: Sampler, u: np.ndarray, v: np.ndarray, z: np.ndarray, rig: RigConfig,
                 span: float | None = None, xtol: float = 1e-9) -> float:
    """Scale factor ``g`` minimising the mean relative photo-consistency at ``g * z``.

    Normals fix a perspective surface only up to a global scale; this picks
    the scale at which the resampled MSS-Cams of the given (diffuse) pixels
    are most consistent.  ``span`` bounds ``|g - 1|`` and defaults to two
    sweep steps relative to the median depth.
    """
    if u.size == 0:
        return 1.0
    span = 2.0 * rig.depth_step / float(np.median(z)) if span is None else span

    def cost(g):
        X = center_view_points(u, v, g * z, rig)
        M, msk = sampler.sample(X)
        C = photo_consistency_batch(M, msk)
        mean = M.sum(axis=(1, 2)) / np.maximum(msk.sum(axis=(1, 2)), 1)
        ok = np.isfinite(C) & (mean > 0)
        return float(np.mean(C[ok] / mean[ok])) if ok.any() else 0.0

    r = minimize_scalar(cost, bounds=(1.0 - span, 1.0 + span), method="bounded",
                        options={"xatol": xtol})
    return float(r.x)


# ----------------------------------------------------------------------
# pipeline

@dataclass
class ReconstructOptions:
    sweep: SweepOptions = field(default_factory=SweepOptions)
    passes: int = 2
    anchor_weight: float = 1e-3
    specular_scan: int = 300
    specular_iterations: int = 100
    min_gradients: int = 5
    kernel: str = "cubic"          # resampling kernel of the passes (the sweep stays bilinear)
    refine_scale: bool = True
    relabel_threshold: float = 0.005  # tau_C once depth is no longer quantised to the sweep grid
    final_solve: bool = True       # re-solve reflectance at the final integrated depth

    def __post_init__(self):
        if isinstance(self.sweep, dict):
            self.sweep = SweepOptions(**self.sweep)
        if self.passes < 1:
            raise SurfaceError("need at least one pass")
        if self.anchor_weight <= 0:
            raise SurfaceError("anchor weight must be positive")
        if self.relabel_threshold <= 0:
            raise SurfaceError("relabel threshold must be positive")


@dataclass
class SurfaceEstimate:
    depth: np.ndarray          # (H, W), 0 outside mask
    normal: np.ndarray         # (H, W, 3)
    coefficients: np.ndarray   # (H, W, w)
    specular: np.ndarray       # (H, W) beta, 0 where not fitted
    shininess: np.ndarray      # (H, W), NaN where not fitted
    label: np.ndarray          # (H, W) DIFFUSE / SPECULAR / INVALID
    mask: np.ndarray           # (H, W)
    sweep_depth: np.ndarray    # (H, W) depth chosen by the sweep
    sweep_label: np.ndarray    # (H, W) label assigned by the sweep
    pass_normals: list = field(default_factory=list)   # normal map after every pass

    def to_arrays(self) -> dict:
        return {"depth": self.depth, "normal": self.normal, "coefficients": self.coefficients,
                "specular": self.specular, "shininess": self.shininess, "label": self.label,
                "mask": self.mask, "sweep_depth": self.sweep_depth,
                "sweep_label": self.sweep_label}


def _single_pass(sampler: Sampler, lf, u, v, z, label, normal_guess, opts: ReconstructOptions):
    rig, sp = lf.rig, lf.spectral
    B = u.size
    X = center_view_points(u, v, z, rig)
    M, msk = sampler.sample(X)
    rows = column_medians(M, msk)
    beta = np.zeros(B)
    shin = np.full(B, np.nan)
    spec_normal = None if normal_guess is None else normal_guess.copy()
    geom = PointGeometry.from_points(X, rig)
    G, gm = normalized_gradients(M, msk, geom, sp)
    cand = np.flatnonzero((label == SPECULAR) & (gm.sum(axis=(1, 2)) >= opts.min_gradients))
    if cand.size:
        g = geom.subset(cand)
        guess = None if normal_guess is None else normal_guess[cand]
        fit = fit_specular(G[cand], gm[cand], g, normal_guess=guess,
                           max_iter=opts.specular_iterations, scan_count=opts.specular_scan)
        _, rows[cand] = remove_specular(M[cand], msk[cand], fit, g, sp)
        beta[cand] = fit.specular
        shin[cand] = fit.shininess
        if spec_normal is None:
            spec_normal = -X / np.linalg.norm(X, axis=1, keepdims=True)
        spec_normal[cand] = fit.normal
    valid = np.isfinite(rows)
    rows = np.where(valid, rows, 0.0)
    ps = solve_rows(rows, X, rig, sp, normal_guess=spec_normal, row_valid=valid)
    return ps, beta, shin


def _relabel(sampler, u, v, z, rig, threshold):
    X = center_view_points(u, v, z, rig)
    M, msk = sampler.sample(X)
    C = photo_consistency_batch(M, msk)
    mean = M.sum(axis=(1, 2)) / np.maximum(msk.sum(axis=(1, 2)), 1)
    return np.where(np.nan_to_num(C, nan=np.inf) > threshold * mean, SPECULAR, DIFFUSE)


def reconstruct(lf, opts: ReconstructOptions | None = None) -> SurfaceEstimate:
    """Recover depth, normals, reflectance coefficients and specular maps.

    The sweep gives initial depths and diffuse/specular labels.  Each pass
    then removes the fitted specular component from specular pixels, solves
    photometric stereo on the specular-free rows and integrates the normals
    into depth.  Later passes resample at the integrated depth and relabel
    with the same ``tau_C`` rule.
    """
    opts = opts or ReconstructOptions()
    rig = lf.rig
    if lf.spectral is None:
        raise SurfaceError("light field carries no spectral model")
    if lf.images.shape != (rig.cameras_per_ring, rig.num_rings, rig.image_height, rig.image_width):
        raise SurfaceError("light field does not match the rig")
    H, W = rig.image_height, rig.image_width
    sampler = Sampler(lf.images, rig)
    fine = sampler if opts.kernel == "linear" else Sampler(lf.images, rig, kernel=opts.kernel)
    vv, uu = np.mgrid[0:H, 0:W]
    u_all, v_all = uu.ravel().astype(float), vv.ravel().astype(float)
    sw = sweep_pixels(sampler, rig, u_all, v_all, opts.sweep, spectral=lf.spectral)
    mask = (sw.label != INVALID).reshape(H, W)
    if not mask.any():
        raise SurfaceError("no foreground pixels found")
    sel = np.flatnonzero(mask.ravel())
    u, v = u_all[sel], v_all[sel]
    label = sw.label[sel].copy()
    z = sw.depth[sel].astype(float)
    # a sweep minimum at either end of the range may lie outside it: no anchor
    step = rig.depth_step
    pinned = (z <= rig.depth_min + 0.5 * step) | (z >= rig.depth_max - 0.5 * step)
    log.info("sweep: %d foreground pixels, %d specular", sel.size, int((label == SPECULAR).sum()))

    nb = lf.spectral.basis_dim
    normal = None
    pass_normals = []
    depth_map = np.zeros(H * W)
    for k in range(opts.passes):
        if k > 0:
            label = _relabel(fine, u, v, z, rig, opts.relabel_threshold)
        ps, beta, shin = _single_pass(fine, lf, u, v, z, label, normal, opts)
        normal = ps.normal
        nmap = np.zeros((H * W, 3))
        nmap[sel] = normal
        amap = np.zeros(H * W)
        amap[sel] = z
        wmap = np.zeros(H * W)
        wmap[sel] = np.where(pinned, 0.0, opts.anchor_weight)
        depth_map = integrate_normals(nmap.reshape(H, W, 3), mask, amap.reshape(H, W), rig,
                                      wmap.reshape(H, W)).ravel()
        # keep the unclipped depth for resampling; only the output is clipped
        z = depth_map[sel]
        if opts.refine_scale:
            comp = ndimage.label(mask)[0].ravel()[sel]
            for cid in np.unique(comp):
                inc = comp == cid
                use = inc & (label == DIFFUSE)
                if use.sum() >= 3:
                    z[inc] *= refine_scale(fine, u[use], v[use], z[use], rig)
        pinned = (z < rig.depth_min) | (z > rig.depth_max)
        pass_normals.append(nmap.reshape(H, W, 3))
        log.info("pass %d done", k + 1)
    if opts.final_solve:
        # reflectance from the last pass belongs to the depth it started from
        label = _relabel(fine, u, v, z, rig, opts.relabel_threshold)
        ps, beta, shin = _single_pass(fine, lf, u, v, z, label, normal, opts)
        normal = ps.normal

    def full(vals, fill, shape=()):
        out = np.full((H * W,) + shape, fill, dtype=float)
        out[sel] = vals
        return out.reshape((H, W) + shape)

    lab = np.full(H * W, INVALID, dtype=np.int8)
    lab[sel] = label
    return SurfaceEstimate(
        depth=full(np.clip(z, rig.depth_min, rig.depth_max), 0.0),
        normal=full(normal, 0.0, (3,)), coefficients=full(ps.coefficients, 0.0, (nb,)),
        specular=full(beta, 0.0), shininess=full(shin, np.nan), label=lab.reshape(H, W),
        mask=mask, sweep_depth=sw.depth.reshape(H, W),
        sweep_label=sw.label.reshape(H, W).astype(np.int8), pass_normals=pass_normals)


def depth_mesh(depth: np.ndarray, mask: np.ndarray, rig: RigConfig):
    """Triangulate the masked depth map: two triangles per fully masked pixel quad.

    Returns vertices (V, 3), faces (F, 3) and the flat pixel index of each vertex.
    """
    H, W = mask.shape
    pix = np.flatnonzero(mask.ravel())
    index = np.full(H * W, -1, dtype=np.int64)
    index[pix] = np.arange(pix.size)
    v, u = np.divmod(pix, W)
    verts = center_view_points(u.astype(float), v.astype(float), depth.ravel()[pix], rig)
    m = mask
    quad = m[:-1, :-1] & m[:-1, 1:] & m[1:, :-1] & m[1:, 1:]
    qv, qu = np.nonzero(quad)
    a = index[qv * W + qu]
    b = index[qv * W + qu + 1]
    c = index[(qv + 1) * W + qu]
    d = index[(qv + 1) * W + qu + 1]
    # image v points down, so (a, c, b) faces the camera
    faces = np.concatenate([np.stack([a, c, b], 1), np.stack([b, c, d], 1)])
    return verts, faces, pix
