"""Specular parameter estimation from MSS-Cam spoke gradients, and removal.

Within one column the light, normal and falloff are fixed, so the diffuse
term is identical for every spoke and cancels in the spoke-to-spoke
difference.  What remains is ``beta * ((D.V_{i+1})^s - (D.V_i)^s)`` scaled by
``JEQ_j / |P_j - X|^2``; normalising by that factor gives the quantity fitted
here for the normal, shininess ``s`` and specular reflectivity ``beta``.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
import warnings

import numpy as np

from .lm import levenberg_marquardt
from .rig import RigConfig
from .spectral import SpectralModel

SHININESS_BOUNDS = (1.0, 200.0)
SHININESS_INIT = 10.0


class SpecularError(ValueError):
    pass


@dataclass
class SpecularFit:
    normal: np.ndarray      # (B, 3)
    shininess: np.ndarray   # (B,)
    specular: np.ndarray    # (B,) beta
    residual: np.ndarray    # (B,) RMS residual of the normalised gradients
    converged: np.ndarray   # (B,) bool
    degenerate: np.ndarray  # (B,) True when there was no specular signal


@dataclass
class PointGeometry:
    """Light and view geometry of points ``X`` (B, 3) seen by the rig."""

    X: np.ndarray
    L: np.ndarray    # (B, m, 3) unit directions to the lights
    d2: np.ndarray   # (B, m) squared light distances
    V: np.ndarray    # (B, n, m, 3) unit directions to the cameras

    @classmethod
    def from_points(cls, X: np.ndarray, rig: RigConfig) -> "PointGeometry":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        PX = rig.light_positions()[None] - X[:, None, :]
        d2 = np.einsum("bmk,bmk->bm", PX, PX)
        L = PX / np.sqrt(d2)[..., None]
        cams = rig.camera_positions()
        C = np.concatenate([cams, np.zeros(cams.shape[:2] + (1,))], axis=-1)
        CV = C[None] - X[:, None, None, :]
        V = CV / np.linalg.norm(CV, axis=-1, keepdims=True)
        return cls(X, L, d2, V)

    def subset(self, idx) -> "PointGeometry":
        return PointGeometry(self.X[idx], self.L[idx], self.d2[idx], self.V[idx])


def vertical_gradients(M: np.ndarray, mask: np.ndarray):
    """Spoke-to-spoke differences ``M[i+1] - M[i]`` along each column.

    Works on one MSS-Cam (n, m) or a batch (B, n, m); returns the gradients
    and a mask of pairs where both entries are valid.
    """
    dM = M[..., 1:, :] - M[..., :-1, :]
    dmask = mask[..., 1:, :] & mask[..., :-1, :]
    return np.where(dmask, dM, 0.0), dmask


def normalized_gradients(M, mask, geom: PointGeometry, spectral: SpectralModel):
    """Gradients multiplied by ``|P_j - X|^2 / JEQ_j``."""
    dM, dmask = vertical_gradients(M, mask)
    scale = geom.d2 / spectral.JEQ[None, :]
    if dM.ndim == 2:
        scale = scale[0]
    return dM * scale[..., None, :], dmask


def tangent_frame(N0: np.ndarray):
    """Two unit vectors orthogonal to each row of ``N0``."""
    a = np.where(np.abs(N0[:, 0:1]) < 0.9, np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
    t1 = np.cross(N0, a)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(N0, t1)
    return t1, t2


def normal_from_tangent(N0, t1, t2, ab):
    """Normal at tangent-plane coordinates ``ab`` around ``N0`` and its Jacobian."""
    nv = N0 + ab[:, 0:1] * t1 + ab[:, 1:2] * t2
    ln = np.linalg.norm(nv, axis=1, keepdims=True)
    N = nv / ln
    proj = (np.eye(3)[None] - N[:, :, None] * N[:, None, :]) / ln[..., None]
    dN = np.stack([np.einsum("bij,bj->bi", proj, t1), np.einsum("bij,bj->bi", proj, t2)], axis=-1)
    return N, dN    # dN: (B, 3, 2)


def lobe(N, L, V, shininess):
    """``max(D.V, 0)^s`` for every spoke/ring and its derivatives.

    The lobe is zero in attached shadow (``L.N <= 0``).

    Returns ``f (B, n, m)``, ``df/dN (B, n, m, 3)`` and ``df/dlog(s) (B, n, m)``.
    """
    LN = (L @ N[:, :, None])[..., 0]
    D = 2.0 * LN[..., None] * N[:, None, :] - L
    DV = (V * D[:, None]).sum(axis=-1)
    NV = (V @ N[:, None, :, None])[..., 0]
    pos = (DV > 0) & (LN[:, None, :] > 0)
    DVc = np.where(pos, DV, 1.0)
    s = shininess[:, None, None]
    f = np.where(pos, DVc ** s, 0.0)
    fs1 = np.where(pos, s * DVc ** (s - 1.0), 0.0)
    dDV_dN = 2.0 * NV[..., None] * L[:, None, :, :] + 2.0 * LN[:, None, :, None] * V
    df_dN = fs1[..., None] * dDV_dN
    df_dlogs = np.where(pos, f * np.log(DVc) * s, 0.0)
    return f, df_dN, df_dlogs


def gradient_model(params, N0, t1, t2, geom: PointGeometry):
    """Predicted normalised gradients and Jacobian w.r.t. ``(a, b, log s, beta)``."""
    N, dN = normal_from_tangent(N0, t1, t2, params[:, 0:2])
    s = np.exp(params[:, 2])
    beta = params[:, 3]
    f, df_dN, df_dlogs = lobe(N, geom.L, geom.V, s)
    df = f[:, 1:] - f[:, :-1]
    pred = beta[:, None, None] * df
    dgN = df_dN[:, 1:] - df_dN[:, :-1]                         # (B, n-1, m, 3)
    J_ab = beta[:, None, None, None] * (dgN @ dN[:, None])
    J_s = beta[:, None, None] * (df_dlogs[:, 1:] - df_dlogs[:, :-1])
    J = np.concatenate([J_ab, J_s[..., None], df[..., None]], axis=-1)
    return pred, J


_LOG_S_BOUNDS = (math.log(SHININESS_BOUNDS[0]), math.log(SHININESS_BOUNDS[1]))


def _project(x):
    x = x.copy()
    x[:, 2] = np.clip(x[:, 2], *_LOG_S_BOUNDS)
    x[:, 3] = np.maximum(x[:, 3], 0.0)
    # keep the tangent offset on the hemisphere around the reference normal
    x[:, 0:2] = np.clip(x[:, 0:2], -3.0, 3.0)
    return x


def hemisphere_directions(axis: np.ndarray, count: int, max_angle_deg: float) -> np.ndarray:
    """Fibonacci-spiral unit vectors within a cone around each row of ``axis``.

    Returns (B, count, 3).
    """
    k = np.arange(count) + 0.5
    cos_max = math.cos(math.radians(max_angle_deg))
    ct = 1.0 - (1.0 - cos_max) * k / count
    st = np.sqrt(1.0 - ct ** 2)
    ph = k * math.pi * (3.0 - math.sqrt(5.0))
    local = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1)
    t1, t2 = tangent_frame(axis)
    return (local[None, :, 0:1] * t1[:, None] + local[None, :, 1:2] * t2[:, None]
            + local[None, :, 2:3] * axis[:, None])


def scan_normals(G, gmask, geom: PointGeometry, count: int = 300, max_angle_deg: float = 80.0,
                 shininess=(4.0, 12.0, 40.0), keep: int = 3, chunk: int = 64):
    """Coarse search for start values.

    Every candidate normal (a cone around the rig-facing direction) and
    shininess gets its optimal ``beta`` in closed form; the ``keep`` lowest
    costs per point are returned as ``(normals (B, keep, 3), log s, beta)``.
    """
    B = G.shape[0]
    toward = -geom.X / np.linalg.norm(geom.X, axis=1, keepdims=True)
    cand = hemisphere_directions(toward, count, max_angle_deg)
    out_n = np.zeros((B, keep, 3))
    out_s = np.zeros((B, keep))
    out_b = np.zeros((B, keep))
    Gm = np.where(gmask, G, 0.0)
    for s0 in range(0, B, chunk):
        sl = slice(s0, min(B, s0 + chunk))
        Nc = cand[sl]                                            # (b, K, 3)
        L, V = geom.L[sl], geom.V[sl]
        LN = np.einsum("bmk,bck->bcm", L, Nc)
        D = 2.0 * LN[..., None] * Nc[:, :, None, :] - L[:, None]  # (b, K, m, 3)
        DV = np.clip(np.einsum("bnmk,bcmk->bcnm", V, D), 0.0, None) * (LN > 0)[:, :, None]
        best = np.full((DV.shape[0], count * len(shininess)), np.inf)
        betas = np.zeros_like(best)
        for si, sh in enumerate(shininess):
            f = DV ** sh
            df = (f[:, :, 1:] - f[:, :, :-1]) * gmask[sl][:, None]
            num = np.einsum("bcnm,bnm->bc", df, Gm[sl])
            den = np.einsum("bcnm,bcnm->bc", df, df)
            beta = np.where(den > 0, np.maximum(num, 0.0) / np.maximum(den, 1e-300), 0.0)
            cost = -beta * num
            best[:, si * count:(si + 1) * count] = cost
            betas[:, si * count:(si + 1) * count] = beta
        order = np.argsort(best, axis=1, kind="stable")[:, :keep]
        rows = np.arange(order.shape[0])[:, None]
        out_n[sl] = Nc[rows, order % count]
        out_s[sl] = np.log(np.asarray(shininess))[order // count]
        out_b[sl] = betas[rows, order]
    return out_n, out_s, out_b


def fit_specular(G: np.ndarray, gmask: np.ndarray, geom: PointGeometry,
                 normal_guess: np.ndarray | None = None, max_iter: int = 100,
                 scan_count: int = 300, keep: int = 3) -> SpecularFit:
    """Damped least-squares fit of ``(N, s, beta)`` to normalised gradients.

    ``G``/``gmask`` are (B, n-1, m).  Start values come from a coarse scan
    over normals and shininess, plus ``normal_guess`` when given; every start
    is refined and the lowest-cost solution is kept.  Pixels with no
    gradient signal are flagged degenerate with ``beta = 0``.
    """
    if G.ndim != 3:
        raise SpecularError("expected a batch of gradient matrices")
    B = G.shape[0]
    if np.any(gmask.sum(axis=(1, 2)) < 5):
        raise SpecularError("need at least 5 usable gradient equations per point")
    scale = np.sqrt((np.where(gmask, G, 0.0) ** 2).sum(axis=(1, 2)))
    degenerate = scale < 1e-12 * max(1.0, float(scale.max()) if B else 1.0)
    sn, ss, sb = scan_normals(G, gmask, geom, scan_count, keep=keep)
    if normal_guess is not None:
        g = normal_guess / np.linalg.norm(normal_guess, axis=1, keepdims=True)
        sn = np.concatenate([sn, g[:, None]], axis=1)
        ss = np.concatenate([ss, np.full((B, 1), math.log(SHININESS_INIT))], axis=1)
        sb = np.concatenate([sb, sb[:, :1]], axis=1)
    S = sn.shape[1]
    N0 = sn.reshape(-1, 3)
    t1, t2 = tangent_frame(N0)
    rep = np.repeat(np.arange(B), S)
    geom_r = geom.subset(rep)
    Gr, mr = G[rep], gmask[rep]
    wscale = 1.0 / np.where(scale[rep] > 0, scale[rep], 1.0)

    def fun(x, idx):
        g = geom_r.subset(idx)
        pred, J = gradient_model(x, N0[idx], t1[idx], t2[idx], g)
        w = mr[idx] * wscale[idx, None, None]
        r = ((pred - Gr[idx]) * w).reshape(idx.size, -1)
        Jw = (J * w[..., None]).reshape(idx.size, -1, 4)
        return r, Jw

    x0 = np.zeros((B * S, 4))
    x0[:, 2] = ss.reshape(-1)
    x0[:, 3] = np.maximum(sb.reshape(-1), 1e-6)
    res = levenberg_marquardt(fun, x0, max_iter=max_iter, ftol=1e-12, xtol=1e-12,
                              cost_tol=1e-26, project=_project)
    cost = res.cost.reshape(B, S)
    best = np.argmin(cost, axis=1)
    pick = np.arange(B) * S + best
    N, _ = normal_from_tangent(N0[pick], t1[pick], t2[pick], res.x[pick, 0:2])
    shin = np.exp(res.x[pick, 2])
    beta = res.x[pick, 3]
    nres = np.maximum(gmask.sum(axis=(1, 2)), 1)
    rms = np.sqrt(2.0 * res.cost[pick] / nres) * scale
    beta = np.where(degenerate, 0.0, beta)
    return SpecularFit(N, shin, beta, rms, res.converged[pick] & ~degenerate, degenerate)


def specular_terms(fit: SpecularFit, geom: PointGeometry, spectral: SpectralModel) -> np.ndarray:
    """Specular intensity predicted by ``fit`` for every MSS-Cam entry (B, n, m)."""
    f, _, _ = lobe(fit.normal, geom.L, geom.V, fit.shininess)
    return fit.specular[:, None, None] * f * (spectral.JEQ[None, None, :] / geom.d2[:, None, :])


def remove_specular(M: np.ndarray, mask: np.ndarray, fit: SpecularFit, geom: PointGeometry,
                    spectral: SpectralModel):
    """Specular-free MSS-Cams (clamped at 0) and their column-median rows."""
    A = np.clip(M - specular_terms(fit, geom, spectral), 0.0, None)
    return A, column_medians(A, mask)


def column_medians(A: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Median of the valid entries of every column; NaN for empty columns."""
    vals = np.where(mask, A, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmedian(vals, axis=-2)

