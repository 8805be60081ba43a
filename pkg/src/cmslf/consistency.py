"""Photo-consistency, Fourier fitting of spoke profiles and periodicity consistency.

Diffuse points sampled at the right depth give constant MSS-Cam columns, so
the mean column standard deviation ``C`` vanishes there.  Specular points do
not, but each column traces a smooth periodic curve over the spoke angle,
and the peaks of all columns must agree with a single mirror geometry.

Two periodicity measures are available.  ``"lobe"`` (the default used for
depth refinement) fits one normal/shininess/reflectivity mirror lobe to the
spoke-to-spoke gradients of all columns and scores the misfit in intensity
units.  ``"fourier"`` scores per-column Fourier residuals plus the disagreement
between fitted and predicted peak locations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .msscam import Sampler
from .rig import RigConfig, center_view_points
from .spectral import SpectralModel
from .specular import PointGeometry, fit_specular, lobe, normalized_gradients

MEASURES = ("lobe", "fourier")

DIFFUSE, SPECULAR, INVALID = 0, 1, 2
LABEL_NAMES = {DIFFUSE: "diffuse", SPECULAR: "specular", INVALID: "invalid"}


class ConsistencyError(ValueError):
    pass


# ----------------------------------------------------------------------
# photo-consistency

def photo_consistency_batch(M: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``C`` for a batch of MSS-Cams (..., n, m); NaN when no column is usable."""
    cnt = mask.sum(axis=-2)
    usable = cnt >= 2
    safe = np.maximum(cnt, 1)
    mean = np.where(mask, M, 0.0).sum(axis=-2) / safe
    var = (np.where(mask, (M - mean[..., None, :]) ** 2, 0.0)).sum(axis=-2) / safe
    std = np.sqrt(np.maximum(var, 0.0))
    ncol = usable.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(ncol > 0, np.where(usable, std, 0.0).sum(axis=-1) / ncol, np.nan)


def photo_consistency(M: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean over usable columns of the population standard deviation."""
    M = np.asarray(M, dtype=float)
    mask = np.ones(M.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    C = photo_consistency_batch(M, mask)
    if np.isnan(C):
        raise ConsistencyError("no column has two valid samples")
    return float(C)


# ----------------------------------------------------------------------
# Fourier series

def fourier_design(angles: np.ndarray, order: int) -> np.ndarray:
    """Columns ``1, cos(phi), sin(phi), ..., cos(p phi), sin(p phi)``."""
    angles = np.asarray(angles, dtype=float)
    cols = [np.ones_like(angles)]
    for p in range(1, order + 1):
        cols += [np.cos(p * angles), np.sin(p * angles)]
    return np.stack(cols, axis=-1)


@dataclass
class FourierFit:
    order: int
    a0: float
    a: np.ndarray
    b: np.ndarray
    rmse: float

    @property
    def coefficients(self) -> np.ndarray:
        out = [self.a0]
        for p in range(self.order):
            out += [self.a[p], self.b[p]]
        return np.array(out)

    def __call__(self, phi):
        return fourier_design(phi, self.order) @ self.coefficients


def fit_fourier(angles, values, order: int = 2) -> FourierFit:
    angles = np.asarray(angles, dtype=float)
    values = np.asarray(values, dtype=float)
    if angles.size < 2 * order + 1:
        raise ConsistencyError(f"order {order} needs {2 * order + 1} samples, got {angles.size}")
    A = fourier_design(angles, order)
    coef, *_ = np.linalg.lstsq(A, values, rcond=None)
    rmse = float(np.sqrt(np.mean((A @ coef - values) ** 2)))
    return FourierFit(order, float(coef[0]), coef[1::2].copy(), coef[2::2].copy(), rmse)


def fit_fourier_batch(Y: np.ndarray, valid: np.ndarray, angles: np.ndarray, order: int):
    """Least-squares fits of many rows sharing one angle grid.

    Returns ``(coef (R, 2p+1), fitted (R, n), ok (R,))``.  Fully valid rows
    share a precomputed pseudo-inverse; partial rows are solved one by one.
    """
    R, n = Y.shape
    k = 2 * order + 1
    A = fourier_design(angles, order)
    coef = np.zeros((R, k))
    full = valid.all(axis=1)
    if np.any(full):
        coef[full] = Y[full] @ np.linalg.pinv(A).T
    cnt = valid.sum(axis=1)
    ok = cnt >= k
    for r in np.flatnonzero(~full & ok):
        sel = valid[r]
        coef[r], *_ = np.linalg.lstsq(A[sel], Y[r, sel], rcond=None)
    coef[~ok] = 0.0
    return coef, coef @ A.T, ok


# ----------------------------------------------------------------------
# periodicity consistency

@dataclass
class PeriodicityTerms:
    S: np.ndarray            # (B,)
    residual: np.ndarray     # (B,) mean column residual norm
    peak: np.ndarray         # (B,) peak-location discrepancy (radians)
    normal: np.ndarray       # (B, 3) working normal from peak bisectors
    peak_angles: np.ndarray  # (B, m) observed peak spoke angles
    amplitude: np.ndarray    # (B, m) peak-to-trough of each column fit
    flagged: np.ndarray      # (B,) True when only the residual term was usable
    lobe: np.ndarray | None = None   # (B,) RMS misfit of the mirror-lobe gradient model


def _ring_grid(rig: RigConfig, samples: int):
    phi = np.arange(samples) * (2 * math.pi / samples)
    r = np.asarray(rig.ring_radii)
    ring = np.stack([r[:, None] * np.cos(phi)[None], r[:, None] * np.sin(phi)[None],
                     np.zeros((r.size, samples))], axis=-1)      # (m, G, 3)
    return phi, ring


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _wrap(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


def periodicity_terms(M: np.ndarray, mask: np.ndarray, X: np.ndarray, rig: RigConfig,
                      order: int = 2, grid: int = 720, peak_weight: float = 1.0,
                      normal: np.ndarray | None = None, spectral: SpectralModel | None = None,
                      measure: str = "fourier", scan_count: int = 60, lobe_starts: int = 2,
                      lobe_iterations: int = 30) -> PeriodicityTerms:
    """Batched periodicity consistency for MSS-Cams ``M`` (B, n, m) at points ``X``.

    With ``measure="fourier"``: ``S = residual + peak_weight * mean_amplitude * peak``.
    ``residual`` is the mean over columns of the norm of the Fourier-fit
    residual.  ``peak`` compares the peak-location curve fitted across bands
    against the locations predicted by the mirror geometry of one working
    normal; it is scaled by the mean column amplitude so both terms share
    intensity units.  The working normal is the amplitude-weighted mean of the
    per-column bisectors of light and peak viewing directions unless
    ``normal`` is given.

    With ``measure="lobe"`` (needs ``spectral``): ``S`` is the RMS intensity
    misfit of a single mirror lobe fitted to the spoke gradients of all
    columns; points with fewer than 5 usable gradients get ``S = NaN``.
    """
    if measure not in MEASURES:
        raise ConsistencyError(f"unknown measure {measure!r}")
    if measure == "lobe" and spectral is None:
        raise ConsistencyError("the lobe measure needs a spectral model")
    B, n, m = M.shape
    phi = rig.spoke_angles
    Y = M.transpose(0, 2, 1).reshape(B * m, n)
    V = mask.transpose(0, 2, 1).reshape(B * m, n)
    coef, fitted, ok = fit_fourier_batch(Y, V, phi, order)
    resid = np.where(V, Y - fitted, 0.0).reshape(B, m, n)
    norms = np.sqrt((resid ** 2).sum(axis=-1))
    ok = ok.reshape(B, m)
    ncol = ok.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        residual = np.where(ncol > 0, np.where(ok, norms, 0.0).sum(axis=1) / ncol, np.nan)

    gphi, ring = _ring_grid(rig, grid)
    Fg = (coef @ fourier_design(gphi, order).T).reshape(B, m, grid)
    kmax = np.argmax(Fg, axis=-1)
    peak_phi = gphi[kmax]
    amp = np.where(ok, Fg.max(axis=-1) - Fg.min(axis=-1), 0.0)

    lights = rig.light_positions()
    L = _unit(lights[None] - X[:, None, :])                         # (B, m, 3)
    if normal is None:
        r = np.asarray(rig.ring_radii)
        cam_peak = np.stack([r * np.cos(peak_phi), r * np.sin(peak_phi),
                             np.zeros_like(peak_phi)], axis=-1)
        Vp = _unit(cam_peak - X[:, None, :])
        bis = _unit(L + Vp)
        wsum = (amp[..., None] * bis).sum(axis=1)
        degenerate = np.linalg.norm(wsum, axis=-1) < 1e-300
        wsum[degenerate] = -X[degenerate]
        normal = _unit(wsum)
    else:
        normal = _unit(np.broadcast_to(normal, (B, 3)).astype(float))
        degenerate = np.zeros(B, dtype=bool)

    LN = np.einsum("bmk,bk->bm", L, normal)
    D = 2 * LN[..., None] * normal[:, None, :] - L                  # (B, m, 3)
    Vg = _unit(ring[None] - X[:, None, None, :])                    # (B, m, G, 3)
    pred = gphi[np.argmax(np.einsum("bmgk,bmk->bmg", Vg, D), axis=-1)]

    theta = rig.light_angles
    base = theta + math.pi
    dev = _wrap(peak_phi - base[None])
    p0 = min(order, (m - 1) // 2)
    dev_fit = np.zeros_like(dev)
    for b in range(B):
        sel = ok[b]
        if sel.sum() >= 2 * p0 + 1:
            f0 = fit_fourier(theta[sel], dev[b, sel], p0)
            dev_fit[b] = f0(theta)
    fitted_peak = base[None] + dev_fit
    disc = np.where(ok, _wrap(pred - fitted_peak), 0.0)
    peak = np.sqrt((disc ** 2).sum(axis=1))
    flagged = degenerate | (ncol < 2 * p0 + 1)
    peak = np.where(flagged, 0.0, peak)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_amp = np.where(ncol > 0, amp.sum(axis=1) / np.maximum(ncol, 1), 0.0)
    S = residual + peak_weight * mean_amp * peak
    lobe_term = None
    if measure == "lobe":
        lobe_term = lobe_misfit(M, mask, X, rig, spectral, scan_count, lobe_starts, lobe_iterations)
        S = lobe_term
    return PeriodicityTerms(S, residual, peak, normal, peak_phi, amp, flagged, lobe_term)


def lobe_misfit(M: np.ndarray, mask: np.ndarray, X: np.ndarray, rig: RigConfig,
                spectral: SpectralModel, scan_count: int = 60, starts: int = 2,
                max_iter: int = 30) -> np.ndarray:
    """RMS intensity residual of the best single-lobe fit to the spoke gradients."""
    B = M.shape[0]
    out = np.full(B, np.nan)
    geom = PointGeometry.from_points(X, rig)
    G, gm = normalized_gradients(M, mask, geom, spectral)
    cnt = gm.sum(axis=(1, 2))
    ok = np.flatnonzero(cnt >= 5)
    if ok.size == 0:
        return out
    g = geom.subset(ok)
    fit = fit_specular(G[ok], gm[ok], g, max_iter=max_iter, scan_count=scan_count, keep=starts)
    f, _, _ = lobe(fit.normal, g.L, g.V, fit.shininess)
    pred = fit.specular[:, None, None] * (f[:, 1:] - f[:, :-1])
    back = spectral.JEQ[None, :] / g.d2                               # (b, m)
    r = np.where(gm[ok], (G[ok] - pred) * back[:, None, :], 0.0)
    out[ok] = np.sqrt((r ** 2).sum(axis=(1, 2)) / cnt[ok])
    return out


def periodicity_consistency(M: np.ndarray, X, rig: RigConfig, mask=None, **kw) -> float:
    """Scalar ``S`` of one MSS-Cam; keyword arguments go to :func:`periodicity_terms`."""
    M = np.asarray(M, dtype=float)
    mask = np.ones(M.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not np.any(mask.sum(axis=0) >= 5):
        raise ConsistencyError("no column can be fitted")
    t = periodicity_terms(M[None], mask[None], np.asarray(X, float)[None], rig, **kw)
    return float(t.S[0])


# ----------------------------------------------------------------------
# depth sweep

@dataclass
class SweepOptions:
    diffuse_threshold: float = 0.02    # tau_C relative to the mean MSS-Cam intensity
    foreground_threshold: float = 1e-3  # relative to the brightest light-field sample
    mixed_fraction: float = 0.05        # max share of dark samples in lit columns of a foreground pixel
    window: int | None = None           # S-refinement half window in depth steps, None = whole sweep
    stride: int = 4                     # coarse step of the S window before local refinement
    measure: str = "lobe"
    order: int = 2
    peak_grid: int = 720
    peak_weight: float = 1.0
    scan_count: int = 60
    lobe_starts: int = 2
    lobe_iterations: int = 30
    chunk: int = 4096

    def __post_init__(self):
        if self.measure not in MEASURES:
            raise ConsistencyError(f"unknown measure {self.measure!r}")
        if self.diffuse_threshold < 0 or (self.window is not None and self.window < 0) or self.stride < 1:
            raise ConsistencyError("invalid sweep options")


@dataclass
class DepthHypothesisResult:
    depth: float
    C: float
    S: float
    label: int

    @property
    def label_name(self) -> str:
        return LABEL_NAMES[self.label]


@dataclass
class SweepResult:
    depth: np.ndarray        # (P,)
    C: np.ndarray            # (P,) C at the C-minimum
    S: np.ndarray            # (P,) S at the chosen depth (NaN for diffuse)
    label: np.ndarray        # (P,)
    C_curve: np.ndarray      # (P, D)
    S_curve: np.ndarray = field(default=None)   # (P, 2*half+1) offsets around the C-minimum, or None


def _chunks(P, size):
    for s in range(0, P, size):
        yield slice(s, min(P, s + size))


def sweep_pixels(sampler: Sampler, rig: RigConfig, u: np.ndarray, v: np.ndarray,
                 opts: SweepOptions | None = None, keep_s_curves: bool = False,
                 spectral: SpectralModel | None = None) -> SweepResult:
    """Plane sweep for many center-view pixels.

    Depth is ``argmin C``; ties go to the smaller depth.  Pixels that are
    dark at that depth, or whose lit columns contain more than
    ``mixed_fraction`` dark samples, are invalid (background).  Pixels whose
    minimal ``C`` exceeds ``tau_C`` times the mean MSS-Cam intensity are
    labelled specular and re-swept with ``S`` over a window around the
    C-minimum (by default the whole sweep range): first every ``stride``
    steps, then step by step around the best value.
    Unevaluated window entries stay NaN in ``S_curve``.
    """
    opts = opts or SweepOptions()
    if opts.measure == "lobe" and spectral is None:
        raise ConsistencyError("the lobe measure needs a spectral model")
    depths = rig.depths
    P, D = u.size, depths.size
    Ccurve = np.full((P, D), np.nan)
    mean_at = np.zeros((P, D))
    for di, z in enumerate(depths):
        for sl in _chunks(P, opts.chunk):
            X = center_view_points(u[sl], v[sl], z, rig)
            M, mask = sampler.sample(X)
            Ccurve[sl, di] = photo_consistency_batch(M, mask)
            cnt = np.maximum(mask.sum(axis=(1, 2)), 1)
            mean_at[sl, di] = M.sum(axis=(1, 2)) / cnt
    filled = np.where(np.isnan(Ccurve), np.inf, Ccurve)
    k = np.argmin(filled, axis=1)
    rows = np.arange(P)
    Cmin = filled[rows, k]
    mean_min = mean_at[rows, k]
    peak_val = float(sampler.flat.max()) if sampler.flat.size else 0.0
    dark = opts.foreground_threshold * peak_val
    fg = np.isfinite(Cmin) & (mean_min > dark)
    # silhouette and background pixels mix object and background samples in
    # lit columns; attached shadows darken whole columns and do not count
    mixed = np.zeros(P)
    for sl in _chunks(P, opts.chunk):
        X = center_view_points(u[sl], v[sl], depths[k[sl]], rig)
        M, mask = sampler.sample(X)
        lit_col = np.where(mask, M, 0.0).max(axis=1) > dark
        dark_in_lit = (mask & (M <= dark) & lit_col[:, None, :]).sum(axis=(1, 2))
        mixed[sl] = dark_in_lit / np.maximum((mask & lit_col[:, None, :]).sum(axis=(1, 2)), 1)
    fg &= mixed <= opts.mixed_fraction
    label = np.where(fg, DIFFUSE, INVALID)
    spec = fg & (Cmin > opts.diffuse_threshold * mean_min)
    label[spec] = SPECULAR
    depth = depths[k].astype(float)
    S = np.full(P, np.nan)
    Scurve = None
    sidx = np.flatnonzero(spec)
    if sidx.size:
        half = D - 1 if opts.window is None else opts.window
        offs = np.arange(-half, half + 1)
        Sc = np.full((sidx.size, offs.size), np.nan)

        def evaluate(rows, oi):
            # rows index sidx; oi index offs, both arrays of equal length
            kk = k[sidx[rows]] + offs[oi]
            inside = (kk >= 0) & (kk < D) & np.isnan(Sc[rows, oi])
            rows, oi, kk = rows[inside], oi[inside], kk[inside]
            for sl in _chunks(rows.size, opts.chunk):
                pix = sidx[rows[sl]]
                X = center_view_points(u[pix], v[pix], depths[kk[sl]], rig)
                M, mask = sampler.sample(X)
                t = periodicity_terms(M, mask, X, rig, opts.order, opts.peak_grid, opts.peak_weight,
                                      spectral=spectral, measure=opts.measure,
                                      scan_count=opts.scan_count, lobe_starts=opts.lobe_starts,
                                      lobe_iterations=opts.lobe_iterations)
                Sc[rows[sl], oi[sl]] = np.where(np.isnan(t.S), np.inf, t.S)

        coarse = np.unique(np.concatenate([np.arange(0, offs.size, opts.stride), [half]]))
        nr = sidx.size
        evaluate(np.repeat(np.arange(nr), coarse.size), np.tile(coarse, nr))
        # refine around the coarse minimum until it is a local minimum on the full grid
        for _ in range(offs.size):
            filled = np.where(np.isnan(Sc), np.inf, Sc)
            best = np.argmin(filled, axis=1)
            nb = np.stack([best - 1, best + 1], axis=1)
            valid = (nb >= 0) & (nb < offs.size)
            todo = valid & np.isnan(Sc[np.arange(nr)[:, None], np.clip(nb, 0, offs.size - 1)])
            if not np.any(todo):
                break
            r_, c_ = np.nonzero(todo)
            evaluate(r_, nb[r_, c_])
        filled = np.where(np.isnan(Sc), np.inf, Sc)
        best = np.argmin(filled, axis=1)
        val = filled[np.arange(nr), best]
        good = np.isfinite(val)
        kk = np.clip(k[sidx] + offs[best], 0, D - 1)
        depth[sidx[good]] = depths[kk[good]]
        S[sidx] = np.where(good, val, np.nan)
        if keep_s_curves:
            Scurve = np.full((P, offs.size), np.nan)
            Scurve[sidx] = np.where(np.isfinite(Sc), Sc, np.nan)
    return SweepResult(depth, np.where(np.isfinite(Cmin), Cmin, np.nan), S, label, Ccurve, Scurve)


def depth_sweep(lf, u: int, v: int, opts: SweepOptions | None = None,
                sampler: Sampler | None = None) -> DepthHypothesisResult:
    """Sweep a single center-view pixel."""
    sampler = sampler or Sampler(lf.images, lf.rig)
    r = sweep_pixels(sampler, lf.rig, np.array([float(u)]), np.array([float(v)]), opts,
                     spectral=lf.spectral)
    if r.label[0] == INVALID and not np.isfinite(r.C[0]):
        raise ConsistencyError(f"pixel ({u}, {v}) has no valid depth hypothesis")
    return DepthHypothesisResult(float(r.depth[0]), float(r.C[0]), float(r.S[0]), int(r.label[0]))
