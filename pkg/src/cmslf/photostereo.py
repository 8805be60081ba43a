"""Multi-spectral photometric stereo on the specular-free MSS-Cam row.

Band ``j`` of a diffuse point sees ``y_j = (c . W_j)(L_j . N)`` once the light
falloff has been multiplied back in.  The product of coefficients and normal
makes this bilinear; writing it in the lifted variable ``Z = c N^T`` gives a
linear system in ``3w`` unknowns whose solution factors into ``(c, N)`` by a
rank-1 decomposition.  When there are too few bands for the lifted system
the bilinear form is solved directly with damped least squares.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lm import levenberg_marquardt
from .rig import RigConfig
from .spectral import SpectralModel, dense_reflectance
from .specular import hemisphere_directions, normal_from_tangent, tangent_frame

LIFTED, BILINEAR = "lifted-linear", "bilinear-damped"
RANK_TOL = 1e-10


class PhotometricError(ValueError):
    pass


@dataclass
class PhotometricSolveResult:
    normal: np.ndarray         # (3,) or (B, 3)
    coefficients: np.ndarray   # (w,) or (B, w)
    residual: np.ndarray       # RMS misfit of the falloff-corrected row
    method: np.ndarray | str
    converged: np.ndarray | bool = True
    rank_ratio: np.ndarray | float = 0.0   # second / first singular value of Z (lifted only)

    def __getitem__(self, i) -> "PhotometricSolveResult":
        pick = lambda a: a[i] if isinstance(a, np.ndarray) else a
        return PhotometricSolveResult(pick(self.normal), pick(self.coefficients), pick(self.residual),
                                      pick(self.method), pick(self.converged), pick(self.rank_ratio))


def lifted_design(L: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``A[..., j, 3k + d] = W[k, j] L[..., j, d]`` for ``L`` (..., m, 3) and ``W`` (w, m)."""
    A = W.T[..., :, None] * L[..., None, :]          # (..., m, w, 3)
    return A.reshape(A.shape[:-2] + (-1,))


def _prepare(rows, L, falloff, weights):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    B, m = rows.shape
    L = np.broadcast_to(np.asarray(L, dtype=float), (B, m, 3))
    falloff = np.broadcast_to(np.asarray(falloff, dtype=float), (B, m))
    w = np.ones((B, m)) if weights is None else np.broadcast_to(np.asarray(weights, float), (B, m))
    return rows, L, falloff, w


def _orient(N, c, toward):
    flip = np.einsum("bk,bk->b", N, toward) < 0
    N = np.where(flip[:, None], -N, N)
    c = np.where(flip[:, None], -c, c)
    return N, c


def _residual(y, c, N, L, W, w, clamp=False):
    shade = np.einsum("bmk,bk->bm", L, N)
    if clamp:
        shade = np.clip(shade, 0.0, None)
    pred = (c @ W) * shade
    return np.sqrt((w * (pred - y) ** 2).sum(axis=1) / np.maximum(w.sum(axis=1), 1e-300))


def solve_lifted_batch(rows, L, W, falloff, toward=None, weights=None) -> PhotometricSolveResult:
    """Lifted-linear solve for a batch of rows (B, m).

    ``falloff`` holds ``|P_j - X|^2`` and multiplies the rows before solving;
    ``toward`` (B, 3) points from the surface to the rig and fixes the sign
    of the normal; ``weights`` (B, m) down-weight equations.
    """
    rows, L, falloff, w = _prepare(rows, L, falloff, weights)
    W = np.asarray(W, dtype=float)
    nb, m = W.shape
    B = rows.shape[0]
    if 3 * nb > m:
        raise PhotometricError(f"lifted solve needs 3w <= m, got w={nb}, m={m}")
    if np.any(np.all(rows == 0, axis=1)):
        raise PhotometricError("all-zero row: no signal")
    toward = np.broadcast_to(np.array([0.0, 0.0, -1.0]) if toward is None else toward, (B, 3))
    y = rows * falloff
    sw = np.sqrt(w)
    A = lifted_design(L, W) * sw[..., None]
    sv = np.linalg.svd(A, compute_uv=False)
    if np.any(sv[:, -1] <= RANK_TOL * sv[:, 0]):
        raise PhotometricError("rank-deficient lifted design")
    z = (np.linalg.pinv(A) @ (y * sw)[..., None])[..., 0]
    Z = z.reshape(B, nb, 3)
    U, s, Vt = np.linalg.svd(Z)
    N = Vt[:, 0, :]
    c = U[:, :, 0] * s[:, :1]
    N, c = _orient(N, c, toward)
    ratio = s[:, 1] / np.maximum(s[:, 0], 1e-300) if nb > 1 else np.zeros(B)
    res = _residual(y, c, N, L, W, w)
    return PhotometricSolveResult(N, c, res, np.full(B, LIFTED, dtype=object), np.ones(B, bool), ratio)


def bilinear_residual(x, N0, t1, t2, L, W, y, sw):
    """Weighted residuals and analytic Jacobian of the bilinear model.

    ``x`` is (B, w + 2): coefficients followed by tangent-plane coordinates
    of the normal around ``N0``.  Returns ``r`` (B, m) and ``J`` (B, m, w + 2).
    """
    nb = W.shape[0]
    N, dN = normal_from_tangent(N0, t1, t2, x[:, nb:])
    shade = np.einsum("bmk,bk->bm", L, N)
    diff = x[:, :nb] @ W
    r = (diff * shade - y) * sw
    Jc = W.T[None] * (shade * sw)[..., None]
    Jab = (diff * sw)[..., None] * np.einsum("bmk,bkp->bmp", L, dN)
    return r, np.concatenate([Jc, Jab], axis=-1)


def solve_bilinear_batch(rows, L, W, falloff, init_normal, init_coefficients=None, weights=None,
                         max_iter: int = 200) -> PhotometricSolveResult:
    """Damped least squares over ``(c, N)`` with the normal in tangent-plane coordinates.

    ``init_coefficients`` default to the best coefficients for ``init_normal``.
    """
    rows, L, falloff, w = _prepare(rows, L, falloff, weights)
    W = np.asarray(W, dtype=float)
    nb, m = W.shape
    B = rows.shape[0]
    if m < nb + 2:
        raise PhotometricError(f"bilinear solve needs m >= w + 2, got w={nb}, m={m}")
    if np.any(np.all(rows == 0, axis=1)):
        raise PhotometricError("all-zero row: no signal")
    y = rows * falloff
    sw = np.sqrt(w)
    N0 = np.broadcast_to(np.asarray(init_normal, dtype=float), (B, 3))
    N0 = N0 / np.linalg.norm(N0, axis=1, keepdims=True)
    t1, t2 = tangent_frame(N0)
    if init_coefficients is None:
        shade = np.einsum("bmk,bk->bm", L, N0)
        A = W.T[None] * shade[..., None] * sw[..., None]
        init_coefficients = (np.linalg.pinv(A) @ (y * sw)[..., None])[..., 0]
    x0 = np.concatenate([np.broadcast_to(init_coefficients, (B, nb)), np.zeros((B, 2))], axis=1)

    def fun(x, idx):
        return bilinear_residual(x, N0[idx], t1[idx], t2[idx], L[idx], W, y[idx], sw[idx])

    scale = 0.5 * (w * y ** 2).sum(axis=1)
    res = levenberg_marquardt(fun, x0, max_iter=max_iter, ftol=1e-15, xtol=1e-15,
                              cost_tol=1e-26 * scale)
    N, _ = normal_from_tangent(N0, t1, t2, res.x[:, nb:])
    c = res.x[:, :nb]
    rms = _residual(y, c, N, L, W, w)
    return PhotometricSolveResult(N, c, rms, np.full(B, BILINEAR, dtype=object), res.converged,
                                  np.zeros(B))


def scan_normals(rows, L, W, falloff, toward, weights=None, count: int = 1500,
                 max_angle_deg: float = 85.0, keep: int = 3, chunk: int = 128) -> np.ndarray:
    """The ``keep`` best of ``count`` candidate normals around ``toward``.

    Each candidate is scored by the misfit of its least-squares coefficients
    under clamped shading ``max(L_j . N, 0)``, so attached shadows need no
    separate weighting.  Returns (B, keep, 3).
    """
    rows, L, falloff, w = _prepare(rows, L, falloff, weights)
    W = np.asarray(W, dtype=float)
    B = rows.shape[0]
    y = rows * falloff * np.sqrt(w)
    best = np.zeros((B, keep, 3))
    for s0 in range(0, B, chunk):
        sl = slice(s0, min(B, s0 + chunk))
        cand = hemisphere_directions(toward[sl], count, max_angle_deg)      # (b, K, 3)
        shade = np.clip(np.einsum("bmk,bck->bcm", L[sl], cand), 0.0, None) * np.sqrt(w[sl])[:, None]
        A = shade[..., None] * W.T[None, None]                              # (b, K, m, w)
        At = np.swapaxes(A, -1, -2)
        AtA = At @ A
        ridge = 1e-12 * np.einsum("...ii->...", AtA)[..., None, None] * np.eye(W.shape[0])
        Aty = At @ y[sl][:, None, :, None]
        coef = np.linalg.solve(AtA + ridge + 1e-300 * np.eye(W.shape[0]), Aty)
        # misfit = |y|^2 - y.A c at the least-squares solution
        cost = (y[sl] ** 2).sum(axis=-1)[:, None] - (Aty * coef).sum(axis=(-1, -2))
        k = np.argsort(cost, axis=1, kind="stable")[:, :keep]
        best[sl] = cand[np.arange(cand.shape[0])[:, None], k]
    return best


def solve_lifted(row, L, W, falloff, toward=None) -> PhotometricSolveResult:
    """Single-point lifted-linear solve; see :func:`solve_lifted_batch`."""
    t = None if toward is None else np.asarray(toward, float)[None]
    r = solve_lifted_batch(np.asarray(row, float)[None], np.asarray(L, float)[None], W,
                           np.asarray(falloff, float)[None], t)
    return r[0]


def solve_bilinear(row, L, W, falloff, init, init_coefficients=None) -> PhotometricSolveResult:
    """Single-point bilinear solve from an initial normal."""
    c0 = None if init_coefficients is None else np.asarray(init_coefficients, float)[None]
    r = solve_bilinear_batch(np.asarray(row, float)[None], np.asarray(L, float)[None], W,
                             np.asarray(falloff, float)[None], np.asarray(init, float)[None], c0)
    return r[0]


def recover_reflectance(c, spectral: SpectralModel) -> np.ndarray:
    """Dense reflectance curve(s) ``c B``."""
    return dense_reflectance(spectral, c)


def solve_rows(rows: np.ndarray, X: np.ndarray, rig: RigConfig, spectral: SpectralModel,
               normal_guess: np.ndarray | None = None, row_valid: np.ndarray | None = None,
               polish: bool = True) -> PhotometricSolveResult:
    """Per-pixel photometric stereo for rows (B, m) of points ``X`` (B, 3).

    Starts from the lifted solve when ``3w <= m``, drops bands predicted to
    be self-shadowed (``L_j . N <= 0``) and solves once more.  With
    ``polish`` every point is then refined by the bilinear solver, which
    enforces the rank-1 structure the lifted system ignores and is far less
    sensitive to noise in the rows.  Points without a usable lifted system
    start from ``normal_guess`` or the rig-facing direction.
    """
    rows = np.asarray(rows, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    B, m = rows.shape
    W = spectral.W
    nb = W.shape[0]
    PX = rig.light_positions()[None] - X[:, None, :]
    falloff = np.einsum("bmk,bmk->bm", PX, PX)
    L = PX / np.sqrt(falloff)[..., None]
    toward = -X / np.linalg.norm(X, axis=1, keepdims=True)
    valid = np.ones((B, m), bool) if row_valid is None else np.asarray(row_valid, bool)
    weights = valid.astype(float)

    N = toward.copy() if normal_guess is None else np.array(normal_guess, dtype=float)
    c = np.zeros((B, nb))
    res = np.full(B, np.inf)
    method = np.full(B, BILINEAR, dtype=object)
    conv = np.zeros(B, bool)
    ratio = np.zeros(B)
    signal = np.any(rows * weights != 0, axis=1)

    def lifted_on(idx, wts):
        if 3 * nb > m or idx.size == 0:
            return np.zeros(idx.size, bool)
        A = lifted_design(L[idx], W) * np.sqrt(wts)[..., None]
        sv = np.linalg.svd(A, compute_uv=False)
        ok = (sv[:, -1] > RANK_TOL * sv[:, 0]) & ((wts > 0).sum(axis=1) >= 3 * nb)
        sel = idx[ok]
        if sel.size:
            r = solve_lifted_batch(rows[sel], L[sel], W, falloff[sel], toward[sel], wts[ok])
            N[sel], c[sel], res[sel], ratio[sel] = r.normal, r.coefficients, r.residual, r.rank_ratio
            method[sel] = LIFTED
            conv[sel] = True
        return ok

    idx = np.flatnonzero(signal)
    solved = np.zeros(B, bool)
    solved[idx[lifted_on(idx, weights[idx])]] = True
    # drop bands the lifted normal leaves in attached shadow and solve again
    lit = np.einsum("bmk,bk->bm", L, N) > 0
    redo = np.flatnonzero(solved & np.any(valid & ~lit, axis=1))
    if redo.size:
        solved[redo] = lifted_on(redo, (valid & lit)[redo].astype(float))

    sel = np.flatnonzero(signal if polish else signal & ~solved)
    sel = sel[valid[sel].sum(axis=1) >= nb + 2]
    if sel.size:
        # starts: the current normal and the best few of a coarse scan; each
        # start drops the bands it predicts to be shadowed, and the results
        # are compared by their clamped-shading misfit over all valid bands
        alt = scan_normals(rows[sel], L[sel], W, falloff[sel], toward[sel], weights[sel])
        starts = np.concatenate([N[sel][:, None], alt], axis=1)
        S = starts.shape[1]
        rep = np.repeat(sel, S)
        st = starts.reshape(-1, 3)
        wts = (valid[rep] & (np.einsum("bmk,bk->bm", L[rep], st) > 0)).astype(float)
        enough = wts.sum(axis=1) >= nb + 2
        wts[~enough] = valid[rep][~enough]
        r = solve_bilinear_batch(rows[rep], L[rep], W, falloff[rep], st, weights=wts)
        full = _residual(rows[rep] * falloff[rep], r.coefficients, r.normal, L[rep], W,
                         valid[rep].astype(float), clamp=True)
        k = np.argmin(full.reshape(-1, S), axis=1)
        pick = np.arange(sel.size) * S + k
        N[sel], c[sel], res[sel], conv[sel] = (r.normal[pick], r.coefficients[pick],
                                               full[pick], r.converged[pick])
        method[sel] = BILINEAR
    return PhotometricSolveResult(N, c, res, method, conv, ratio)
