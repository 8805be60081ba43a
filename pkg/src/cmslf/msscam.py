"""Multi-spectral surface cameras: light-field resampling for one 3D point.

Row ``i`` of an MSS-Cam holds spoke ``i``; column ``j`` holds ring ``j`` and
therefore band ``j``.  Entries whose projection falls outside the image are
masked out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rig import RigConfig, center_view_points, project_points


class SamplingError(ValueError):
    pass


@dataclass
class MSSCam:
    M: np.ndarray       # (n, m)
    X: np.ndarray       # (3,)
    mask: np.ndarray    # (n, m) bool

    @property
    def usable_columns(self) -> np.ndarray:
        return self.mask.sum(axis=0) >= 2


def bilinear_fetch(image: np.ndarray, u: float, v: float) -> float:
    H, W = image.shape
    if not (0 <= u <= W - 1 and 0 <= v <= H - 1):
        raise SamplingError(f"({u}, {v}) outside the {W}x{H} image")
    u0 = min(int(np.floor(u)), W - 2)
    v0 = min(int(np.floor(v)), H - 2)
    a, b = u - u0, v - v0
    im = image.astype(float)
    return float((1 - b) * ((1 - a) * im[v0, u0] + a * im[v0, u0 + 1])
                 + b * ((1 - a) * im[v0 + 1, u0] + a * im[v0 + 1, u0 + 1]))


def keys_weights(t: np.ndarray) -> np.ndarray:
    """Cubic convolution weights (a = -1/2) of the taps at offsets -1, 0, 1, 2."""
    t2, t3 = t * t, t * t * t
    return np.stack([-0.5 * t3 + t2 - 0.5 * t,
                     1.5 * t3 - 2.5 * t2 + 1.0,
                     -1.5 * t3 + 2.0 * t2 + 0.5 * t,
                     0.5 * t3 - 0.5 * t2], axis=-1)


class Sampler:
    """Batched resampling of a light field at arbitrary 3D points.

    ``kernel`` is ``"linear"`` (bilinear, 2x2 taps) or ``"cubic"`` (cubic
    convolution, 4x4 taps, exact for quadratics).  Cubic samples whose taps
    leave the image or touch a zero pixel (background or attached shadow)
    are masked out, so they never mix in values across those boundaries.
    """

    def __init__(self, images: np.ndarray, rig: RigConfig, kernel: str = "linear"):
        if kernel not in ("linear", "cubic"):
            raise SamplingError(f"unknown kernel {kernel!r}")
        self.kernel = kernel
        self.rig = rig
        n, m, H, W = images.shape
        self.shape = (n, m, H, W)
        self.flat = np.ascontiguousarray(images).reshape(-1)
        self.cams = rig.camera_positions()
        self.base = (np.arange(n)[:, None] * m + np.arange(m)[None, :]) * (H * W)

    def sample(self, X: np.ndarray):
        """``X`` (B, 3) -> ``(M, mask)`` both (B, n, m); masked entries are 0."""
        n, m, H, W = self.shape
        u, v = project_points(X[:, None, None, :], self.cams[None], self.rig)
        if self.kernel == "cubic":
            return self._cubic(u, v)
        valid = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
        u = np.where(valid, u, 0.0)
        v = np.where(valid, v, 0.0)
        u0 = np.minimum(np.floor(u).astype(np.int64), W - 2)
        v0 = np.minimum(np.floor(v).astype(np.int64), H - 2)
        a = u - u0
        b = v - v0
        k = self.base[None] + v0 * W + u0
        f = self.flat
        top = (1 - a) * f[k] + a * f[k + 1]
        bot = (1 - a) * f[k + W] + a * f[k + W + 1]
        M = (1 - b) * top + b * bot
        return np.where(valid, M, 0.0), valid

    def _cubic(self, u, v):
        n, m, H, W = self.shape
        valid = (u >= 1) & (u <= W - 2) & (v >= 1) & (v <= H - 2)
        u = np.where(valid, u, 1.0)
        v = np.where(valid, v, 1.0)
        u0 = np.minimum(np.floor(u).astype(np.int64), W - 3)
        v0 = np.minimum(np.floor(v).astype(np.int64), H - 3)
        wu = keys_weights(u - u0)
        wv = keys_weights(v - v0)
        k = self.base[None] + (v0 - 1) * W + (u0 - 1)
        M = np.zeros(u.shape)
        lowest = np.full(u.shape, np.inf)
        for r in range(4):
            row = np.zeros(u.shape)
            for c in range(4):
                tap = self.flat[k + r * W + c]
                row += wu[..., c] * tap
                lowest = np.minimum(lowest, tap)
            M += wv[..., r] * row
        valid &= lowest > 0
        return np.where(valid, M, 0.0), valid


def sample_msscam(lf, u: float, v: float, z: float, sampler: Sampler | None = None) -> MSSCam:
    """MSS-Cam of center-view pixel ``(u, v)`` hypothesised at depth ``z``."""
    rig = lf.rig
    if not (rig.depth_min - 1e-9 <= z <= rig.depth_max + 1e-9):
        raise SamplingError(f"depth {z} outside [{rig.depth_min}, {rig.depth_max}]")
    sampler = sampler or Sampler(lf.images, rig)
    X = center_view_points(u, v, z, rig).reshape(1, 3)
    M, mask = sampler.sample(X)
    return MSSCam(M[0], X[0], mask[0])
