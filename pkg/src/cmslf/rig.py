"""Concentric camera/light geometry.

Cameras sit on ``m`` concentric rings in the ``z = 0`` plane, ``n`` per ring,
all looking down ``+z``.  Pixel ``(u, v)`` maps to the metric image plane at
``z = 1`` through a pitch derived from ``half_width``.  Indices are 0-based:
spoke ``i`` in ``[0, n)`` and ring ``j`` in ``[0, m)``.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
import math

import numpy as np


class RigError(ValueError):
    pass


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise RigError("ray direction must be unit length")
        if self.origin[2] != 0.0:
            raise RigError("ray origin must lie on z=0")

    def at(self, z: float) -> np.ndarray:
        """Point on the ray with the given z coordinate."""
        return self.origin + self.direction * (z / self.direction[2])


@dataclass(frozen=True)
class RigConfig:
    """Geometry and band layout of a concentric multi-spectral rig."""

    ring_radii: tuple
    wavelengths: tuple
    cameras_per_ring: int = 12
    light_radius: float = 80.0
    light_phase: float | None = None
    image_width: int = 320
    image_height: int = 320
    half_width: float = 0.5
    depth_min: float = 108.0
    depth_max: float = 125.0
    depth_step: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "ring_radii", tuple(float(r) for r in self.ring_radii))
        object.__setattr__(self, "wavelengths", tuple(float(w) for w in self.wavelengths))
        if self.light_phase is None:
            object.__setattr__(self, "light_phase", math.pi / self.cameras_per_ring)
        m, n = self.num_rings, self.cameras_per_ring
        if m < 3 or n < 3:
            raise RigError(f"need at least 3 rings and 3 cameras per ring, got m={m}, n={n}")
        r = np.asarray(self.ring_radii)
        if np.any(r <= 0):
            raise RigError("ring radii must be positive")
        dr = np.diff(r)
        if not (np.all(dr > 0) or np.all(dr < 0)):
            raise RigError("ring radii must be strictly monotone")
        if len(self.wavelengths) != m:
            raise RigError("one wavelength per ring is required")
        if np.any(np.diff(self.wavelengths) <= 0):
            raise RigError("wavelengths must be strictly increasing")
        if self.light_radius <= 0 or self.half_width <= 0:
            raise RigError("light radius and half width must be positive")
        if self.image_width < 2 or self.image_height < 2:
            raise RigError("image must be at least 2x2")
        if not (0 < self.depth_min < self.depth_max) or self.depth_step <= 0:
            raise RigError("invalid depth range")

    # ------------------------------------------------------------------
    @property
    def num_rings(self) -> int:
        return len(self.ring_radii)

    @property
    def num_lights(self) -> int:
        return self.num_rings

    @property
    def pixel_pitch(self) -> float:
        return 2.0 * self.half_width / self.image_width

    @property
    def principal_point(self) -> tuple[float, float]:
        return (self.image_width - 1) / 2.0, (self.image_height - 1) / 2.0

    @property
    def spoke_angles(self) -> np.ndarray:
        n = self.cameras_per_ring
        return np.arange(n) * (2.0 * math.pi / n)

    @property
    def light_angles(self) -> np.ndarray:
        m = self.num_rings
        return self.light_phase + np.arange(m) * (2.0 * math.pi / m)

    @property
    def depths(self) -> np.ndarray:
        """Depth hypotheses; the count is derived from range and step."""
        count = int(math.floor((self.depth_max - self.depth_min) / self.depth_step + 1e-9)) + 1
        return self.depth_min + self.depth_step * np.arange(count)

    def camera_positions(self) -> np.ndarray:
        """(n, m, 2) array of camera centres on the z=0 plane."""
        phi = self.spoke_angles[:, None]
        r = np.asarray(self.ring_radii)[None, :]
        return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)

    def light_positions(self) -> np.ndarray:
        """(m, 3) array of point-light positions."""
        th = self.light_angles
        rl = self.light_radius
        return np.stack([rl * np.cos(th), rl * np.sin(th), np.zeros_like(th)], axis=-1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ring_radii"] = list(self.ring_radii)
        d["wavelengths"] = list(self.wavelengths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RigConfig":
        d = dict(d)
        if "depth_range" in d:
            d["depth_min"], d["depth_max"] = d.pop("depth_range")
        for key in ("ring_radii", "wavelengths"):
            v = d.get(key)
            if isinstance(v, dict):
                d[key] = _arange_inclusive(v["start"], v["stop"], v["step"])
        d.pop("num_rings", None)
        return cls(**d)


def _arange_inclusive(start, stop, step):
    count = int(round((stop - start) / step)) + 1
    if count < 1:
        raise RigError(f"empty range {start}..{stop} step {step}")
    return [float(start + k * step) for k in range(count)]


def _check_index(i, j, cfg):
    if not (0 <= i < cfg.cameras_per_ring):
        raise IndexError(f"spoke index {i} out of range [0, {cfg.cameras_per_ring})")
    if not (0 <= j < cfg.num_rings):
        raise IndexError(f"ring index {j} out of range [0, {cfg.num_rings})")


def camera_position(i: int, j: int, cfg: RigConfig) -> np.ndarray:
    _check_index(i, j, cfg)
    phi = i * 2.0 * math.pi / cfg.cameras_per_ring
    r = cfg.ring_radii[j]
    return np.array([r * math.cos(phi), r * math.sin(phi)])


def light_position(j: int, cfg: RigConfig) -> np.ndarray:
    if not (0 <= j < cfg.num_rings):
        raise IndexError(f"light index {j} out of range [0, {cfg.num_rings})")
    th = cfg.light_phase + j * 2.0 * math.pi / cfg.num_rings
    return np.array([cfg.light_radius * math.cos(th), cfg.light_radius * math.sin(th), 0.0])


def pixel_to_metric(u, v, cfg: RigConfig):
    cx, cy = cfg.principal_point
    p = cfg.pixel_pitch
    return (np.asarray(u, dtype=float) - cx) * p, (np.asarray(v, dtype=float) - cy) * p


def metric_to_pixel(um, vm, cfg: RigConfig):
    cx, cy = cfg.principal_point
    p = cfg.pixel_pitch
    return np.asarray(um) / p + cx, np.asarray(vm) / p + cy


def pixel_ray(i: int, j: int, u: float, v: float, cfg: RigConfig) -> Ray:
    _check_index(i, j, cfg)
    if not (0 <= u <= cfg.image_width - 1 and 0 <= v <= cfg.image_height - 1):
        raise IndexError(f"pixel ({u}, {v}) outside image")
    s, t = camera_position(i, j, cfg)
    um, vm = pixel_to_metric(u, v, cfg)
    d = np.array([float(um), float(vm), 1.0])
    return Ray(np.array([s, t, 0.0]), d / np.linalg.norm(d))


def project_point(X, i: int, j: int, cfg: RigConfig) -> tuple[float, float]:
    """Fractional pixel where ``X`` images in camera ``(i, j)``.

    The result may fall outside the image; callers decide what to do.
    """
    _check_index(i, j, cfg)
    X = np.asarray(X, dtype=float)
    if X[2] <= 0:
        raise RigError("point lies behind the camera plane")
    s, t = camera_position(i, j, cfg)
    u, v = metric_to_pixel((X[0] - s) / X[2], (X[1] - t) / X[2], cfg)
    return float(u), float(v)


def project_points(X: np.ndarray, cam_xy: np.ndarray, cfg: RigConfig):
    """Vectorised projection.

    ``X`` has shape ``(..., 3)`` and ``cam_xy`` broadcasts against ``X[..., :2]``.
    Returns fractional pixel arrays ``(u, v)``.
    """
    z = X[..., 2]
    um = (X[..., 0] - cam_xy[..., 0]) / z
    vm = (X[..., 1] - cam_xy[..., 1]) / z
    return metric_to_pixel(um, vm, cfg)


def center_view_points(u, v, z, cfg: RigConfig) -> np.ndarray:
    """Back-project center-view pixels to depth ``z`` (camera at the origin)."""
    um, vm = pixel_to_metric(u, v, cfg)
    z = np.asarray(z, dtype=float)
    um, vm, z = np.broadcast_arrays(um, vm, z)
    return np.stack([um * z, vm * z, z], axis=-1)


def center_view_directions(cfg: RigConfig) -> np.ndarray:
    """(H, W, 3) un-normalised ray directions ``(u_m, v_m, 1)`` of the center view."""
    vv, uu = np.mgrid[0:cfg.image_height, 0:cfg.image_width]
    um, vm = pixel_to_metric(uu, vv, cfg)
    return np.stack([um, vm, np.ones_like(um)], axis=-1)
