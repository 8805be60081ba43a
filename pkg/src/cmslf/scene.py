"""Scene description: materials, analytic spheres and triangle meshes."""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .bvh import BVH, build_bvh


class SceneError(ValueError):
    pass


# Fixed axes for the sinusoidal texture, one per coefficient (cycled).
_TEXTURE_AXES = np.array([
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0],
]) / np.array([[math.sqrt(2)], [math.sqrt(2)], [math.sqrt(2)], [math.sqrt(3)], [math.sqrt(3)]])


@dataclass
class Material:
    """Phong-dichromatic material.

    ``coefficients`` are the reflectance-basis weights (diffuse reflectivity
    already folded in).  An optional sinusoidal texture modulates them as a
    smooth function of the direction from the object centre.
    """

    coefficients: np.ndarray
    specular: float = 0.0
    shininess: float = 8.0
    texture: dict | None = None

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.specular < 0:
            raise SceneError("specular reflectivity must be >= 0")
        if self.shininess < 1:
            raise SceneError("shininess must be >= 1")
        if self.texture is not None and self.texture.get("kind", "sinusoid") != "sinusoid":
            raise SceneError(f"unknown texture kind {self.texture.get('kind')!r}")

    def coefficients_at(self, directions: np.ndarray) -> np.ndarray:
        """Coefficient vectors for unit ``directions`` (P, 3) from the object centre."""
        P = directions.shape[0]
        c = np.broadcast_to(self.coefficients, (P, self.coefficients.size)).copy()
        if self.texture:
            amp = np.broadcast_to(np.asarray(self.texture.get("amplitude", 0.1), dtype=float),
                                  (self.coefficients.size,))
            freq = float(self.texture.get("frequency", 3.0))
            for k in range(self.coefficients.size):
                axis = _TEXTURE_AXES[k % len(_TEXTURE_AXES)]
                c[:, k] += amp[k] * np.sin(freq * (directions @ axis) * math.pi + k)
        return c

    def to_dict(self) -> dict:
        d = {"coefficients": self.coefficients.tolist(), "specular": self.specular,
             "shininess": self.shininess}
        if self.texture:
            d["texture"] = dict(self.texture)
        return d


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    material: Material

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.radius <= 0:
            raise SceneError("sphere radius must be positive")


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray
    material: Material
    bvh: BVH = field(init=False, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        self.normals = np.ascontiguousarray(self.normals, dtype=float)
        if self.normals.shape != self.vertices.shape:
            raise SceneError("need one normal per vertex")
        if np.any(np.abs(np.linalg.norm(self.normals, axis=1) - 1) > 1e-6):
            raise SceneError("mesh normals must be unit length")
        self.bvh = build_bvh(self.vertices, self.faces)

    @property
    def center(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]


@dataclass
class Scene:
    objects: list

    def __post_init__(self):
        if not self.objects:
            raise SceneError("scene has no objects")


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals."""
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    vn = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise SceneError("degenerate vertex (zero normal)")
    return vn / norm


def cube_sphere(resolution: int):
    """Watertight cube-sphere: 6 * 2 * resolution**2 triangles on the unit sphere."""
    n = resolution
    g = np.linspace(-1.0, 1.0, n + 1)
    a, b = np.meshgrid(g, g, indexing="ij")
    a, b = a.ravel(), b.ravel()
    one = np.ones_like(a)
    # face frames: (normal axis, sign) with orientation chosen for outward winding
    faces_xyz = [
        np.stack([one, a, b], 1), np.stack([-one, b, a], 1),
        np.stack([b, one, a], 1), np.stack([a, -one, b], 1),
        np.stack([a, b, one], 1), np.stack([b, a, -one], 1),
    ]
    verts = np.concatenate(faces_xyz)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    tris = []
    for f in range(6):
        base = f * (n + 1) ** 2
        for p in range(n):
            for q in range(n):
                v00 = base + p * (n + 1) + q
                v10 = v00 + (n + 1)
                tris.append([v00, v10, v10 + 1])
                tris.append([v00, v10 + 1, v00 + 1])
    tris = np.array(tris, dtype=np.int64)
    # weld duplicated seam vertices
    key = np.round(verts * 1e9).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    verts = verts[first]
    tris = inverse[tris]
    # fix winding so normals point outward
    tri = verts[tris]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", fn, tri.mean(axis=1)) < 0
    tris[flip] = tris[flip][:, ::-1]
    return verts, tris


def bumpy_blob(center, radius: float, bumps: float = 0.12, resolution: int = 29):
    """Procedural watertight test shape: a sphere with smooth radial bumps."""
    verts, tris = cube_sphere(resolution)
    x, y, z = verts.T
    r = radius * (1.0 + bumps * (np.sin(3 * x + 1.0) * np.sin(4 * y) * np.cos(2 * z)
                                 + 0.5 * np.sin(5 * z + 2 * x)))
    pts = verts * r[:, None] + np.asarray(center, dtype=float)
    return pts, tris


def scene_from_config(cfg: dict, basis_dim: int | None = None) -> Scene:
    objects = []
    for entry in cfg.get("objects", []):
        mat_cfg = dict(entry.get("material", {}))
        material = Material(
            coefficients=mat_cfg.get("coefficients", [0.7] + [0.0] * ((basis_dim or 3) - 1)),
            specular=float(mat_cfg.get("specular", 0.0)),
            shininess=float(mat_cfg.get("shininess", 8.0)),
            texture=mat_cfg.get("texture"),
        )
        if basis_dim is not None and material.coefficients.size != basis_dim:
            raise SceneError(f"material has {material.coefficients.size} coefficients, "
                             f"basis has {basis_dim}")
        kind = entry.get("type")
        if kind == "sphere":
            objects.append(Sphere(entry["center"], float(entry["radius"]), material))
        elif kind == "blob":
            verts, tris = bumpy_blob(entry["center"], float(entry["radius"]),
                                     float(entry.get("bumps", 0.12)),
                                     int(entry.get("resolution", 29)))
            objects.append(Mesh(verts, tris, vertex_normals(verts, tris), material))
        elif kind == "mesh":
            from .io import read_mesh
            verts, tris = read_mesh(entry["path"])
            verts = verts * float(entry.get("scale", 1.0)) + np.asarray(entry.get("offset", [0, 0, 0]))
            objects.append(Mesh(verts, tris, vertex_normals(verts, tris), material))
        else:
            raise SceneError(f"unknown object type {kind!r}")
    return Scene(objects)
