"""File formats: PFM float maps, PLY/OBJ meshes and light-field datasets.

A dataset directory holds one PFM per camera, ground-truth maps as PFM and a
JSON manifest naming the grid layout, rig, spectral model and every file.
PFM stores float32 bit-exactly, so a float32 light field round-trips
losslessly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .renderer import LightField
from .rig import RigConfig
from .spectral import SpectralModel

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


# ----------------------------------------------------------------------
# PFM

def write_pfm(path, image: np.ndarray) -> None:
    """Write an (H, W) or (H, W, 3) array as little-endian float32 PFM."""
    a = np.asarray(image)
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {a.shape}")
    a32 = a.astype("<f4")
    if not np.array_equal(a32.astype(a.dtype), a, equal_nan=True):
        raise ValueError("array is not exactly representable in float32")
    H, W = a.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{W} {H}\n".encode() + b"-1.0\n")
        # rows run bottom to top
        f.write(np.ascontiguousarray(a32[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().split()
        scale = float(f.readline())
        data = f.read()
    W, H = int(dims[0]), int(dims[1])
    ch = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    if len(data) != 4 * W * H * ch:
        raise ValueError(f"{path}: expected {W}x{H}x{ch} floats, file is truncated or padded")
    a = np.frombuffer(data, dtype=dtype).reshape((H, W, ch) if ch == 3 else (H, W))
    return a[::-1].astype(np.float32)


# ----------------------------------------------------------------------
# meshes

def write_ply(path, vertices: np.ndarray, faces: np.ndarray | None = None,
              normals: np.ndarray | None = None, colors: np.ndarray | None = None) -> None:
    """Binary little-endian PLY with optional per-vertex normals and uint8 colors."""
    v = np.asarray(vertices, dtype=float)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.zeros(len(v), dtype=fields)
    rec["x"], rec["y"], rec["z"] = v.T
    if normals is not None:
        rec["nx"], rec["ny"], rec["nz"] = np.asarray(normals, dtype=float).T
    if colors is not None:
        col = np.asarray(colors)
        rec["red"], rec["green"], rec["blue"] = col.T
    types = {"<f4": "float", "u1": "uchar"}
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {len(v)}"]
    head += [f"property {types[t]} {n}" for n, t in fields]
    nf = 0 if faces is None else len(faces)
    if nf:
        head += [f"element face {nf}", "property list uchar int vertex_indices"]
    head.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(head) + "\n").encode("ascii"))
        f.write(rec.tobytes())
        if nf:
            frec = np.zeros(nf, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            frec["n"] = 3
            frec["idx"] = faces
            f.write(frec.tobytes())


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(f):
    if f.readline().strip() != b"ply":
        raise ValueError("not a PLY file")
    fmt, elements = None, []
    while True:
        line = f.readline()
        if not line:
            raise ValueError("PLY header has no end_header")
        tok = line.decode("ascii").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", tok[2], tok[3])))
            else:
                elements[-1][2].append((tok[2], tok[1]))
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise ValueError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply(path):
    """Vertices (V, 3) and triangles (F, 3); polygons are fan-triangulated."""
    with open(path, "rb") as f:
        fmt, elements = _parse_ply_header(f)
        body = f.read()
    verts, faces = None, []
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for pname, ptype in props:
                    if isinstance(ptype, tuple):
                        k = int(tokens[pos])
                        row[pname] = [int(t) for t in tokens[pos + 1:pos + 1 + k]]
                        pos += 1 + k
                    else:
                        row[pname] = float(tokens[pos])
                        pos += 1
                rows.append(row)
            if name == "vertex":
                verts = np.array([[r["x"], r["y"], r["z"]] for r in rows], dtype=float)
            elif name == "face":
                key = props[0][0]
                faces = [r[key] for r in rows]
    else:
        end = "<" if fmt == "binary_little_endian" else ">"
        pos = 0
        for name, count, props in elements:
            if all(not isinstance(t, tuple) for _, t in props):
                dt = np.dtype([(p, end + _PLY_TYPES[t]) for p, t in props])
                rec = np.frombuffer(body, dtype=dt, count=count, offset=pos)
                pos += dt.itemsize * count
                if name == "vertex":
                    verts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(float)
                continue
            rows = []
            for _ in range(count):
                for pname, ptype in props:
                    if isinstance(ptype, tuple):
                        ct = np.dtype(end + _PLY_TYPES[ptype[1]])
                        it = np.dtype(end + _PLY_TYPES[ptype[2]])
                        k = int(np.frombuffer(body, ct, 1, pos)[0])
                        pos += ct.itemsize
                        rows.append(np.frombuffer(body, it, k, pos).astype(np.int64).tolist())
                        pos += it.itemsize * k
                    else:
                        pos += np.dtype(_PLY_TYPES[ptype]).itemsize
            if name == "face":
                faces = rows
    if verts is None:
        raise ValueError(f"{path}: no vertex element")
    return verts, _triangulate(faces)


def read_obj(path):
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                # negative indices count back from the latest vertex
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return np.array(verts, dtype=float), _triangulate(faces)


def write_obj(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    with open(path, "w") as f:
        for x, y, z in np.asarray(vertices, dtype=float).tolist():
            f.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in np.asarray(faces) + 1:
            f.write(f"f {a} {b} {c}\n")


def _triangulate(faces) -> np.ndarray:
    tris = []
    for poly in faces:
        if len(poly) < 3:
            raise ValueError("face with fewer than 3 vertices")
        tris.extend([poly[0], poly[k], poly[k + 1]] for k in range(1, len(poly) - 1))
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def read_mesh(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix == ".obj":
        return read_obj(path)
    raise ValueError(f"unknown mesh format {suffix!r}")


# ----------------------------------------------------------------------
# maps with any channel count

def write_map(directory: Path, name: str, arr: np.ndarray) -> dict:
    """Store a 2-D or 3-D map as PFM file(s); returns its manifest entry."""
    a = np.asarray(arr)
    entry = {"dtype": a.dtype.str, "shape": list(a.shape)}
    data = a.astype(np.float32) if a.dtype == bool else a
    if a.ndim == 2 or (a.ndim == 3 and a.shape[2] == 3):
        fname = f"{name}.pfm"
        write_pfm(directory / fname, data)
        entry["files"] = [fname]
    elif a.ndim == 3:
        entry["files"] = []
        for k in range(a.shape[2]):
            fname = f"{name}_{k}.pfm"
            write_pfm(directory / fname, data[..., k])
            entry["files"].append(fname)
    else:
        raise ValueError(f"map {name!r} has unsupported shape {a.shape}")
    return entry


def read_map(directory: Path, entry: dict) -> np.ndarray:
    parts = [read_pfm(directory / f) for f in entry["files"]]
    a = parts[0] if len(parts) == 1 else np.stack(parts, axis=-1)
    return a.reshape(entry["shape"]).astype(np.dtype(entry["dtype"]))


# ----------------------------------------------------------------------
# light-field datasets

def view_name(i: int, j: int) -> str:
    return f"view_s{i:02d}_r{j:02d}.pfm"


def save_lightfield(lf: LightField, directory) -> Path:
    """Write images, ground truth and the manifest; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n, m = lf.rig.cameras_per_ring, lf.rig.num_rings
    views = []
    for i in range(n):
        for j in range(m):
            write_pfm(d / view_name(i, j), lf.images[i, j])
            views.append({"spoke": i, "ring": j, "file": view_name(i, j)})
    gt_dir = d / "ground_truth"
    gt = {}
    if lf.ground_truth:
        gt_dir.mkdir(exist_ok=True)
        for key in sorted(lf.ground_truth):
            gt[key] = write_map(gt_dir, key, lf.ground_truth[key])
    manifest = {
        "format_version": FORMAT_VERSION,
        "grid": {"spokes": n, "rings": m, "height": lf.rig.image_height,
                 "width": lf.rig.image_width, "layout": "images[spoke, ring]"},
        "image_dtype": np.dtype(lf.images.dtype).str,
        "rig": lf.rig.to_dict(),
        "spectral": None if lf.spectral is None else lf.spectral.to_dict(),
        "views": views,
        "ground_truth": gt,
        "metadata": lf.metadata,
    }
    path = d / MANIFEST
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def manifest_path(path) -> Path:
    p = Path(path)
    return p / MANIFEST if p.is_dir() else p


def load_manifest(path) -> dict:
    p = manifest_path(path)
    if not p.exists():
        raise DatasetError(f"no manifest at {p}")
    try:
        man = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{p}: line {e.lineno}: {e.msg}") from None
    if man.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{p}: unsupported format version {man.get('format_version')!r}")
    return man


def load_lightfield(path, ground_truth: bool = True) -> LightField:
    p = manifest_path(path)
    man = load_manifest(p)
    d = p.parent
    rig = RigConfig.from_dict(man["rig"])
    g = man["grid"]
    n, m = rig.cameras_per_ring, rig.num_rings
    if (g["spokes"], g["rings"], g["height"], g["width"]) != (n, m, rig.image_height, rig.image_width):
        raise DatasetError(f"{p}: grid {g} does not match the rig")
    dtype = np.dtype(man.get("image_dtype", "<f4"))
    images = np.zeros((n, m, rig.image_height, rig.image_width), dtype=dtype)
    seen = np.zeros((n, m), dtype=bool)
    for v in man["views"]:
        i, j = v["spoke"], v["ring"]
        f = d / v["file"]
        if not f.exists():
            raise DatasetError(f"missing image for camera (i={i}, j={j}): {f}")
        img = read_pfm(f)
        if img.shape != (rig.image_height, rig.image_width):
            raise DatasetError(f"camera (i={i}, j={j}): image is {img.shape}, rig expects "
                               f"{(rig.image_height, rig.image_width)}")
        images[i, j] = img
        seen[i, j] = True
    if not seen.all():
        i, j = np.argwhere(~seen)[0]
        raise DatasetError(f"manifest lists no image for camera (i={i}, j={j})")
    spectral = None if man["spectral"] is None else SpectralModel.from_dict(man["spectral"])
    gt = {}
    if ground_truth:
        gt = {k: read_map(d / "ground_truth", e) for k, e in man["ground_truth"].items()}
    return LightField(images, rig, spectral, gt, man.get("metadata", {}))


def lightfields_equal(a: LightField, b: LightField) -> bool:
    """Exact equality of images, rig, spectral model, ground truth and metadata."""
    if a.images.dtype != b.images.dtype or not np.array_equal(a.images, b.images):
        return False
    if json.dumps(a.rig.to_dict(), sort_keys=True) != json.dumps(b.rig.to_dict(), sort_keys=True):
        return False
    sa = None if a.spectral is None else a.spectral.to_dict()
    sb = None if b.spectral is None else b.spectral.to_dict()
    if sa != sb or a.metadata != b.metadata:
        return False
    if sorted(a.ground_truth) != sorted(b.ground_truth):
        return False
    for k, v in a.ground_truth.items():
        w = b.ground_truth[k]
        if v.dtype != w.dtype or not np.array_equal(v, w):
            return False
    return True


# ----------------------------------------------------------------------
# reconstruction outputs

ESTIMATE = "estimate.json"


def save_estimate(est, rig: RigConfig, directory, summary: dict | None = None) -> Path:
    """Write estimate maps as float32 PFM, the surface as PLY and a JSON summary."""
    from .surface import depth_mesh

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    maps = {}
    for key, arr in est.to_arrays().items():
        a = np.asarray(arr)
        if a.dtype.kind == "f":
            a = a.astype(np.float32)
        maps[key] = write_map(d, key, a)
    verts, faces, pix = depth_mesh(est.depth, est.mask, rig)
    write_ply(d / "surface.ply", verts, faces, normals=est.normal.reshape(-1, 3)[pix])
    doc = {"format_version": FORMAT_VERSION, "maps": maps, "rig": rig.to_dict(),
           "summary": summary or {}}
    path = d / ESTIMATE
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def load_estimate(directory) -> dict:
    d = Path(directory)
    p = d / ESTIMATE if d.is_dir() else d
    if not p.exists():
        raise DatasetError(f"no estimate at {p}")
    doc = json.loads(p.read_text())
    return {k: read_map(p.parent, e) for k, e in doc["maps"].items()}
