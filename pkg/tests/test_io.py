import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cmslf import io
from cmslf.renderer import LightField
from cmslf.scene import cube_sphere


def test_lightfield_round_trip(tmp_path, diffuse_lf):
    path = io.save_lightfield(diffuse_lf, tmp_path / "ds")
    assert path.name == io.MANIFEST
    back = io.load_lightfield(tmp_path / "ds")
    assert io.lightfields_equal(diffuse_lf, back)
    # directory or manifest path both work, and reloading is stable
    assert io.lightfields_equal(back, io.load_lightfield(path))
    assert io.load_lightfield(path, ground_truth=False).ground_truth == {}


def test_saving_twice_is_byte_identical(tmp_path, diffuse_lf):
    a = io.save_lightfield(diffuse_lf, tmp_path / "a")
    b = io.save_lightfield(io.load_lightfield(a), tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    for f in sorted((tmp_path / "a").rglob("*.pfm")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_lightfields_equal_detects_changes(diffuse_lf):
    other = LightField(diffuse_lf.images.copy(), diffuse_lf.rig, diffuse_lf.spectral,
                       dict(diffuse_lf.ground_truth), dict(diffuse_lf.metadata))
    assert io.lightfields_equal(diffuse_lf, other)
    other.images[0, 0, 0, 0] += 1
    assert not io.lightfields_equal(diffuse_lf, other)
    other = LightField(diffuse_lf.images, diffuse_lf.rig, None, diffuse_lf.ground_truth,
                       diffuse_lf.metadata)
    assert not io.lightfields_equal(diffuse_lf, other)


def test_missing_view_names_camera(tmp_path, diffuse_lf):
    io.save_lightfield(diffuse_lf, tmp_path)
    (tmp_path / io.view_name(3, 5)).unlink()
    with pytest.raises(io.DatasetError, match=r"i=3, j=5"):
        io.load_lightfield(tmp_path)


def test_manifest_without_view_entry(tmp_path, diffuse_lf):
    p = io.save_lightfield(diffuse_lf, tmp_path)
    man = json.loads(p.read_text())
    man["views"] = [v for v in man["views"] if (v["spoke"], v["ring"]) != (1, 2)]
    p.write_text(json.dumps(man))
    with pytest.raises(io.DatasetError, match=r"i=1, j=2"):
        io.load_lightfield(tmp_path)


def test_grid_mismatch(tmp_path, diffuse_lf):
    p = io.save_lightfield(diffuse_lf, tmp_path)
    man = json.loads(p.read_text())
    man["grid"]["spokes"] += 1
    p.write_text(json.dumps(man))
    with pytest.raises(io.DatasetError, match="grid"):
        io.load_lightfield(tmp_path)


def test_wrong_image_size(tmp_path, diffuse_lf):
    io.save_lightfield(diffuse_lf, tmp_path)
    io.write_pfm(tmp_path / io.view_name(0, 0), np.zeros((5, 5), np.float32))
    with pytest.raises(io.DatasetError, match=r"i=0, j=0"):
        io.load_lightfield(tmp_path)


def test_manifest_errors(tmp_path):
    with pytest.raises(io.DatasetError, match="no manifest"):
        io.load_manifest(tmp_path)
    (tmp_path / io.MANIFEST).write_text("{\n  bad")
    with pytest.raises(io.DatasetError, match="line 2"):
        io.load_manifest(tmp_path)
    (tmp_path / io.MANIFEST).write_text(json.dumps({"format_version": 99}))
    with pytest.raises(io.DatasetError, match="version"):
        io.load_manifest(tmp_path)


# ----------------------------------------------------------------------
# PFM


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 7), st.integers(1, 7)),
              elements=st.floats(-1e6, 1e6, width=32)),
       st.booleans())
def test_pfm_round_trip(tmp_path_factory, a, color):
    if color:
        a = np.stack([a, -a, 2 * a], axis=-1)
    p = tmp_path_factory.mktemp("pfm") / "a.pfm"
    io.write_pfm(p, a)
    b = io.read_pfm(p)
    assert b.dtype == np.float32 and np.array_equal(a, b)


def test_pfm_row_order(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    io.write_pfm(tmp_path / "a.pfm", a)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n3 2\n-1.0\n")
    # the first stored row is the bottom one
    assert np.array_equal(np.frombuffer(raw[-24:], "<f4")[:3], [3, 4, 5])


def test_pfm_refuses_lossy_and_bad_shapes(tmp_path):
    with pytest.raises(ValueError, match="float32"):
        io.write_pfm(tmp_path / "a.pfm", np.array([[0.1]]))
    io.write_pfm(tmp_path / "b.pfm", np.array([[0.5]]))   # exact float64 is fine
    with pytest.raises(ValueError):
        io.write_pfm(tmp_path / "c.pfm", np.zeros((2, 2, 2)))
    (tmp_path / "d.pfm").write_bytes(b"Pf\n2 2\n-1.0\n" + b"\0" * 8)
    with pytest.raises(ValueError, match="truncated"):
        io.read_pfm(tmp_path / "d.pfm")
    (tmp_path / "e.pfm").write_bytes(b"P6\n")
    with pytest.raises(ValueError, match="not a PFM"):
        io.read_pfm(tmp_path / "e.pfm")


def test_big_endian_pfm(tmp_path):
    a = np.array([[1.5, -2.0]], dtype=">f4")
    (tmp_path / "a.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + a.tobytes())
    assert np.array_equal(io.read_pfm(tmp_path / "a.pfm"), [[1.5, -2.0]])


# ----------------------------------------------------------------------
# meshes


def _mesh():
    v, f = cube_sphere(2)
    v = 2.0 * v + [1.0, 2.0, 3.0]
    return v.astype(np.float32).astype(float), f


def test_binary_ply_round_trip(tmp_path):
    v, f = _mesh()
    io.write_ply(tmp_path / "m.ply", v, f)
    v2, f2 = io.read_ply(tmp_path / "m.ply")
    assert np.array_equal(v, v2) and np.array_equal(f, f2)


def test_ply_with_normals_and_colors(tmp_path):
    v, f = _mesh()
    n = v / np.linalg.norm(v, axis=1, keepdims=True)
    c = np.full((len(v), 3), 200, np.uint8)
    io.write_ply(tmp_path / "m.ply", v, f, normals=n, colors=c)
    v2, f2 = io.read_ply(tmp_path / "m.ply")
    assert np.array_equal(v, v2) and np.array_equal(f, f2)


def test_ascii_ply_with_quads(tmp_path):
    text = """ply
format ascii 1.0
comment unit square
element vertex 4
property float x
property float y
property float z
element face 1
property list uchar int vertex_indices
end_header
0 0 0
1 0 0
1 1 0
0 1 0
4 0 1 2 3
"""
    (tmp_path / "q.ply").write_text(text)
    v, f = io.read_mesh(tmp_path / "q.ply")
    assert v.shape == (4, 3) and np.array_equal(f, [[0, 1, 2], [0, 2, 3]])


def test_obj_round_trip_and_negative_indices(tmp_path):
    v, f = _mesh()
    io.write_obj(tmp_path / "m.obj", v, f)
    v2, f2 = io.read_mesh(tmp_path / "m.obj")
    assert np.array_equal(v, v2) and np.array_equal(f, f2)
    (tmp_path / "n.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf -3//1 -2//1 -1//1\n")
    _, f3 = io.read_obj(tmp_path / "n.obj")
    assert np.array_equal(f3, [[0, 1, 2]])


def test_unknown_mesh_format(tmp_path):
    with pytest.raises(ValueError, match="unknown mesh format"):
        io.read_mesh(tmp_path / "m.stl")


# ----------------------------------------------------------------------
# maps and estimates


@pytest.mark.parametrize("arr", [
    np.array([[True, False], [False, True]]),
    np.arange(12, dtype=np.float32).reshape(2, 2, 3),
    np.arange(20, dtype=np.float32).reshape(2, 2, 5),
    np.array([[0, 1], [2, 1]], dtype=np.int8),
])
def test_map_round_trip(tmp_path, arr):
    entry = io.write_map(tmp_path, "m", arr)
    back = io.read_map(tmp_path, json.loads(json.dumps(entry)))
    assert back.dtype == arr.dtype and np.array_equal(back, arr)


def test_estimate_round_trip(tmp_path, diffuse_lf):
    from cmslf.surface import reconstruct

    est = reconstruct(diffuse_lf)
    io.save_estimate(est, diffuse_lf.rig, tmp_path, {"note": "x"})
    back = io.load_estimate(tmp_path)
    for k, v in est.to_arrays().items():
        a = np.asarray(v)
        ref = a.astype(np.float32) if a.dtype.kind == "f" else a
        assert np.array_equal(back[k], ref, equal_nan=True), k
    verts, faces = io.read_mesh(tmp_path / "surface.ply")
    assert len(verts) == est.mask.sum() and len(faces) > 0
    assert json.loads((tmp_path / io.ESTIMATE).read_text())["summary"] == {"note": "x"}
    with pytest.raises(io.DatasetError):
        io.load_estimate(tmp_path / "nothing")
