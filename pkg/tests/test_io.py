import json
import struct

import numpy as np
import pytest

from articfit.anthropometry import body_volume, boundary_edges
from articfit.io import (EmptySurface, ParseError, VersionError, VoxelMask, load_dataset,
                         load_fits, load_keypoints, load_model, load_obj, load_ply,
                         load_voxels, marching_cubes, model_to_bytes, save_dataset, save_fits,
                         save_keypoints, save_model, save_obj, save_ply, save_voxels)
from articfit.synth import SynthConfig, make_dataset


def _area(v, f):
    return 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]),
                                axis=1).sum()


def _sphere_mask(r=10, pad=4):
    g = np.arange(-(r + pad), r + pad + 1)
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    return X ** 2 + Y ** 2 + Z ** 2 <= r * r


def test_ply_round_trip_bitwise(tmp_path, rng):
    v = rng.normal(size=(50, 3)) * 100
    f = rng.integers(0, 50, size=(30, 3))
    save_ply(tmp_path / "a.ply", v, f)
    v2, f2 = load_ply(tmp_path / "a.ply")
    assert v2.tobytes() == v.tobytes() and np.array_equal(f2, f)
    save_ply(tmp_path / "b.ply", v2, f2)
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


def test_ply_truncated_reports_offset(tmp_path, rng):
    save_ply(tmp_path / "a.ply", rng.normal(size=(10, 3)))
    data = (tmp_path / "a.ply").read_bytes()
    (tmp_path / "b.ply").write_bytes(data[:-5])
    with pytest.raises(ParseError) as err:
        load_ply(tmp_path / "b.ply")
    assert err.value.offset == len(data) - 5


def test_ply_rejects_non_finite(tmp_path):
    save_ply(tmp_path / "a.ply", np.array([[0.0, np.nan, 1.0]]))
    with pytest.raises(ParseError, match="non-finite"):
        load_ply(tmp_path / "a.ply")


def test_obj_round_trip(tmp_path, rng):
    v = rng.normal(size=(20, 3))
    f = rng.integers(0, 20, size=(10, 3))
    save_obj(tmp_path / "a.obj", v, f)
    v2, f2 = load_obj(tmp_path / "a.obj")
    np.testing.assert_allclose(v2, v, atol=1e-12)
    assert np.array_equal(f2, f)


def test_obj_bad_record_reports_offset(tmp_path):
    (tmp_path / "a.obj").write_text("v 0 0 0\nv 1 x 0\n")
    with pytest.raises(ParseError) as err:
        load_obj(tmp_path / "a.obj")
    assert err.value.offset == len("v 0 0 0\n")


def test_keypoints_valid_defaults_true(tmp_path):
    (tmp_path / "k.json").write_text(json.dumps([{"name": "a", "xyz": [1, 2, 3]},
                                                 {"name": "b", "xyz": [4, 5, 6], "valid": False}]))
    names, xyz, valid = load_keypoints(tmp_path / "k.json")
    assert names == ["a", "b"] and valid.tolist() == [True, False]
    save_keypoints(tmp_path / "k2.json", names, xyz, valid)
    assert load_keypoints(tmp_path / "k2.json")[2].tolist() == [True, False]


def test_keypoints_malformed(tmp_path):
    (tmp_path / "k.json").write_text('[{"name": "a", "xyz": [1, 2')
    with pytest.raises(ParseError) as err:
        load_keypoints(tmp_path / "k.json")
    assert err.value.offset is not None


def test_model_round_trip(tmp_path, small_model):
    save_model(tmp_path / "m.afm", small_model, extra_blobs={"x": np.arange(3.0)},
               extra_header={"note": 1})
    m, extra, header = load_model(tmp_path / "m.afm", return_extra=True)
    for name in ("vertices", "skin_weights", "keypoint_regressor", "shape_basis", "pose_basis"):
        assert np.array_equal(getattr(m, name), getattr(small_model, name))
    assert np.array_equal(m.faces, small_model.faces)
    assert np.array_equal(extra["x"], np.arange(3.0)) and header == {"note": 1}
    assert model_to_bytes(m, {"x": np.arange(3.0)}, {"note": 1}) == \
        (tmp_path / "m.afm").read_bytes()


def _patch_header(data: bytes, fn) -> bytes:
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    fn(header)
    h = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return data[:8] + struct.pack("<Q", len(h)) + h + data[16 + hlen:]


def test_model_wrong_blob_length_names_blob(tmp_path, small_model):
    data = model_to_bytes(small_model)

    def shrink(h):
        b = next(b for b in h["blobs"] if b["name"] == "skin_weights")
        b["nbytes"] -= 8

    (tmp_path / "m.afm").write_bytes(_patch_header(data, shrink))
    with pytest.raises(ParseError, match="skin_weights"):
        load_model(tmp_path / "m.afm")


def test_model_version_mismatch(tmp_path, small_model):
    data = _patch_header(model_to_bytes(small_model), lambda h: h.update(version="articfit-model/9"))
    (tmp_path / "m.afm").write_bytes(data)
    with pytest.raises(VersionError):
        load_model(tmp_path / "m.afm")


def test_model_bad_magic_and_non_finite(tmp_path, small_model):
    (tmp_path / "x.afm").write_bytes(b"NOTAMODEL" * 3)
    with pytest.raises(ParseError):
        load_model(tmp_path / "x.afm")
    data = bytearray(model_to_bytes(small_model))
    (hlen,) = struct.unpack("<Q", data[8:16])
    blob = next(b for b in json.loads(data[16:16 + hlen])["blobs"] if b["name"] == "vertices")
    at = 16 + hlen + blob["offset"] + 8 * 5
    data[at:at + 8] = struct.pack("<d", np.inf)
    (tmp_path / "y.afm").write_bytes(bytes(data))
    with pytest.raises(ParseError, match="vertices") as err:
        load_model(tmp_path / "y.afm")
    assert err.value.offset == 16 + hlen + blob["offset"]


def test_voxel_round_trip(tmp_path, rng):
    mask = VoxelMask(rng.random((5, 6, 7)) > 0.5, (0.5, 1.0, 2.0), (1.0, -2.0, 3.0))
    save_voxels(tmp_path / "v.json", mask)
    back = load_voxels(tmp_path / "v.json")
    assert np.array_equal(back.data, mask.data)
    assert back.spacing == mask.spacing and back.origin == mask.origin
    raw = tmp_path / "v.json.raw"
    raw.write_bytes(raw.read_bytes()[:-1])
    with pytest.raises(ParseError):
        load_voxels(tmp_path / "v.json")


def test_marching_cubes_sphere_area_and_watertight():
    v, f = marching_cubes(VoxelMask(_sphere_mask()))
    assert abs(_area(v, f) / (4 * np.pi * 100) - 1) < 0.05
    assert len(boundary_edges(f)) == 0
    assert body_volume(v, f) > 0


def test_marching_cubes_translation_equivariance():
    mask = _sphere_mask(6)
    a, fa = marching_cubes(VoxelMask(mask, (1.0, 1.5, 2.0), (0.0, 0.0, 0.0)))
    shift = np.array([12.25, -3.5, 100.0])
    b, fb = marching_cubes(VoxelMask(mask, (1.0, 1.5, 2.0), tuple(shift)))
    assert np.array_equal(fa, fb)
    np.testing.assert_allclose(b - shift, a, atol=1e-9)


def test_marching_cubes_single_voxel():
    d = np.zeros((3, 3, 3), bool)
    d[1, 1, 1] = True
    spacing = (2.0, 1.0, 1.5)
    v, f = marching_cubes(VoxelMask(d, spacing), smooth_iters=0)
    assert len(boundary_edges(f)) == 0
    # the iso-0.5 surface of one voxel is the octahedron through the half-way points
    assert body_volume(v, f) == pytest.approx(np.prod(spacing) / 6, rel=1e-12)


def test_marching_cubes_empty():
    with pytest.raises(EmptySurface):
        marching_cubes(VoxelMask(np.zeros((4, 4, 4), bool)))


def test_dataset_and_fits_round_trip(tmp_path):
    ds = make_dataset(SynthConfig(n_subjects=2, n_frames=3, N=602))
    save_dataset(tmp_path / "d", ds.subjects, ds.prior_model, {"seed": 0}, ds.true_model)
    subjects, prior, manifest = load_dataset(tmp_path / "d")
    assert [s.subject_id for s in subjects] == [s.subject_id for s in ds.subjects]
    assert all(s.truth is None for s in subjects)
    for a, b in zip(subjects, ds.subjects):
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.vertices, fb.vertices)
            assert np.array_equal(fa.valid, fb.valid)
    assert prior.keypoint_names == ds.prior_model.keypoint_names
    with_truth, _, _ = load_dataset(tmp_path / "d", with_truth=True)
    assert np.array_equal(with_truth[0].truth.canonical, ds.subjects[0].truth.canonical)

    class Fit:
        pass

    fit = Fit()
    fit.subject_id, fit.frames, fit.beta = "s000", ds.subjects[0].frames, None
    fit.thetas, fit.transl = ds.subjects[0].truth.thetas, ds.subjects[0].truth.transl
    fit.canonical = ds.subjects[0].truth.canonical
    save_fits(tmp_path / "fits.json", [fit])
    back = load_fits(tmp_path / "fits.json")["s000"]
    assert np.array_equal(back["thetas"], fit.thetas) and back["frames"] == [0, 1, 2]
