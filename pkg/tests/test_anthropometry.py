import dataclasses

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from articfit.anthropometry import (NoIntersection, OpenMeshError, OrientationError,
                                    body_length, body_volume, circumference, cube_mesh,
                                    femur_length, measure)
from articfit.kinematics import InvalidArgument
from articfit.template import BodyProportions, build_template
from meshes import cylinder, icosphere


@pytest.fixture(scope="module")
def template():
    model, _ = build_template(shape_fields=())
    return model


def test_body_length_examples():
    v = np.array([[0.0, 0, 100], [10, 0, 0], [-10, 0, 0]])
    assert body_length(v, 0, 1, 2) == 100.0
    v2 = np.array([[3.0, 4, 0], [0, 0, 0], [0, 0, 0]])
    assert body_length(v2, 0, 1, 2) == 5.0
    with pytest.raises(InvalidArgument):
        body_length(v, 0, 1, 3)


def test_body_length_matches_generator(template):
    assert abs(measure(template).BL - template.meta["stature_mm"]) <= 1e-9


def test_femur_length_examples():
    kp = {"hip_l": [0, 0, 0], "knee_l": [0, 0, -30], "hip_r": [5, 0, 0], "knee_r": [5, 0, -32]}
    assert femur_length(kp) == 31.0
    with pytest.raises(InvalidArgument, match="knee_r"):
        femur_length({k: v for k, v in kp.items() if k != "knee_r"})


def test_femur_length_symmetric_template(template):
    kp = dict(zip(template.keypoint_names, template.keypoint_regressor @ template.vertices))
    left = np.linalg.norm(kp["hip_l"] - kp["knee_l"])
    right = np.linalg.norm(kp["hip_r"] - kp["knee_r"])
    assert abs(left - right) < 1e-6
    assert abs(measure(template).FL - left) < 1e-6


def test_femur_length_matches_generator():
    model, _ = build_template(BodyProportions(femur_length=28.0), shape_fields=())
    assert abs(measure(model).FL - 28.0) <= 0.5


def test_cube_volume_and_slice():
    v, f = cube_mesh()
    assert body_volume(v, f) == 1.0
    assert circumference(v, f, [0.5, 0.5, 0.5], [0, 0, 1]) == pytest.approx(4.0, abs=1e-12)


def test_flipped_cube_raises():
    v, f = cube_mesh()
    with pytest.raises(OrientationError):
        body_volume(v, f[:, ::-1])


def test_open_mesh_raises():
    v, f = cube_mesh()
    with pytest.raises(OpenMeshError):
        body_volume(v, f[:-1])


def test_icosphere_volume():
    v, f = icosphere(4, 10.0)
    assert abs(body_volume(v, f) / (4 / 3 * np.pi * 1000) - 1) < 0.005


def test_cylinder_circumference():
    v, f = cylinder(25.0, 40.0, n=64)
    c = circumference(v, f, [0, 0, 17.0], [0, 0, 1])
    assert abs(c / (2 * np.pi * 25) - 1) < 0.005


def test_plane_outside_raises():
    v, f = cube_mesh()
    with pytest.raises(NoIntersection):
        circumference(v, f, [0, 0, 2.0], [0, 0, 1])


def test_volume_additivity():
    a, fa = icosphere(2, 5.0)
    b, fb = cube_mesh(3.0)
    b = b + 20.0
    v = np.vstack([a, b])
    f = np.vstack([fa, fb + len(a)])
    assert body_volume(v, f) == pytest.approx(body_volume(a, fa) + body_volume(b, fb),
                                              rel=1e-12)


def _rows(m):
    return np.array([m.BL, m.FL, m.HC, m.AC, m.BV])


def test_rigid_invariance(template):
    base = _rows(measure(template))
    R = Rotation.from_rotvec([0.3, -1.1, 0.7]).as_matrix()
    moved = template.vertices @ R.T + np.array([12.0, -40.0, 7.5])
    m2 = template.replace(vertices=moved)
    np.testing.assert_allclose(_rows(measure(m2)), base, rtol=1e-9)


def test_scale_covariance(template):
    base = _rows(measure(template))
    s = 1.7
    m2 = template.replace(vertices=template.vertices * s)
    np.testing.assert_allclose(_rows(measure(m2)), base * np.array([s, s, s, s, s ** 3]),
                               rtol=1e-9)


def test_measurements_positive_with_provenance(template):
    m = measure(template)
    assert all(x > 0 for x in m.row().values())
    assert set(m.provenance["planes"]) == {"head", "abdomen"}
    assert m.provenance["landmarks"]["head_top"] == template.landmarks["head_top"]


def test_missing_plane_keypoint_raises(template):
    planes = dict(template.planes, head={"origin": ["nose"]})
    with pytest.raises(InvalidArgument, match="nose"):
        measure(dataclasses.replace(template, planes=planes))
