"""Geometric measurements on canonical meshes: lengths, volume and circumferences."""
from __future__ import annotations

import dataclasses

import numpy as np
from scipy.spatial import cKDTree

from .kinematics import InvalidArgument, TemplateModel


class OpenMeshError(ValueError):
    pass


class OrientationError(ValueError):
    pass


class NoIntersection(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class MeasurementSet:
    BL: float
    FL: float
    HC: float
    AC: float
    BV: float
    provenance: dict = dataclasses.field(default_factory=dict)

    def row(self) -> dict:
        return {"BL": self.BL, "FL": self.FL, "HC": self.HC, "AC": self.AC, "BV": self.BV}


def body_length(vertices, head: int, foot_l: int, foot_r: int) -> float:
    """Distance from the head-top vertex to the midpoint of the two foot vertices."""
    v = np.asarray(vertices, dtype=np.float64)
    for i in (head, foot_l, foot_r):
        if not 0 <= int(i) < len(v):
            raise InvalidArgument(f"landmark vertex {i} out of range")
    return float(np.linalg.norm(v[head] - 0.5 * (v[foot_l] + v[foot_r])))


def femur_length(keypoints: dict) -> float:
    """Mean of the left and right hip-to-knee keypoint distances."""
    need = ("hip_l", "knee_l", "hip_r", "knee_r")
    missing = [k for k in need if k not in keypoints]
    if missing:
        raise InvalidArgument(f"missing keypoints {missing}")
    p = {k: np.asarray(keypoints[k], dtype=np.float64) for k in need}
    left = np.linalg.norm(p["hip_l"] - p["knee_l"])
    right = np.linalg.norm(p["hip_r"] - p["knee_r"])
    return float(0.5 * (left + right))


def boundary_edges(faces) -> np.ndarray:
    f = np.asarray(faces, dtype=np.int64)
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq[counts == 1]


def body_volume(vertices, faces) -> float:
    """Enclosed volume by the divergence theorem (sum of signed tetrahedra)."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    if len(f) == 0:
        raise OpenMeshError("mesh has no faces")
    if len(boundary_edges(f)):
        raise OpenMeshError(f"mesh is open ({len(boundary_edges(f))} boundary edges)")
    vol = float(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)
    if vol < 0:
        raise OrientationError("faces are oriented inward (negative volume)")
    return vol


def _hull_2d(pts: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counter-clockwise, no repeated end point."""
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    P = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in P:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in P[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _dedup(points: np.ndarray, tol: float) -> np.ndarray:
    tree = cKDTree(points)
    keep = np.ones(len(points), bool)
    for i, j in sorted(tree.query_pairs(tol)):
        if keep[i]:
            keep[j] = False
    return points[keep]


def plane_section_points(vertices, faces, point, normal, tol: float = 1e-6) -> np.ndarray:
    """Unique points where the mesh edges meet the plane."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    d = (v - np.asarray(point, dtype=np.float64)) @ n
    e = np.unique(np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1),
                  axis=0)
    da, db = d[e[:, 0]], d[e[:, 1]]
    cross = (da * db < 0)
    s = da[cross] / (da[cross] - db[cross])
    pts = v[e[cross, 0]] + s[:, None] * (v[e[cross, 1]] - v[e[cross, 0]])
    on = v[np.abs(d) <= tol]
    pts = np.concatenate([pts, on])
    if len(pts) == 0:
        raise NoIntersection("plane does not intersect the mesh")
    return _dedup(pts, tol)


def circumference(vertices, faces, point, normal, tol: float = 1e-6) -> float:
    """Perimeter of the convex hull of the mesh's cross-section with a plane."""
    pts = plane_section_points(vertices, faces, point, normal, tol)
    if len(pts) < 3:
        raise NoIntersection(f"only {len(pts)} intersection points")
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    a = np.eye(3)[np.argmin(np.abs(n))]
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    w = np.cross(n, u)
    xy = np.stack([pts @ u, pts @ w], 1)
    hull = _hull_2d(xy)
    if len(hull) < 3:
        raise NoIntersection("degenerate cross-section")
    return float(np.sum(np.linalg.norm(hull - np.roll(hull, -1, axis=0), axis=1)))


# ---------------------------------------------------------------------------
# model-level measurements


def named_keypoints(model: TemplateModel, canonical) -> dict:
    kp = model.keypoint_regressor @ np.asarray(canonical, dtype=np.float64)
    return dict(zip(model.keypoint_names, kp))


def _mean(kp, names, vertices, landmarks):
    """Mean of named keypoints; ``"landmark:<name>"`` refers to a landmark vertex."""
    pts = []
    for k in names:
        if k.startswith("landmark:"):
            lm = k.split(":", 1)[1]
            if lm not in landmarks:
                raise InvalidArgument(f"plane construction needs landmark {lm!r}")
            pts.append(vertices[landmarks[lm]])
        elif k in kp:
            pts.append(kp[k])
        else:
            raise InvalidArgument(f"plane construction needs keypoint {k!r}")
    return np.mean(pts, axis=0)


def measurement_planes(model: TemplateModel, canonical) -> dict:
    """Head and abdominal planes ``{name: (point, normal)}`` built from the
    model's plane definitions and the canonical keypoints."""
    V = np.asarray(canonical, dtype=np.float64)
    kp = named_keypoints(model, V)
    defs = model.planes
    if not defs:
        raise InvalidArgument("model has no plane definitions")
    a0 = _mean(kp, defs["axis"]["from"], V, model.landmarks)
    a1 = _mean(kp, defs["axis"]["to"], V, model.landmarks)
    axis = (a1 - a0) / np.linalg.norm(a1 - a0)
    head = _mean(kp, defs["head"]["origin"], V, model.landmarks)
    abdomen = a0 + float(defs["abdomen"]["origin_on_axis"]) * (a1 - a0)
    return {"head": (head, axis), "abdomen": (abdomen, axis)}


def measure(model: TemplateModel, canonical=None, beta=None) -> MeasurementSet:
    """All five measurements on a canonical shape (default: the model mean)."""
    if canonical is None:
        canonical = model.vertices if beta is None else model.shape_vertices(beta)
    V = np.asarray(canonical, dtype=np.float64)
    lm = model.landmarks
    bl = body_length(V, lm["head_top"], lm["foot_l"], lm["foot_r"])
    fl = femur_length(named_keypoints(model, V))
    planes = measurement_planes(model, V)
    hc = circumference(V, model.faces, *planes["head"])
    ac = circumference(V, model.faces, *planes["abdomen"])
    bv = body_volume(V, model.faces)
    prov = {"landmarks": dict(lm),
            "planes": {k: {"point": p.tolist(), "normal": n.tolist()} for k, (p, n) in planes.items()},
            "model": model.meta.get("data_sha256", model.meta.get("role", ""))}
    return MeasurementSet(bl, fl, hc, ac, bv, prov)


def cube_mesh(size: float = 1.0):
    """Axis-aligned cube ``[0, size]^3`` with outward-oriented triangles."""
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float) * size
    f = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                  [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
    return v, f
