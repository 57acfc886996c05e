"""Procedural articulated body template.

The body is a smooth union of capsules (torso, neck, head, thighs, shins, arms)
around a 9-node skeleton. Its surface is extracted from the signed-distance
field, decimated to a fixed vertex count, and equipped with distance-based skin
weights, non-negative vertex regressors for joints and keypoints, and a set of
smooth deformation fields used to build shape bases.
"""
from __future__ import annotations

import dataclasses
import logging

import numpy as np
from scipy.optimize import nnls
from scipy.spatial import cKDTree

from .io import extract_isosurface, signed_volume
from .kinematics import KinematicTree, TemplateModel, mesh_edges

logger = logging.getLogger(__name__)

JOINT_NAMES = ("pelvis", "spine", "neck", "hip_l", "knee_l", "hip_r", "knee_r",
               "shoulder_l", "shoulder_r")
PARENTS = (-1, 0, 1, 0, 3, 0, 5, 1, 1)
KEYPOINT_NAMES = ("eye_l", "eye_r", "neck", "bladder", "hip_l", "hip_r", "knee_l", "knee_r",
                  "ankle_l", "ankle_r", "shoulder_l", "shoulder_r", "wrist_l", "wrist_r",
                  "spine", "head_top")
HINGE_JOINTS = ("knee_l", "knee_r")


@dataclasses.dataclass(frozen=True)
class BodyProportions:
    """Body dimensions in mm. z is the body axis (head up), x points left, y front."""

    torso_length: float = 170.0
    torso_rx: float = 44.0
    torso_ry: float = 36.0
    neck_length: float = 15.0
    neck_radius: float = 20.0
    head_radius: float = 46.0
    hip_width: float = 26.0
    hip_z: float = -8.0
    femur_length: float = 62.0
    tibia_length: float = 58.0
    thigh_radius: float = 17.0
    shin_radius: float = 13.0
    shoulder_width: float = 40.0
    shoulder_z: float = 150.0
    arm_length: float = 95.0
    arm_radius: float = 12.0
    blend: float = 8.0

    def scaled(self, s: float) -> "BodyProportions":
        return dataclasses.replace(self, **{f.name: getattr(self, f.name) * s
                                            for f in dataclasses.fields(self)})

    # skeleton ---------------------------------------------------------------
    def joints(self) -> np.ndarray:
        hx, hz = self.hip_width, self.hip_z
        knee = hz - self.femur_length
        sx, sz = self.shoulder_width, self.shoulder_z
        return np.array([
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 0.5 * self.torso_length],
            [0.0, 0.0, self.torso_length],
            [hx, 0.0, hz], [hx, 0.0, knee],
            [-hx, 0.0, hz], [-hx, 0.0, knee],
            [sx, 0.0, sz], [-sx, 0.0, sz],
        ])

    @property
    def head_center(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.torso_length + self.neck_length + 0.8 * self.head_radius])

    @property
    def ankle_z(self) -> float:
        return self.hip_z - self.femur_length - self.tibia_length

    @property
    def stature(self) -> float:
        return self.head_center[2] + self.head_radius - (self.ankle_z - self.shin_radius)

    def segments(self):
        """``(joint, a, b, radius, y_scale)`` capsules; ``y_scale < 1`` flattens front-back."""
        J = self.joints()
        ey = self.torso_ry / self.torso_rx
        tl = self.torso_length
        head = self.head_center
        out = [
            (0, [0, 0, -2.0], [0, 0, 0.5 * tl], self.torso_rx, ey),
            (1, [0, 0, 0.5 * tl], [0, 0, 0.82 * tl], 0.97 * self.torso_rx, ey),
            (2, [0, 0, 0.8 * tl], [0, 0, tl + self.neck_length], self.neck_radius, 1.0),
            (2, head, head, self.head_radius, 1.0),
        ]
        for hip, knee, sh in ((3, 4, 7), (5, 6, 8)):
            ankle = J[knee] + [0, 0, -self.tibia_length]
            out.append((hip, J[hip], J[knee], self.thigh_radius, 1.0))
            out.append((knee, J[knee], ankle, self.shin_radius, 1.0))
            side = np.sign(J[sh][0])
            wrist = J[sh] + [side * self.arm_length, 0, 0]
            out.append((sh, J[sh], wrist, self.arm_radius, 1.0))
        return [(j, np.asarray(a, float), np.asarray(b, float), r, s) for j, a, b, r, s in out]

    def keypoint_positions(self) -> np.ndarray:
        """Canonical positions of :data:`KEYPOINT_NAMES`, inside the body."""
        J = self.joints()
        hc, R = self.head_center, self.head_radius
        eye = lambda s: hc + [s * 0.35 * R, 0.72 * R, 0.1 * R]  # noqa: E731
        wrist = lambda k: J[k] + [np.sign(J[k][0]) * (self.arm_length - 8.0), 0, 0]  # noqa: E731
        ankle = lambda k: J[k] + [0, 0, -self.tibia_length + 4.0]  # noqa: E731
        return np.array([
            eye(1), eye(-1), J[2] + [0, 0, 4.0], [0, 0.4 * self.torso_ry, 8.0],
            J[3], J[5], J[4], J[6], ankle(4), ankle(6), J[7], J[8], wrist(7), wrist(8),
            J[1], hc + [0, 0, 0.75 * R],
        ], dtype=np.float64)


def _segment_distance(p, a, b, y_scale=1.0):
    q = p.copy()
    if y_scale != 1.0:
        q[:, 1] = q[:, 1] / y_scale
        a = a * [1, 1 / y_scale, 1]
        b = b * [1, 1 / y_scale, 1]
    ab = b - a
    den = float(ab @ ab)
    s = np.zeros(len(q)) if den == 0 else np.clip((q - a) @ ab / den, 0.0, 1.0)
    closest = a + s[:, None] * ab
    return np.linalg.norm(q - closest, axis=1), s


def part_distances(points, props: BodyProportions) -> np.ndarray:
    """Signed distances ``(n_parts, n)`` of points to each capsule surface."""
    pts = np.asarray(points, dtype=np.float64)
    return np.stack([_segment_distance(pts, a, b, s)[0] - r
                     for _, a, b, r, s in props.segments()])


def _smooth_min(d: np.ndarray, k: float) -> np.ndarray:
    # log-sum-exp smooth minimum; k is the blend radius in mm
    m = d.min(0)
    return m - k * np.log(np.exp(-(d - m) / k).sum(0))


def body_sdf(points, props: BodyProportions) -> np.ndarray:
    return _smooth_min(part_distances(points, props), props.blend / 4.0)


def body_surface(props: BodyProportions, n_vertices: int = 602, voxel: float = 2.0):
    """Closed, outward-oriented body mesh with exactly ``n_vertices`` vertices."""
    segs = props.segments()
    lo = np.min([np.minimum(a, b) - r for _, a, b, r, _ in segs], axis=0) - 3 * voxel
    hi = np.max([np.maximum(a, b) + r for _, a, b, r, _ in segs], axis=0) + 3 * voxel
    axes = [np.arange(l, h + voxel, voxel) for l, h in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    vol = -body_sdf(grid, props).reshape([len(a) for a in axes])
    verts, faces = extract_isosurface(vol, 0.0, (voxel,) * 3, lo, smooth_iters=2)
    v, f = _exact_count(n_vertices, verts, faces)
    if signed_volume(v, f) < 0:
        f = f[:, ::-1].copy()
    return v, f


def _exact_count(n, verts, faces):
    import fast_simplification

    target = 2 * n - 4
    # search the reduction ratio until the vertex count matches
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        v, f = fast_simplification.simplify(verts.astype(np.float32), faces.astype(np.int32),
                                            target_count=int(round(len(faces) * (1 - mid))))
        if len(v) == n:
            return v.astype(np.float64), f.astype(np.int64)
        if len(v) > n:
            lo = mid
        else:
            hi = mid
    for count in range(target - 40, target + 40):
        v, f = fast_simplification.simplify(verts.astype(np.float32), faces.astype(np.int32),
                                            target_count=count)
        if len(v) == n:
            return v.astype(np.float64), f.astype(np.int64)
    raise RuntimeError(f"could not decimate to exactly {n} vertices")


def skin_weights(verts, props: BodyProportions, n_joints: int = 9, falloff: float = 6.0,
                 top_k: int = 3) -> np.ndarray:
    """Distance-to-bone weights with exponential falloff, sparsified to ``top_k``."""
    d = np.maximum(part_distances(verts, props), 0.0)
    d = d - d.min(0)
    W = np.zeros((n_joints, len(verts)))
    for (j, *_), dist in zip(props.segments(), d):
        W[j] += np.exp(-dist / falloff)
    order = np.argsort(-W, axis=0)
    W[order[top_k:], np.arange(len(verts))] = 0.0
    W[W < 1e-4 * W.max(0)] = 0.0
    return W / W.sum(0)


def regress_points(verts, targets, k: int = 12, ridge: float = 1e-3, max_k: int = 96):
    """Non-negative vertex weights reproducing each target as a convex combination.

    Each row is fitted by NNLS over the ``k`` nearest vertices with a heavily
    weighted sum-to-one row and a small ridge that spreads the weights; ``k``
    grows until the residual is below 1e-3 mm.
    """
    verts = np.asarray(verts, dtype=np.float64)
    tree = cKDTree(verts)
    R = np.zeros((len(targets), len(verts)))
    for m, p in enumerate(np.asarray(targets, dtype=np.float64)):
        kk = k
        while True:
            _, idx = tree.query(p, k=min(kk, len(verts)))
            scale = np.linalg.norm(verts[idx] - p, axis=1).max()
            A = np.vstack([(verts[idx] - p).T / scale, 1e3 * np.ones(len(idx)),
                           ridge * np.eye(len(idx))])
            rhs = np.concatenate([np.zeros(3), [1e3], np.zeros(len(idx))])
            w, _ = nnls(A, rhs, maxiter=50 * len(idx))
            w = w / w.sum()
            err = np.linalg.norm(w @ verts[idx] - p)
            if err < 1e-3 or kk >= max_k:
                break
            kk *= 2
        if err >= 0.5:
            logger.warning("regressor row %d reproduces its target only to %.3g mm", m, err)
        R[m, idx] = w
    return R


def vertex_normals(verts, faces) -> np.ndarray:
    fn = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]])
    n = np.zeros_like(verts)
    for c in range(3):
        np.add.at(n, faces[:, c], fn)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# deformation fields


def _bone_offsets(verts, props, joints_subset=None):
    """Per-vertex offset from its skin-weighted bone axes (radial direction)."""
    out = np.zeros_like(verts)
    total = np.zeros(len(verts))
    d = part_distances(verts, props)
    for (j, a, b, r, s), dist in zip(props.segments(), d):
        if joints_subset is not None and j not in joints_subset:
            continue
        if np.allclose(a, b):
            closest = np.broadcast_to(a, verts.shape)
        else:
            _, t = _segment_distance(verts, a, b)
            closest = a + t[:, None] * (b - a)
        w = np.exp(-np.maximum(dist - dist.min(), 0) / 6.0) * np.exp(-np.maximum(dist, 0) / 6.0)
        out += w[:, None] * (verts - closest)
        total += w
    return out / np.maximum(total, 1e-12)[:, None]


def deformation_fields(verts, props: BodyProportions, W) -> dict:
    """Named smooth displacement fields ``(N, 3)`` over the template vertices."""
    x, y, z = verts.T
    legs = W[3] + W[4] + W[5] + W[6]
    arms = W[7] + W[8]
    head = W[2]
    torso = W[0] + W[1]
    sgn = np.sign(x) + (x == 0)
    hc = props.head_center
    zero = np.zeros(len(verts))
    f = {
        "size": verts.copy(),
        "girth": _bone_offsets(verts, props) * [1, 1, 0.2],
        "leg_length": np.stack([zero, zero, -legs * np.maximum(props.hip_z - z, 0)], 1),
        "arm_length": np.stack([arms * sgn * np.maximum(np.abs(x) - props.shoulder_width, 0),
                                zero, zero], 1),
        "torso_length": np.stack([zero, zero, np.clip(z, 0, props.shoulder_z)], 1),
        "abdomen": np.stack([0.3 * x, y, zero], 1)
        * (torso * np.exp(-((z - 0.35 * props.torso_length) / (0.3 * props.torso_length)) ** 2))[:, None],
        "shoulder_width": np.stack([arms * sgn, zero, zero], 1),
        "hip_width": np.stack([legs * sgn, zero, zero], 1),
        "limb_girth": _bone_offsets(verts, props, {3, 4, 5, 6, 7, 8}),
        "head_size": (verts - hc) * head[:, None],
        "head_depth": np.stack([zero, y - hc[1], zero], 1) * head[:, None],
    }
    return f


def shape_basis_from_fields(fields: dict, names, stds) -> np.ndarray:
    """Orthonormalise the named fields (in order) and scale column ``k`` to RMS ``stds[k]`` mm
    per vertex. Returns a vertex-major ``(3N, D)`` basis."""
    cols = np.stack([fields[n].reshape(-1) for n in names], 1)
    Q, _ = np.linalg.qr(cols)
    signs = np.sign(np.sum(Q * cols, 0))
    Q = Q * signs
    n = cols.shape[0] // 3
    return Q * np.sqrt(n) * np.asarray(stds, dtype=np.float64)


def unit_field(field) -> np.ndarray:
    """Field rescaled to 1 mm RMS per vertex."""
    f = np.asarray(field, dtype=np.float64)
    return f / np.sqrt(np.mean(np.sum(f * f, axis=1)))


def body_landmarks(verts, props: BodyProportions) -> dict:
    x, y, z = verts.T
    head = int(np.argmax(z - 1e-9 * np.abs(x)))
    foot_l = int(np.argmin(np.where(x > 0, z, np.inf)))
    foot_r = int(np.argmin(np.where(x < 0, z, np.inf)))
    return {"head_top": head, "foot_l": foot_l, "foot_r": foot_r}


def body_planes() -> dict:
    """Slicing planes recorded with the model.

    Entries name keypoints, or landmark vertices as ``"landmark:<name>"``. The
    body axis runs from the hip midpoint to the head-top vertex. The head plane
    passes through the eye midpoint, the abdominal plane through the point
    ``origin_on_axis`` of the way along the axis; both are normal to the axis.
    """
    return {
        "axis": {"from": ["hip_l", "hip_r"], "to": ["landmark:head_top"]},
        "head": {"origin": ["eye_l", "eye_r"]},
        "abdomen": {"origin_on_axis": 0.2},
    }


def build_template(props: BodyProportions = BodyProportions(), n_vertices: int = 602,
                   n_keypoints: int = 10, shape_fields=("size", "girth", "leg_length"),
                   shape_stds=(10.0, 4.0, 4.0), keypoint_jitter=None, seed: int = 0,
                   voxel: float = 2.0) -> tuple[TemplateModel, dict]:
    """Assemble a template model from body proportions.

    Returns ``(model, info)`` where ``info`` holds the deformation fields, the
    keypoint target positions and the vertex normals for downstream use.
    """
    verts, faces = body_surface(props, n_vertices, voxel)
    tree = KinematicTree(PARENTS, JOINT_NAMES)
    W = skin_weights(verts, props, tree.n_joints)
    J = regress_points(verts, props.joints())
    names = _keypoint_subset(n_keypoints)
    all_pos = props.keypoint_positions()
    kp = all_pos[[KEYPOINT_NAMES.index(n) for n in names]]
    if keypoint_jitter is not None:
        kp = kp + keypoint_jitter
    Jk = regress_points(verts, kp)
    fields = deformation_fields(verts, props, W)
    landmarks = body_landmarks(verts, props)
    foot = 0.5 * (verts[landmarks["foot_l"]] + verts[landmarks["foot_r"]])
    stature = float(np.linalg.norm(verts[landmarks["head_top"]] - foot))
    S = shape_basis_from_fields(fields, shape_fields, shape_stds) if len(shape_fields) else \
        np.zeros((3 * len(verts), 0))
    model = TemplateModel(
        tree=tree, vertices=verts, faces=faces, skin_weights=W, joint_regressor=J,
        keypoint_regressor=Jk, shape_basis=S, pose_basis=np.zeros((3 * len(verts), 9 * tree.K)),
        keypoint_names=names, landmarks=landmarks, planes=body_planes(),
        meta={"stature_mm": stature, "stature_analytic_mm": props.stature,
              "femur_mm": props.femur_length})
    info = {"fields": fields, "keypoints": kp, "normals": vertex_normals(verts, faces),
            "edges": mesh_edges(faces)}
    return model, info


def _keypoint_subset(m: int):
    """The first ``m`` keypoints of a fixed priority order.

    Ten keypoints cover the eyes (head orientation), hips and knees (femur
    length) and the distal ends of every limb (wrists, ankles).
    """
    order = ("eye_l", "eye_r", "hip_l", "hip_r", "knee_l", "knee_r", "ankle_l", "ankle_r",
             "wrist_l", "wrist_r", "neck", "bladder", "spine", "head_top", "shoulder_l",
             "shoulder_r")
    if not 1 <= m <= len(order):
        raise ValueError(f"keypoint count must be in [1, {len(order)}]")
    return tuple(order[:m])
