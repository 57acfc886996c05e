"""Differentiable articulated forward model.

Axis-angle rotations, forward kinematics over a kinematic tree, shape and pose
blend shapes, linear blend skinning and keypoint regression. The numerical core
is written against torch (float64) so every fitting stage gets exact gradients;
the public numpy functions are thin wrappers around it.

Conventions
-----------
* A tree has ``n_joints`` nodes. Node 0 is the root; its rotation block is the
  global rotation, applied about the regressed root joint. ``K = n_joints - 1``
  is the number of articulated (non-root) joints.
* Pose ``theta`` is ``(n_joints, 3)`` axis-angle; translation ``t`` is 3 mm.
* Blend-shape bases are vertex-major: row ``3 * n + c`` is coordinate ``c`` of
  vertex ``n``. The pose basis has ``9 K`` columns (root block excluded).
* Regressors are ``(rows, N)`` matrices applied identically to x, y and z,
  i.e. the block-diagonal ``kron(J, I_3)`` form of a ``(3 rows, 3N)`` matrix.
"""
from __future__ import annotations

import dataclasses
import functools
from typing import TYPE_CHECKING, Any, Optional, Sequence

import numpy as np
import torch

if TYPE_CHECKING:
    from .energies import PosePrior

DTYPE = torch.float64
_SMALL_ANGLE = 1e-8


class InvalidArgument(ValueError):
    """Raised for malformed inputs to the model API."""


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    a = np.asarray(x, dtype=np.float64)
    if not a.flags.writeable:
        a = a.copy()
    return torch.as_tensor(a, dtype=DTYPE)


# ---------------------------------------------------------------------------
# kinematic tree and containers


class KinematicTree:
    """Rooted joint hierarchy stored as a parent array in topological order."""

    def __init__(self, parents: Sequence[int], names: Optional[Sequence[str]] = None):
        parents = np.asarray(parents, dtype=np.int64)
        if parents.ndim != 1 or len(parents) == 0:
            raise InvalidArgument("parents must be a non-empty 1-d array")
        if parents[0] >= 0:
            raise InvalidArgument("joint 0 must be the root (negative parent)")
        if np.any(parents[1:] < 0):
            raise InvalidArgument("exactly one root is allowed")
        if np.any(parents[1:] >= np.arange(1, len(parents))):
            raise InvalidArgument("parent index must precede its child")
        self.parents = parents
        self.parents.setflags(write=False)
        if names is None:
            names = [f"joint{k}" for k in range(len(parents))]
        if len(names) != len(parents):
            raise InvalidArgument("one name per joint required")
        self.names = tuple(names)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def K(self) -> int:
        return len(self.parents) - 1

    def children(self, k: int) -> list[int]:
        return [int(c) for c in np.nonzero(self.parents == k)[0]]

    def __eq__(self, other):
        return (isinstance(other, KinematicTree)
                and np.array_equal(self.parents, other.parents)
                and self.names == other.names)

    def __repr__(self):
        return f"KinematicTree(n_joints={self.n_joints})"


@dataclasses.dataclass(frozen=True)
class PoseParams:
    theta: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        transl = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if theta.ndim != 2 or theta.shape[1] != 3:
            raise InvalidArgument("theta must be (n_joints, 3)")
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(transl))):
            raise InvalidArgument("pose must be finite")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "translation", transl)

    @classmethod
    def zeros(cls, n_joints: int) -> "PoseParams":
        return cls(np.zeros((n_joints, 3)), np.zeros(3))


@dataclasses.dataclass(frozen=True)
class ShapeParams:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(beta)):
            raise InvalidArgument("beta must be finite")
        object.__setattr__(self, "beta", beta)


@dataclasses.dataclass(frozen=True)
class PosedMesh:
    vertices: np.ndarray
    keypoints: np.ndarray


@dataclasses.dataclass(frozen=True, eq=False)
class TemplateModel:
    """Skinned surface model: template, skeleton, regressors and blend bases.

    Immutable after construction. ``shape_basis`` is ``(3N, D)``, ``pose_basis``
    ``(3N, 9K)``, ``skin_weights`` and ``joint_regressor`` are ``(n_joints, N)``
    and ``keypoint_regressor`` is ``(M, N)``.
    """

    tree: KinematicTree
    vertices: np.ndarray
    faces: np.ndarray
    skin_weights: np.ndarray
    joint_regressor: np.ndarray
    keypoint_regressor: np.ndarray
    shape_basis: np.ndarray
    pose_basis: np.ndarray
    keypoint_names: tuple = ()
    rest_pose: Optional[np.ndarray] = None
    landmarks: dict = dataclasses.field(default_factory=dict)
    planes: dict = dataclasses.field(default_factory=dict)
    pose_prior: Optional["PosePrior"] = None
    meta: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        f64 = lambda a: np.ascontiguousarray(np.asarray(a, dtype=np.float64))  # noqa: E731
        verts = f64(self.vertices)
        faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        W = f64(self.skin_weights)
        Jr = f64(self.joint_regressor)
        Jk = f64(self.keypoint_regressor)
        S = f64(self.shape_basis)
        P = f64(self.pose_basis)
        n, nj = len(verts), self.tree.n_joints
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise InvalidArgument("vertices must be (N, 3)")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise InvalidArgument("faces must be (F, 3)")
        if faces.size and (faces.min() < 0 or faces.max() >= n):
            raise InvalidArgument("faces index out of range")
        if W.shape != (nj, n):
            raise InvalidArgument(f"skin_weights must be {(nj, n)}, got {W.shape}")
        if np.any(W < 0) or np.max(np.abs(W.sum(0) - 1.0)) > 1e-9:
            raise InvalidArgument("skin weights must be nonnegative with unit column sums")
        if Jr.shape != (nj, n):
            raise InvalidArgument("joint_regressor must be (n_joints, N)")
        if Jk.ndim != 2 or Jk.shape[1] != n:
            raise InvalidArgument("keypoint_regressor must be (M, N)")
        if S.ndim == 1:
            S = S.reshape(3 * n, -1)
        if S.shape[0] != 3 * n:
            raise InvalidArgument("shape_basis must have 3N rows")
        if P.shape != (3 * n, 9 * self.tree.K):
            raise InvalidArgument(f"pose_basis must be {(3 * n, 9 * self.tree.K)}")
        rest = np.zeros((nj, 3)) if self.rest_pose is None else f64(self.rest_pose)
        if rest.shape != (nj, 3):
            raise InvalidArgument("rest_pose must be (n_joints, 3)")
        names = tuple(self.keypoint_names) or tuple(f"kp{m}" for m in range(len(Jk)))
        if len(names) != len(Jk):
            raise InvalidArgument("one keypoint name per regressor row")
        for name, arr in [("vertices", verts), ("shape_basis", S), ("pose_basis", P),
                          ("joint_regressor", Jr), ("keypoint_regressor", Jk)]:
            if not np.all(np.isfinite(arr)):
                raise InvalidArgument(f"{name} contains non-finite values")
        for name, arr in [("vertices", verts), ("faces", faces), ("skin_weights", W),
                          ("joint_regressor", Jr), ("keypoint_regressor", Jk),
                          ("shape_basis", S), ("pose_basis", P), ("rest_pose", rest)]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "keypoint_names", names)

    # sizes -----------------------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoint_regressor)

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[1]

    @functools.cached_property
    def edges(self) -> np.ndarray:
        return mesh_edges(self.faces)

    def replace(self, **changes) -> "TemplateModel":
        return dataclasses.replace(self, **changes)

    def shape_vertices(self, beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=np.float64).reshape(-1)
        if beta.shape[0] != self.n_shape:
            raise InvalidArgument(f"beta must have {self.n_shape} entries")
        return self.vertices + (self.shape_basis @ beta).reshape(-1, 3)

    def check_closed_manifold(self) -> bool:
        e = np.sort(np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                                    self.faces[:, [2, 0]]]), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        if np.any(counts != 2):
            return False
        # each directed edge must appear once for a consistent orientation
        d = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        _, dcounts = np.unique(d, axis=0, return_counts=True)
        return bool(np.all(dcounts == 1))

    @functools.cached_property
    def torch(self) -> "_TorchModel":
        return _TorchModel(self)


class _TorchModel:
    """Tensor views of a TemplateModel, built once per model."""

    def __init__(self, m: TemplateModel):
        self.parents = [int(p) for p in m.tree.parents]
        self.vertices = _t(m.vertices)
        self.W = _t(m.skin_weights)
        self.J_reg = _t(m.joint_regressor)
        self.J_k = _t(m.keypoint_regressor)
        self.shape_basis = _t(m.shape_basis)
        self.pose_basis = _t(m.pose_basis)
        self.rest_rot = rodrigues_t(_t(m.rest_pose))


def mesh_edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges of a triangle mesh, sorted."""
    faces = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.unique(np.sort(e, axis=1), axis=0)


# ---------------------------------------------------------------------------
# torch core


def rodrigues_t(r: torch.Tensor) -> torch.Tensor:
    """Axis-angle ``(..., 3)`` to rotation matrices ``(..., 3, 3)``.

    Uses the second-order Taylor expansion of the coefficients below an angle of
    1e-8 so the map and its gradient stay finite at zero.
    """
    angle2 = (r * r).sum(-1)
    small = angle2 < _SMALL_ANGLE ** 2
    safe2 = torch.where(small, torch.ones_like(angle2), angle2)
    angle = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - angle2 / 6.0, torch.sin(angle) / angle)
    b = torch.where(small, 0.5 - angle2 / 24.0, (1.0 - torch.cos(angle)) / safe2)
    zero = torch.zeros_like(r[..., 0])
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    Kx = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], -1).reshape(r.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=r.dtype).expand_as(Kx)
    return eye + a[..., None, None] * Kx + b[..., None, None] * (Kx @ Kx)


def _homogeneous(R: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    top = torch.cat([R, t[..., None]], -1)
    bottom = torch.zeros(R.shape[:-2] + (1, 4), dtype=R.dtype)
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], -2)


def forward_kinematics_t(parents: Sequence[int], rot: torch.Tensor, joints: torch.Tensor):
    """World and relative transforms for batched rotations.

    ``rot`` is ``(B, J, 3, 3)`` local rotations, ``joints`` ``(B, J, 3)`` rest
    joint positions. Returns ``(G, G_rel)`` each ``(B, J, 4, 4)`` where
    ``G_rel[k] = G[k] @ [I | -joints[k]]`` maps rest-space points to posed space.
    """
    # Relative transforms compose as G_rel[k] = G_rel[parent] @ [R_k | j_k - R_k j_k]
    # (rotation about the joint), which is exactly the identity at rest.
    local = _homogeneous(rot, joints - (rot @ joints[..., None])[..., 0])
    rel = [local[:, 0]]
    for k in range(1, len(parents)):
        rel.append(rel[parents[k]] @ local[:, k])
    G_rel = torch.stack(rel, 1)
    R = G_rel[..., :3, :3]
    G = _homogeneous(R, (R @ joints[..., None])[..., 0] + G_rel[..., :3, 3])
    return G, G_rel


def pose_features_t(rot: torch.Tensor, rest_rot: torch.Tensor) -> torch.Tensor:
    """``vec(R(theta)) - vec(R(theta*))`` over the non-root joints, ``(B, 9K)``."""
    d = rot[:, 1:] - rest_rot[1:]
    return d.reshape(rot.shape[0], -1)


def skin_t(verts: torch.Tensor, W: torch.Tensor, G_rel: torch.Tensor) -> torch.Tensor:
    """Linear blend skinning of ``(B, N, 3)`` vertices with ``(J, N)`` weights."""
    A = blended_transforms_t(W, G_rel)
    return (A[..., :3, :3] @ verts[..., None])[..., 0] + A[..., :3, 3]


def blended_transforms_t(W: torch.Tensor, G_rel: torch.Tensor) -> torch.Tensor:
    """Per-vertex blended transforms ``sum_k w_kn G_rel[k]``, ``(B, N, 4, 4)``.

    Written as ``I + sum_k w_kn (G_rel[k] - I)`` so identity transforms give the
    identity exactly even when the weights sum to one only up to rounding.
    """
    eye = torch.eye(4, dtype=G_rel.dtype)
    return eye + torch.einsum("jn,bjrc->bnrc", W, G_rel - eye)


def pose_model_t(tm: _TorchModel, canonical: torch.Tensor, theta: torch.Tensor,
                 transl: torch.Tensor, pose_basis: Optional[torch.Tensor] = None,
                 return_extra: bool = False):
    """Posed vertices for a batch of frames.

    ``canonical`` is ``(B, N, 3)`` or ``(N, 3)`` canonical shapes (``T_S``),
    ``theta`` ``(B, J, 3)``, ``transl`` ``(B, 3)``. Joints are regressed from the
    canonical shape before pose blend shapes are added.
    """
    B = theta.shape[0]
    if canonical.dim() == 2:
        canonical = canonical.expand(B, -1, -1)
    P = tm.pose_basis if pose_basis is None else pose_basis
    rot = rodrigues_t(theta)
    joints = torch.einsum("jn,bnc->bjc", tm.J_reg, canonical)
    feats = pose_features_t(rot, tm.rest_rot)
    offsets = (feats @ P.T).reshape(B, -1, 3)
    shaped = canonical + offsets
    _, G_rel = forward_kinematics_t(tm.parents, rot, joints)
    posed = skin_t(shaped, tm.W, G_rel) + transl[:, None, :]
    if return_extra:
        return posed, {"G_rel": G_rel, "offsets": offsets, "joints": joints, "rot": rot}
    return posed


def regress_t(J: torch.Tensor, verts: torch.Tensor) -> torch.Tensor:
    return torch.einsum("mn,bnc->bmc", J, verts)


# ---------------------------------------------------------------------------
# numpy API


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrix for a single axis-angle 3-vector (radians)."""
    r = np.asarray(axis_angle, dtype=np.float64)
    if r.shape != (3,):
        raise InvalidArgument("axis-angle must be a 3-vector")
    if not np.all(np.isfinite(r)):
        raise InvalidArgument("axis-angle must be finite")
    return rodrigues_t(_t(r)).numpy()


def forward_kinematics(tree: KinematicTree, rest_joints, pose: PoseParams):
    """Return ``(G, G_rel)``, each ``(n_joints, 4, 4)``, for one pose."""
    joints = np.asarray(rest_joints, dtype=np.float64)
    if joints.shape != (tree.n_joints, 3) or pose.theta.shape != (tree.n_joints, 3):
        raise InvalidArgument("joint count does not match the tree")
    with torch.no_grad():
        rot = rodrigues_t(_t(pose.theta))[None]
        G, G_rel = forward_kinematics_t(list(tree.parents), rot, _t(joints)[None])
    return G[0].numpy(), G_rel[0].numpy()


def apply_blend_shapes(model: TemplateModel, beta, theta):
    """Shape- and pose-corrected rest vertices ``T_P`` and regressed joints."""
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    theta = np.asarray(theta, dtype=np.float64)
    if beta.shape[0] != model.n_shape:
        raise InvalidArgument(f"beta must have {model.n_shape} entries")
    if theta.shape != (model.tree.n_joints, 3):
        raise InvalidArgument("theta must be (n_joints, 3)")
    tm = model.torch
    with torch.no_grad():
        shaped = tm.vertices + (tm.shape_basis @ _t(beta)).reshape(-1, 3)
        joints = tm.J_reg @ shaped
        feats = pose_features_t(rodrigues_t(_t(theta))[None], tm.rest_rot)
        T_P = shaped + (feats @ tm.pose_basis.T).reshape(-1, 3)
    return T_P.numpy(), joints.numpy()


def skin(vertices, weights, G_rel) -> np.ndarray:
    """Linear blend skinning of one vertex set."""
    v = np.asarray(vertices, dtype=np.float64)
    W = np.asarray(weights, dtype=np.float64)
    G = np.asarray(G_rel, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 3 or W.shape != (len(G), len(v)) or G.shape[1:] != (4, 4):
        raise InvalidArgument("inconsistent skinning dimensions")
    with torch.no_grad():
        out = skin_t(_t(v)[None], _t(W), _t(G)[None])
    return out[0].numpy()


def forward(model: TemplateModel, beta=None, theta=None, t=None,
            canonical: Optional[np.ndarray] = None) -> PosedMesh:
    """Pose the model. ``canonical`` overrides ``T̄ + B_S beta`` when given."""
    nj = model.tree.n_joints
    theta = np.zeros((nj, 3)) if theta is None else np.asarray(theta, dtype=np.float64)
    t = np.zeros(3) if t is None else np.asarray(t, dtype=np.float64).reshape(3)
    pose = PoseParams(theta, t)
    if canonical is None:
        beta = np.zeros(model.n_shape) if beta is None else beta
        canonical = model.shape_vertices(beta)
    canonical = np.asarray(canonical, dtype=np.float64)
    if canonical.shape != model.vertices.shape:
        raise InvalidArgument("canonical shape must be (N, 3)")
    tm = model.torch
    with torch.no_grad():
        posed = pose_model_t(tm, _t(canonical), _t(pose.theta)[None], _t(pose.translation)[None])
        kps = regress_t(tm.J_k, posed)
    return PosedMesh(posed[0].numpy(), kps[0].numpy())


def forward_batch(model: TemplateModel, canonical: np.ndarray, thetas: np.ndarray,
                  transl: np.ndarray, keypoint_regressor: Optional[np.ndarray] = None):
    """Posed vertices ``(F, N, 3)`` and keypoints ``(F, M, 3)`` for many frames."""
    tm = model.torch
    J = tm.J_k if keypoint_regressor is None else _t(keypoint_regressor)
    with torch.no_grad():
        posed = pose_model_t(tm, _t(canonical), _t(thetas), _t(transl))
        kps = regress_t(J, posed)
    return posed.numpy(), kps.numpy()


def axis_angle_from_matrix(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rodrigues`, with the angle in ``[0, pi]``."""
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_rotvec()


def to_numpy(x: Any) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)
