"""Nearest-vertex correspondences and unposing of observations into canonical space."""
from __future__ import annotations

import dataclasses
import logging
import warnings
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree

from .energies import Correspondences, FrameBatch
from .kinematics import (InvalidArgument, TemplateModel, _t, blended_transforms_t,
                         pose_model_t)

logger = logging.getLogger(__name__)

_TIE_RTOL = 1e-12


@dataclasses.dataclass
class Correspondence:
    """Nearest model vertex (index, distance in mm) for each observed point."""

    index: np.ndarray
    distance: np.ndarray


@dataclasses.dataclass
class UnposedCloud:
    points: np.ndarray
    frame: int
    vertex_index: np.ndarray
    skipped: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(0, np.int64))
    gated: int = 0


def nearest_model_vertex(observed, model_vertices, tree: Optional[cKDTree] = None) -> Correspondence:
    """Exact Euclidean nearest model vertex; ties go to the lowest vertex index."""
    obs = np.asarray(observed, dtype=np.float64).reshape(-1, 3)
    verts = np.asarray(model_vertices, dtype=np.float64).reshape(-1, 3)
    if len(obs) == 0 or len(verts) == 0:
        raise InvalidArgument("nearest_model_vertex needs nonempty inputs")
    tree = cKDTree(verts) if tree is None else tree
    k = min(4, len(verts))
    d, idx = tree.query(obs, k=k)
    if k == 1:
        return Correspondence(idx.astype(np.int64), d)
    tie = d <= d[:, :1] * (1 + _TIE_RTOL) + 1e-300
    cand = np.where(tie, idx, np.iinfo(np.int64).max)
    col = np.argmin(cand, axis=1)
    rows = np.arange(len(obs))
    return Correspondence(idx[rows, col].astype(np.int64), d[rows, col])


def _trim(d: np.ndarray, gate: Optional[float]) -> np.ndarray:
    if gate is None:
        return np.ones_like(d)
    return (d <= gate * np.median(d)).astype(np.float64)


def frame_correspondences(posed: np.ndarray, batch: FrameBatch,
                          gate: Optional[float] = None) -> Correspondences:
    """Two-way nearest neighbours between posed model frames and observed clouds.

    With ``gate`` set, model vertices farther from the observations than
    ``gate`` times the frame's median model-to-observation distance get weight
    0 (they lie in unobserved regions).
    """
    posed = np.asarray(posed)
    F, N = posed.shape[:2]
    o2m = np.zeros(len(batch.points), dtype=np.int64)
    m2o = np.zeros((F, N), dtype=np.int64)
    w = np.ones((F, N))
    for f in range(F):
        lo, hi = batch.offsets[f], batch.offsets[f + 1]
        if hi == lo:
            continue
        o2m[lo:hi] = cKDTree(posed[f]).query(batch.points[lo:hi], k=1)[1]
        d, idx = cKDTree(batch.points[lo:hi]).query(posed[f], k=1)
        m2o[f] = lo + idx
        w[f] = _trim(d, gate)
    return Correspondences(o2m, m2o, w)


def cloud_correspondences(verts: np.ndarray, cloud: np.ndarray, cloud_tree: Optional[cKDTree] = None,
                          gate: Optional[float] = None):
    """``(cloud_to_model, model_to_cloud, model_weight)`` for one mesh and cloud."""
    c2m = cKDTree(verts).query(cloud, k=1)[1]
    cloud_tree = cKDTree(cloud) if cloud_tree is None else cloud_tree
    d, m2c = cloud_tree.query(verts, k=1)
    return c2m.astype(np.int64), m2c.astype(np.int64), _trim(d, gate)


def unpose(points, transforms, t, offsets, max_cond: float = 1e8):
    """Map posed points back to canonical space.

    ``transforms`` are the blended 4x4 skinning transforms of each point's
    assigned vertex, ``offsets`` that vertex's pose-blend displacement. Computes
    ``A^-1 (v - t) - offset``. Returns ``(canonical, ok)``; points whose linear
    part has condition number above ``max_cond`` are left as NaN with
    ``ok == False``.
    """
    v = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    A = np.asarray(transforms, dtype=np.float64).reshape(-1, 4, 4)
    off = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(t, dtype=np.float64).reshape(3)
    M, b = A[:, :3, :3], A[:, :3, 3]
    cond = np.linalg.cond(M) if len(M) else np.zeros(0)
    ok = np.isfinite(cond) & (cond <= max_cond)
    out = np.full_like(v, np.nan)
    if ok.any():
        rhs = (v[ok] - t - b[ok])[..., None]
        out[ok] = np.linalg.solve(M[ok], rhs)[..., 0] - off[ok]
    return out, ok


def posed_frame_data(model: TemplateModel, canonical, theta, t, pose_basis=None):
    """Posed vertices, per-vertex blended transforms and pose-blend offsets."""
    tm = model.torch
    P = None if pose_basis is None else _t(pose_basis)
    with torch.no_grad():
        posed, extra = pose_model_t(tm, _t(canonical), _t(theta)[None], _t(t)[None],
                                    pose_basis=P, return_extra=True)
        A = blended_transforms_t(tm.W, extra["G_rel"])
    return posed[0].numpy(), A[0].numpy(), extra["offsets"][0].numpy()


def unpose_frame(observed, model: TemplateModel, canonical, theta, t, frame: int = 0,
                 pose_basis=None, gate: Optional[float] = 3.0) -> UnposedCloud:
    """Unpose one frame's observed surface points.

    Each point is assigned to its nearest posed model vertex and mapped through
    the inverse of that vertex's blended transform. Points farther from the model
    than ``gate`` times the frame's median NN distance are dropped (``gate=None``
    disables gating).
    """
    obs = np.asarray(observed, dtype=np.float64).reshape(-1, 3)
    if len(obs) == 0:
        warnings.warn(f"frame {frame} has no observed points", RuntimeWarning, stacklevel=2)
        return UnposedCloud(np.zeros((0, 3)), frame, np.zeros(0, np.int64))
    if not np.all(np.isfinite(obs)):
        raise InvalidArgument("observed points must be finite")
    posed, A, offsets = posed_frame_data(model, canonical, theta, t, pose_basis)
    corr = nearest_model_vertex(obs, posed)
    keep = np.ones(len(obs), bool)
    if gate is not None:
        keep = corr.distance <= gate * np.median(corr.distance)
    idx = corr.index[keep]
    pts, ok = unpose(obs[keep], A[idx], t, offsets[idx])
    skipped = np.nonzero(keep)[0][~ok]
    if len(skipped):
        logger.warning("frame %d: %d points with singular blended transforms skipped",
                       frame, len(skipped))
    return UnposedCloud(pts[ok], frame, idx[ok], skipped=skipped, gated=int((~keep).sum()))
