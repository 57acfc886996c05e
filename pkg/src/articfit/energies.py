"""Energy terms for every fitting stage, the generalized robust loss and metrics.

Point-set terms are evaluated two ways: exact nearest-neighbour versions in numpy
(metrics and checks) and fixed-correspondence torch versions used inside the
optimizers, whose gradients are exact for the frozen assignment.
"""
from __future__ import annotations

import dataclasses
import warnings
from typing import Optional

import numpy as np
import torch
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.spatial import cKDTree

from .kinematics import (DTYPE, InvalidArgument, TemplateModel, _t, mesh_edges,
                         pose_features_t, pose_model_t, regress_t)

STAGES = ("init", "pose", "blend", "keyreg", "shape", "shape_beta")


@dataclasses.dataclass(frozen=True)
class RobustLossParams:
    alpha: float = -1.5
    c: float = 1.0

    def __post_init__(self):
        if not self.c > 0:
            raise InvalidArgument("scale c must be positive")
        if self.alpha in (0.0, 2.0):
            raise InvalidArgument("alpha in {0, 2} is not supported")

    @property
    def bound(self) -> float:
        """Supremum of the loss, finite only for negative alpha."""
        if self.alpha < 0:
            return abs(self.alpha - 2.0) / abs(self.alpha)
        return float("inf")


@dataclasses.dataclass(frozen=True)
class EnergyWeights:
    lambda_k: float = 1.0
    lambda_shape: float = 0.1
    lambda_smooth: float = 0.001
    lambda_prior: float = 0.1
    lambda_P: float = 0.01
    lambda_elast: float = 5.0
    lambda_J: float = 0.01

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise InvalidArgument(f"{f.name} must be nonnegative")


class PosePrior:
    """Gaussian over the articulated (non-root) pose blocks."""

    def __init__(self, mean, covariance):
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(covariance, dtype=np.float64)
        if cov.shape != (len(mean), len(mean)):
            raise InvalidArgument("covariance must be square and match the mean")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise InvalidArgument("covariance must be symmetric")
        try:
            chol = cholesky(cov, lower=True)
        except np.linalg.LinAlgError as exc:
            raise InvalidArgument("covariance must be positive definite") from exc
        self.mean = mean
        self.covariance = cov
        self.chol = chol
        self._chol_t = _t(chol)
        self._mean_t = _t(mean)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @classmethod
    def from_samples(cls, thetas: np.ndarray, loading: float = 1e-4) -> "PosePrior":
        x = np.asarray(thetas, dtype=np.float64)[:, 1:].reshape(len(thetas), -1)
        cov = np.cov(x, rowvar=False) + loading * np.eye(x.shape[1])
        return cls(x.mean(0), 0.5 * (cov + cov.T))

    def mean_pose(self) -> np.ndarray:
        return np.concatenate([np.zeros(3), self.mean]).reshape(-1, 3)

    def energy_t(self, theta: torch.Tensor) -> torch.Tensor:
        d = theta[:, 1:].reshape(theta.shape[0], -1) - self._mean_t
        z = torch.linalg.solve_triangular(self._chol_t, d.T, upper=False)
        return (z * z).sum()


# ---------------------------------------------------------------------------
# scalar terms (numpy)


def robust_loss(x, params: RobustLossParams = RobustLossParams()):
    """Generalized robust loss ``rho(x; alpha, c)`` (elementwise)."""
    x = np.asarray(x, dtype=np.float64)
    a, c = params.alpha, params.c
    b = abs(a - 2.0)
    return b / a * (((x / c) ** 2 / b + 1.0) ** (a / 2.0) - 1.0)


def robust_loss_sq_t(x2: torch.Tensor, params: RobustLossParams) -> torch.Tensor:
    """Robust loss from squared residual norms (no square root, smooth at 0)."""
    a, c = params.alpha, params.c
    b = abs(a - 2.0)
    return b / a * ((x2 / (c * c) / b + 1.0) ** (a / 2.0) - 1.0)


def _points(a, name) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise InvalidArgument(f"{name} must be (n, 3)")
    if len(a) == 0:
        raise InvalidArgument(f"{name} is empty")
    return a


def nn_distances(src, dst) -> np.ndarray:
    """Euclidean distance from every ``src`` point to its nearest ``dst`` point."""
    d, _ = cKDTree(_points(dst, "to")).query(_points(src, "from"), k=1)
    return d


def chamfer_two_sided(A, B) -> float:
    """Mean squared NN distance A->B plus mean squared NN distance B->A."""
    A, B = _points(A, "A"), _points(B, "B")
    return float(np.mean(nn_distances(A, B) ** 2) + np.mean(nn_distances(B, A) ** 2))


def chamfer_one_sided_median(src, dst) -> float:
    """Median unsquared NN distance from ``src`` to ``dst`` (evaluation metric)."""
    return float(np.median(nn_distances(src, dst)))


def keypoint_energy(predicted, observed, valid=None,
                    params: RobustLossParams = RobustLossParams()) -> float:
    """Sum of robust losses of keypoint residual norms over valid keypoints."""
    pred = np.asarray(predicted, dtype=np.float64)
    obs = np.asarray(observed, dtype=np.float64)
    if pred.shape != obs.shape:
        raise InvalidArgument("predicted and observed keypoints differ in shape")
    valid = np.ones(len(pred), bool) if valid is None else np.asarray(valid, bool)
    if not valid.any():
        warnings.warn("no valid keypoints; keypoint energy is 0", RuntimeWarning, stacklevel=2)
        return 0.0
    r = np.linalg.norm(pred[valid] - obs[valid], axis=-1)
    return float(robust_loss(r, params).sum())


def smoothness_energy(thetas, translations) -> float:
    thetas = np.asarray(thetas, dtype=np.float64)
    transl = np.asarray(translations, dtype=np.float64)
    if len(thetas) < 2:
        return 0.0
    return float(np.sum(np.diff(thetas, axis=0) ** 2) + np.sum(np.diff(transl, axis=0) ** 2))


def prior_energy(thetas, prior: PosePrior) -> float:
    thetas = np.asarray(thetas, dtype=np.float64)
    d = thetas[:, 1:].reshape(len(thetas), -1) - prior.mean
    if d.shape[1] != prior.dim:
        raise InvalidArgument("pose dimension does not match the prior")
    z = solve_triangular(prior.chol, d.T, lower=True)
    return float(np.sum(z * z))


def prior_energy_solve(thetas, prior: PosePrior) -> float:
    """Same quantity via a full Cholesky solve, kept for cross-checks."""
    thetas = np.asarray(thetas, dtype=np.float64)
    d = thetas[:, 1:].reshape(len(thetas), -1) - prior.mean
    return float(np.sum(d * cho_solve((prior.chol, True), d.T).T))


def edge_elastic_energy(vertices, reference, edges=None, faces=None,
                        reduction: str = "sum") -> float:
    """Squared change of edge vectors relative to a reference mesh."""
    v = np.asarray(vertices, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if v.shape != ref.shape:
        raise InvalidArgument("mesh and reference differ in topology")
    if edges is None:
        if faces is None:
            raise InvalidArgument("edges or faces required")
        edges = mesh_edges(faces)
    d = (v[edges[:, 0]] - v[edges[:, 1]]) - (ref[edges[:, 0]] - ref[edges[:, 1]])
    total = np.sum(d * d)
    return float(total / len(edges) if reduction == "mean" else total)


def shape_reg(beta) -> float:
    return float(np.sum(np.asarray(beta, dtype=np.float64) ** 2))


def pose_blend_reg(P) -> float:
    return float(np.sum(np.asarray(P, dtype=np.float64) ** 2))


def keypoint_regressor_reg(J_k, J_A) -> float:
    J_k, J_A = np.asarray(J_k, dtype=np.float64), np.asarray(J_A, dtype=np.float64)
    if J_k.shape != J_A.shape:
        raise InvalidArgument("regressors differ in shape")
    return float(np.sum((J_k - J_A) ** 2))


# ---------------------------------------------------------------------------
# packed observations and fixed correspondences


class FrameBatch:
    """Observations of F frames packed into flat arrays.

    ``points`` holds every frame's surface points back to back; ``frame`` gives
    the frame of each point. ``keypoints`` is ``(F, M, 3)`` with ``valid`` mask.
    """

    def __init__(self, clouds, keypoints, valid):
        clouds = [np.asarray(c, dtype=np.float64).reshape(-1, 3) for c in clouds]
        self.n_frames = len(clouds)
        self.counts = np.array([len(c) for c in clouds], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)])
        self.points = np.concatenate(clouds) if clouds else np.zeros((0, 3))
        self.frame = np.repeat(np.arange(self.n_frames), self.counts)
        self.keypoints = np.asarray(keypoints, dtype=np.float64).reshape(self.n_frames, -1, 3)
        self.valid = np.asarray(valid, dtype=bool).reshape(self.n_frames, -1)
        self.points_t = _t(self.points)
        self.keypoints_t = _t(self.keypoints)
        self.valid_t = torch.as_tensor(self.valid)
        self.frame_t = torch.as_tensor(self.frame)
        inv = np.where(self.counts > 0, 1.0 / np.maximum(self.counts, 1), 0.0)
        self.inv_count_t = _t(inv[self.frame])
        self.has_points_t = _t((self.counts > 0).astype(np.float64))

    def cloud(self, f: int) -> np.ndarray:
        return self.points[self.offsets[f]:self.offsets[f + 1]]

    def subset(self, frames) -> "FrameBatch":
        frames = list(frames)
        return FrameBatch([self.cloud(f) for f in frames], self.keypoints[frames], self.valid[frames])


@dataclasses.dataclass
class Correspondences:
    """Frozen nearest-neighbour assignment between model and observations.

    ``obs_to_model[p]`` is the model vertex nearest to observed point ``p``;
    ``model_to_obs[f, n]`` the global index of the observed point nearest to
    vertex ``n`` in frame ``f`` (0 for frames without points, masked out).
    ``model_weight[f, n]`` (default 1) switches individual model-side terms off,
    e.g. for vertices in unobserved regions.
    """

    obs_to_model: np.ndarray
    model_to_obs: np.ndarray
    model_weight: Optional[np.ndarray] = None

    def __post_init__(self):
        self.obs_to_model_t = torch.as_tensor(np.asarray(self.obs_to_model, dtype=np.int64))
        self.model_to_obs_t = torch.as_tensor(np.asarray(self.model_to_obs, dtype=np.int64))
        w = np.ones(np.shape(self.model_to_obs)) if self.model_weight is None else self.model_weight
        self.model_weight_t = _t(w)


def surface_energy_t(posed: torch.Tensor, batch: FrameBatch, corr: Correspondences) -> torch.Tensor:
    """Sum over frames of the two-sided (mean, squared) Chamfer energy."""
    if batch.points.shape[0] == 0:
        return posed.sum() * 0.0
    r1 = posed[batch.frame_t, corr.obs_to_model_t] - batch.points_t
    e1 = ((r1 * r1).sum(-1) * batch.inv_count_t).sum()
    r2 = posed - batch.points_t[corr.model_to_obs_t]
    w = corr.model_weight_t
    e2 = ((r2 * r2).sum(-1) * w).sum(-1) / w.sum(-1).clamp(min=1.0)
    return e1 + (e2 * batch.has_points_t).sum()


def cloud_energy_t(verts: torch.Tensor, cloud: torch.Tensor, cloud_to_model: torch.Tensor,
                   model_to_cloud: torch.Tensor, model_weight=None) -> torch.Tensor:
    """Two-sided Chamfer between one mesh ``(N, 3)`` and one fixed cloud."""
    r1 = verts[cloud_to_model] - cloud
    r2 = verts - cloud[model_to_cloud]
    e2 = (r2 * r2).sum(-1)
    if model_weight is None:
        return (r1 * r1).sum(-1).mean() + e2.mean()
    return (r1 * r1).sum(-1).mean() + (e2 * model_weight).sum() / model_weight.sum().clamp(min=1.0)


def keypoint_energy_t(pred: torch.Tensor, batch: FrameBatch, params: RobustLossParams) -> torch.Tensor:
    r = pred - batch.keypoints_t
    rho = robust_loss_sq_t((r * r).sum(-1), params)
    return torch.where(batch.valid_t, rho, torch.zeros_like(rho)).sum()


def smoothness_energy_t(theta: torch.Tensor, transl: torch.Tensor) -> torch.Tensor:
    if theta.shape[0] < 2:
        return theta.sum() * 0.0
    return ((theta[1:] - theta[:-1]) ** 2).sum() + ((transl[1:] - transl[:-1]) ** 2).sum()


def elastic_energy_t(verts: torch.Tensor, ref: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
    """Mean over edges of squared edge-vector change; ``verts`` may be batched."""
    d = (verts[..., edges[:, 0], :] - verts[..., edges[:, 1], :]) - (
        ref[..., edges[:, 0], :] - ref[..., edges[:, 1], :])
    return (d * d).sum(-1).mean(-1).sum()


def effective_regressor_t(J: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Restrict a regressor to its support and make its rows sum to one."""
    Jm = J * mask
    deficit = (1.0 - Jm.sum(1, keepdim=True)) / mask.sum(1, keepdim=True)
    return Jm + deficit * mask


# ---------------------------------------------------------------------------
# stage assembly


@dataclasses.dataclass
class StageContext:
    """Frozen quantities for one stage evaluation.

    Only the fields a stage reads need to be set:

    * ``init``: model, batch, corr, prior.
    * ``pose``: model, batch, corr, prior, canonical (N, 3).
    * ``blend``: model, batch, corr, canonicals (S, N, 3), subject_of_frame,
      thetas, transl; optional blend_support, a 0/1 mask shaped like the pose
      basis.
    * ``keyreg``: model, batch, posed (F, N, 3), anchor_regressor, support.
    * ``shape``: model, cloud, cloud_corr, anchor (N, 3).
    * ``shape_beta``: model, cloud, cloud_corr.
    """

    model: TemplateModel
    weights: EnergyWeights = dataclasses.field(default_factory=EnergyWeights)
    robust: RobustLossParams = dataclasses.field(default_factory=RobustLossParams)
    batch: Optional[FrameBatch] = None
    corr: Optional[Correspondences] = None
    prior: Optional[PosePrior] = None
    canonical: Optional[np.ndarray] = None
    canonicals: Optional[np.ndarray] = None
    subject_of_frame: Optional[np.ndarray] = None
    thetas: Optional[np.ndarray] = None
    transl: Optional[np.ndarray] = None
    posed: Optional[np.ndarray] = None
    anchor_regressor: Optional[np.ndarray] = None
    support: Optional[np.ndarray] = None
    cloud: Optional[np.ndarray] = None
    cloud_corr: Optional[tuple] = None
    anchor: Optional[np.ndarray] = None
    blend_support: Optional[np.ndarray] = None
    use_smooth: bool = True

    def tensor(self, name):
        cache = self.__dict__.setdefault("_tcache", {})
        if name not in cache:
            val = getattr(self, name)
            if name in ("subject_of_frame",):
                cache[name] = torch.as_tensor(np.asarray(val, dtype=np.int64))
            elif name == "cloud_corr":
                idx = tuple(torch.as_tensor(np.asarray(c, dtype=np.int64)) for c in val[:2])
                cache[name] = idx + ((_t(val[2]),) if len(val) > 2 else (None,))
            else:
                cache[name] = _t(val)
        return cache[name]

    def edges_t(self):
        cache = self.__dict__.setdefault("_tcache", {})
        if "edges" not in cache:
            cache["edges"] = torch.as_tensor(self.model.edges)
        return cache["edges"]


FREE_PARAMS = {
    "init": ("beta", "theta", "transl"),
    "pose": ("theta", "transl"),
    "blend": ("pose_basis",),
    "keyreg": ("keypoint_regressor",),
    "shape": ("canonical",),
    "shape_beta": ("beta",),
}


def stage_energy_t(stage: str, p: dict, ctx: StageContext) -> torch.Tensor:
    """Scalar energy of ``stage`` as a torch expression of the free tensors ``p``."""
    if stage not in STAGES:
        raise InvalidArgument(f"unknown stage {stage!r}")
    w = ctx.weights
    tm = ctx.model.torch
    if stage in ("init", "pose"):
        theta, transl = p["theta"], p["transl"]
        if stage == "init":
            canonical = tm.vertices + (tm.shape_basis @ p["beta"]).reshape(-1, 3)
        else:
            canonical = ctx.tensor("canonical")
        posed = pose_model_t(tm, canonical, theta, transl)
        E = surface_energy_t(posed, ctx.batch, ctx.corr)
        E = E + w.lambda_k * keypoint_energy_t(regress_t(tm.J_k, posed), ctx.batch, ctx.robust)
        if ctx.use_smooth:
            E = E + w.lambda_smooth * smoothness_energy_t(theta, transl)
        if ctx.prior is not None:
            E = E + w.lambda_prior * ctx.prior.energy_t(theta)
        if stage == "init":
            E = E + w.lambda_shape * (p["beta"] ** 2).sum()
        return E
    if stage == "blend":
        P = p["pose_basis"]
        if ctx.blend_support is not None:
            P = P * ctx.tensor("blend_support")
        canon = ctx.tensor("canonicals")[ctx.tensor("subject_of_frame")]
        posed, extra = pose_model_t(tm, canon, ctx.tensor("thetas"), ctx.tensor("transl"),
                                    pose_basis=P, return_extra=True)
        E = surface_energy_t(posed, ctx.batch, ctx.corr)
        E = E + w.lambda_P * (P ** 2).sum()
        offsets = extra["offsets"]
        E = E + w.lambda_elast * elastic_energy_t(offsets, torch.zeros_like(offsets), ctx.edges_t())
        return E
    if stage == "keyreg":
        J = effective_regressor_t(p["keypoint_regressor"], ctx.tensor("support"))
        pred = regress_t(J, ctx.tensor("posed"))
        E = keypoint_energy_t(pred, ctx.batch, ctx.robust)
        return E + w.lambda_J * ((J - ctx.tensor("anchor_regressor")) ** 2).sum()
    cloud = ctx.tensor("cloud")
    c2m, m2c, mw = ctx.tensor("cloud_corr")
    if stage == "shape":
        V = p["canonical"]
        E = cloud_energy_t(V, cloud, c2m, m2c, mw)
        return E + w.lambda_elast * elastic_energy_t(V, ctx.tensor("anchor"), ctx.edges_t())
    V = tm.vertices + (tm.shape_basis @ p["beta"]).reshape(-1, 3)
    return cloud_energy_t(V, cloud, c2m, m2c, mw) + w.lambda_shape * (p["beta"] ** 2).sum()


def assemble_energy(stage: str, state: dict, ctx: StageContext):
    """Energy and gradients of ``stage`` at ``state`` (dict of numpy arrays).

    Returns ``(value, grads)`` where ``grads`` has one array per free parameter
    of the stage, matching the input shapes.
    """
    names = FREE_PARAMS.get(stage)
    if names is None:
        raise InvalidArgument(f"unknown stage {stage!r}")
    missing = [n for n in names if n not in state]
    if missing:
        raise InvalidArgument(f"stage {stage} needs free parameters {missing}")
    p = {n: _t(np.asarray(state[n], dtype=np.float64)).clone().requires_grad_(True) for n in names}
    E = stage_energy_t(stage, p, ctx)
    grads = torch.autograd.grad(E, [p[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        out[n] = np.zeros_like(np.asarray(state[n], dtype=np.float64)) if g is None else g.numpy()
    return float(E.detach()), out


def stage_energy_value(stage: str, state: dict, ctx: StageContext) -> float:
    with torch.no_grad():
        p = {n: _t(np.asarray(state[n], dtype=np.float64)) for n in FREE_PARAMS[stage]}
        return float(stage_energy_t(stage, p, ctx))


def gradient_check(stage: str, state: dict, ctx: StageContext, rng=None, h: float = 1e-5,
                   n_coords: int = 24, n_dirs: int = 4) -> float:
    """Relative error between autodiff and central-difference directional derivatives.

    Directions are ``n_coords`` random coordinate axes plus ``n_dirs`` random
    unit vectors over all free parameters. Returns ``|fd - ad| / max(|fd|, |ad|)``
    over the stacked derivatives (0 when both vanish).
    """
    rng = np.random.default_rng(rng)
    names = FREE_PARAMS[stage]
    _, grads = assemble_energy(stage, state, ctx)
    x0 = {n: np.asarray(state[n], dtype=np.float64) for n in names}
    sizes = [x0[n].size for n in names]
    g = np.concatenate([grads[n].ravel() for n in names])
    dim = len(g)
    dirs = [np.eye(1, dim, int(i)).ravel()
            for i in rng.choice(dim, min(n_coords, dim), replace=False)]
    for _ in range(n_dirs):
        d = rng.normal(size=dim)
        dirs.append(d / np.linalg.norm(d))

    def shifted(d, sign):
        out, at = dict(state), 0
        for n, k in zip(names, sizes):
            out[n] = x0[n] + sign * h * d[at:at + k].reshape(x0[n].shape)
            at += k
        return out

    fd = np.array([(stage_energy_value(stage, shifted(d, 1), ctx)
                    - stage_energy_value(stage, shifted(d, -1), ctx)) / (2 * h) for d in dirs])
    ad = np.array([g @ d for d in dirs])
    scale = max(np.linalg.norm(fd), np.linalg.norm(ad))
    return 0.0 if scale == 0 else float(np.linalg.norm(fd - ad) / scale)


__all__ = [
    "RobustLossParams", "EnergyWeights", "PosePrior", "robust_loss", "chamfer_two_sided",
    "chamfer_one_sided_median", "keypoint_energy", "smoothness_energy", "prior_energy",
    "edge_elastic_energy", "shape_reg", "pose_blend_reg", "keypoint_regressor_reg",
    "FrameBatch", "Correspondences", "StageContext", "assemble_energy", "stage_energy_t",
    "gradient_check",
    "pose_features_t", "DTYPE",
]
