"""Training by coordinate descent, new-subject registration and evaluation.

Training alternates three blocks after an initial registration of the prior
model: per-frame pose, then pose blend shapes and the keypoint regressor, then
free-vertex canonical shapes fitted to unposed observations. The learned mean
shape and shape basis come from the final canonical shapes.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
from typing import Callable, Optional

import numpy as np
import torch
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator

from .canonical import cloud_correspondences, frame_correspondences, unpose_frame
from .energies import (FREE_PARAMS, EnergyWeights, FrameBatch, RobustLossParams,
                       StageContext, assemble_energy, nn_distances, stage_energy_value)
from .kinematics import InvalidArgument, TemplateModel, _t, forward_batch, pose_model_t
from .optim import AdamConfig, ParamPacker, adam_minimize
from .shape_space import ShapeSpace, fit_pca, fit_robust_shape_space
from .synth import SubjectSeries

logger = logging.getLogger(__name__)

# Adam works on x / unit: angles in radians, lengths in metres, shape
# coefficients in tens of standard deviations, regressor weights as is.
UNITS = {"theta": 1.0, "transl": 1000.0, "beta": 10.0, "canonical": 1000.0,
         "pose_basis": 1000.0, "keypoint_regressor": 1.0}


class RegistrationFailed(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3
    n_components: int = 10
    robust_pca: bool = True
    weights: EnergyWeights = EnergyWeights()
    robust: RobustLossParams = RobustLossParams()
    # initialization starts from keypoint pre-alignment only and needs a longer budget
    init_adam: AdamConfig = AdamConfig(learning_rate=0.003, lr_decay=0.1, max_steps=2000)
    pose_adam: AdamConfig = AdamConfig(learning_rate=0.003, lr_decay=0.1)
    blend_adam: AdamConfig = AdamConfig(learning_rate=0.003, lr_decay=0.1)
    keyreg_adam: AdamConfig = AdamConfig(learning_rate=0.003, lr_decay=0.1)
    shape_adam: AdamConfig = AdamConfig(learning_rate=0.005, lr_decay=0.1)
    refresh_every: int = 50
    gate: Optional[float] = 3.0
    trim: Optional[float] = 3.0
    keyreg_support: int = 32
    local_blend: bool = True
    rpca_lam: Optional[float] = None
    min_improvement: Optional[float] = None

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def with_steps(self, n: int) -> "TrainConfig":
        """Same configuration with every stage capped at ``n`` Adam steps."""
        return self.replace(**{f: getattr(self, f).replace(max_steps=n) for f in
                               ("init_adam", "pose_adam", "blend_adam", "keyreg_adam",
                                "shape_adam")})


@dataclasses.dataclass
class StageResult:
    state: dict
    trace: np.ndarray
    n_steps: int
    entry_energy: float
    exit_energy: float


# ---------------------------------------------------------------------------
# generic stage runner


def run_stage(stage: str, state: dict, make_ctx: Callable[[dict], StageContext],
              config: AdamConfig, refresh_every: int = 50, units=None) -> StageResult:
    """Minimise one stage energy over its free parameters with Adam.

    ``make_ctx(state)`` builds the frozen context, including nearest-neighbour
    correspondences for ``state``; it is called at entry and every
    ``refresh_every`` steps. Entry and exit energies are both evaluated with the
    exit correspondences.
    """
    names = FREE_PARAMS[stage]
    units = UNITS if units is None else units
    packer = ParamPacker({n: state[n] for n in names}, units)
    holder = [make_ctx(state)]

    def callback(step, x):
        if step > 0 and refresh_every and step % refresh_every == 0:
            holder[0] = make_ctx(packer.unpack(x))
            return True
        return False

    def objective(x):
        value, grads = assemble_energy(stage, packer.unpack(x), holder[0])
        return value, packer.pack(grads)

    res = adam_minimize(objective, packer.pack(state), config, scale=packer.scale,
                        callback=callback)
    out = dict(state)
    out.update({k: v.copy() for k, v in packer.unpack(res.x).items()})
    ctx = make_ctx(out)
    entry = stage_energy_value(stage, state, ctx)
    exit_ = stage_energy_value(stage, out, ctx)
    if exit_ > entry:
        logger.info("stage %s: energy rose from %.6g to %.6g at fixed correspondences",
                    stage, entry, exit_)
    return StageResult(out, res.trace, res.n_steps, entry, exit_)


def _batch(series: SubjectSeries) -> FrameBatch:
    return FrameBatch([f.vertices for f in series.frames], [f.keypoints for f in series.frames],
                      [f.valid for f in series.frames])


def _posed(model: TemplateModel, canonical, thetas, transl, pose_basis=None) -> np.ndarray:
    tm = model.torch
    P = None if pose_basis is None else _t(pose_basis)
    with torch.no_grad():
        return pose_model_t(tm, _t(canonical), _t(thetas), _t(transl), pose_basis=P).numpy()


# ---------------------------------------------------------------------------
# rigid pre-alignment


def _kabsch(src, dst):
    cs, cd = src.mean(0), dst.mean(0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cd - R @ cs


def _unwrap_rotvecs(rv: np.ndarray) -> np.ndarray:
    """Pick, frame by frame, the axis-angle representative closest to the previous one."""
    out = rv.copy()
    for f in range(1, len(out)):
        r = out[f]
        a = np.linalg.norm(r)
        if a < 1e-12:
            continue
        axis = r / a
        cands = [r, r - 2 * np.pi * axis, r + 2 * np.pi * axis]
        out[f] = min(cands, key=lambda c: np.linalg.norm(c - out[f - 1]))
    return out


def rigid_prealign(model: TemplateModel, canonical, series: SubjectSeries, base_pose=None):
    """Per-frame global rotation and translation from keypoint Procrustes.

    The model is posed at ``base_pose`` (default: the prior mean pose) and its
    keypoints are aligned to the valid observed keypoints. Frames with fewer
    than three valid keypoints copy the nearest aligned frame.
    """
    nj = model.tree.n_joints
    if base_pose is None:
        base_pose = model.pose_prior.mean_pose() if model.pose_prior is not None else np.zeros((nj, 3))
    base_pose = np.array(base_pose, dtype=np.float64)
    base_pose[0] = 0.0
    posed = _posed(model, canonical, base_pose[None], np.zeros((1, 3)))[0]
    K0 = model.keypoint_regressor @ posed
    j0 = model.joint_regressor[0] @ np.asarray(canonical)
    F = series.n_frames
    rot, tr = np.full((F, 3), np.nan), np.full((F, 3), np.nan)
    for f, fr in enumerate(series.frames):
        v = np.asarray(fr.valid, bool)
        if v.sum() < 3:
            continue
        R, t = _kabsch(K0[v], fr.keypoints[v])
        rot[f] = Rotation.from_matrix(R).as_rotvec()
        tr[f] = t + R @ j0 - j0
    ok = np.nonzero(np.isfinite(rot[:, 0]))[0]
    if len(ok) == 0:
        raise RegistrationFailed(f"subject {series.subject_id}: no frame has 3 valid keypoints")
    for f in range(F):
        if not np.isfinite(rot[f, 0]):
            g = ok[np.argmin(np.abs(ok - f))]
            rot[f], tr[f] = rot[g], tr[g]
    thetas = np.repeat(base_pose[None], F, axis=0)
    thetas[:, 0] = _unwrap_rotvecs(rot)
    return thetas, tr


# ---------------------------------------------------------------------------
# stages


def _frame_ctx_factory(stage, model, batch, weights, robust, prior, canonical=None,
                       use_smooth=True, gate=None):
    def make(state):
        if stage == "init":
            can = model.shape_vertices(state["beta"])
        else:
            can = canonical
        posed = _posed(model, can, state["theta"], state["transl"])
        return StageContext(model=model, weights=weights, robust=robust, batch=batch,
                            corr=frame_correspondences(posed, batch, gate), prior=prior,
                            canonical=canonical, use_smooth=use_smooth)
    return make


def initialize_subject(model: TemplateModel, series: SubjectSeries, config: TrainConfig,
                       beta0=None) -> SubjectSeries:
    """Fit ``beta``, per-frame pose and translation of the (frozen) model."""
    beta = np.zeros(model.n_shape) if beta0 is None else np.asarray(beta0, float)
    thetas, transl = rigid_prealign(model, model.shape_vertices(beta), series)
    batch = _batch(series)
    make = _frame_ctx_factory("init", model, batch, config.weights, config.robust,
                              model.pose_prior, gate=config.trim)
    res = run_stage("init", {"beta": beta, "theta": thetas, "transl": transl}, make,
                    config.init_adam, config.refresh_every)
    s = res.state
    return dataclasses.replace(series, thetas=s["theta"], transl=s["transl"], beta=s["beta"],
                               canonical=model.shape_vertices(s["beta"]))


def initialize(prior_model: TemplateModel, subjects, config: TrainConfig = TrainConfig()):
    """Initial registration of every subject. Returns ``(fits, failed_ids)``."""
    fits, failed = [], []
    for series in subjects:
        try:
            fits.append(initialize_subject(prior_model, series, config))
        except RegistrationFailed as exc:
            logger.warning("excluding subject: %s", exc)
            failed.append(series.subject_id)
    return fits, failed


def fit_poses(model: TemplateModel, canonical, series: SubjectSeries, config: TrainConfig,
              thetas=None, transl=None, use_smooth: bool = True):
    """Pose stage for one subject with a frozen canonical shape."""
    if thetas is None:
        thetas, transl = rigid_prealign(model, canonical, series)
    make = _frame_ctx_factory("pose", model, _batch(series), config.weights, config.robust,
                              model.pose_prior, canonical=np.asarray(canonical),
                              use_smooth=use_smooth, gate=config.trim)
    res = run_stage("pose", {"theta": thetas, "transl": transl}, make, config.pose_adam,
                    config.refresh_every)
    return res.state["theta"], res.state["transl"], res


def step1_pose(model: TemplateModel, fits, config: TrainConfig):
    out = []
    for s in fits:
        th, tr, _ = fit_poses(model, s.canonical, s, config, s.thetas, s.transl)
        out.append(dataclasses.replace(s, thetas=th, transl=tr))
    return out


def _stack(fits):
    batch = FrameBatch([f.vertices for s in fits for f in s.frames],
                       [f.keypoints for s in fits for f in s.frames],
                       [f.valid for s in fits for f in s.frames])
    canon = np.stack([s.canonical for s in fits])
    sof = np.concatenate([np.full(s.n_frames, i) for i, s in enumerate(fits)])
    thetas = np.concatenate([s.thetas for s in fits])
    transl = np.concatenate([s.transl for s in fits])
    return batch, canon, sof, thetas, transl


def keypoint_support(model: TemplateModel, anchor: np.ndarray, k: int = 32) -> np.ndarray:
    """Binary mask of vertices each keypoint row may use: the ``k`` vertices
    nearest its anchor position plus the anchor's own support."""
    pos = anchor @ model.vertices
    _, idx = cKDTree(model.vertices).query(pos, k=min(k, model.n_vertices))
    mask = np.zeros_like(anchor)
    np.put_along_axis(mask, np.atleast_2d(idx), 1.0, axis=1)
    mask[anchor > 0] = 1.0
    return mask


def pose_blend_support(model: TemplateModel, eps: float = 0.0) -> np.ndarray:
    """0/1 mask shaped like the pose basis: the nine features of joint ``k``
    may only move vertices whose skinning weight for ``k`` exceeds ``eps``."""
    K, N = model.tree.K, model.n_vertices
    mask = np.zeros((N, 3, K, 9))
    mask[:] = (model.skin_weights[1:] > eps).T[:, None, :, None]
    return mask.reshape(3 * N, 9 * K)


def step2_blend(model: TemplateModel, fits, config: TrainConfig):
    """Pose blend shapes from all subjects and frames (shapes and poses frozen)."""
    batch, canon, sof, thetas, transl = _stack(fits)
    support = pose_blend_support(model) if config.local_blend else None
    P0 = np.array(model.pose_basis) if support is None else model.pose_basis * support

    def make(state):
        P = state["pose_basis"] if support is None else state["pose_basis"] * support
        posed = _posed(model, canon[sof], thetas, transl, P)
        return StageContext(model=model, weights=config.weights, batch=batch,
                            corr=frame_correspondences(posed, batch, config.trim),
                            canonicals=canon, subject_of_frame=sof, thetas=thetas,
                            transl=transl, blend_support=support)

    res = run_stage("blend", {"pose_basis": P0}, make, config.blend_adam, config.refresh_every)
    P = res.state["pose_basis"]
    return (P if support is None else P * support), res


def step2_keypoints(model: TemplateModel, fits, anchor: np.ndarray, config: TrainConfig):
    """Keypoint regressor from all frames, anchored at ``anchor``."""
    batch, canon, sof, thetas, transl = _stack(fits)
    posed = _posed(model, canon[sof], thetas, transl)
    support = keypoint_support(model, anchor, config.keyreg_support)
    ctx = StageContext(model=model, weights=config.weights, robust=config.robust, batch=batch,
                       posed=posed, anchor_regressor=anchor, support=support)
    res = run_stage("keyreg", {"keypoint_regressor": np.array(model.keypoint_regressor)},
                    lambda s: ctx, config.keyreg_adam, refresh_every=0)
    J = res.state["keypoint_regressor"] * support
    J = J + (1.0 - J.sum(1, keepdims=True)) / support.sum(1, keepdims=True) * support
    return J, res


def unposed_cloud(model: TemplateModel, series: SubjectSeries, gate=3.0) -> np.ndarray:
    clouds = [unpose_frame(fr.vertices, model, series.canonical, series.thetas[f],
                           series.transl[f], frame=f, gate=gate).points
              for f, fr in enumerate(series.frames) if len(fr.vertices)]
    return np.concatenate(clouds) if clouds else np.zeros((0, 3))


def fit_canonical_vertices(model: TemplateModel, cloud: np.ndarray, init: np.ndarray,
                           config: TrainConfig):
    """Free-vertex canonical shape fitted to an unposed cloud (elastic anchor ``init``)."""
    tree = cKDTree(cloud)

    def make(state):
        return StageContext(model=model, weights=config.weights, cloud=cloud,
                            cloud_corr=cloud_correspondences(state["canonical"], cloud, tree,
                                                             config.trim),
                            anchor=init)

    res = run_stage("shape", {"canonical": np.array(init)}, make, config.shape_adam,
                    config.refresh_every)
    return res.state["canonical"], res


def fit_shape_coefficients(model: TemplateModel, cloud: np.ndarray, beta0, config: TrainConfig):
    """Shape coefficients fitted to an unposed cloud (canonical = mean + basis @ beta)."""
    tree = cKDTree(cloud)

    def make(state):
        return StageContext(model=model, weights=config.weights, cloud=cloud,
                            cloud_corr=cloud_correspondences(model.shape_vertices(state["beta"]),
                                                             cloud, tree, config.trim))

    res = run_stage("shape_beta", {"beta": np.array(beta0, dtype=np.float64)}, make,
                    config.init_adam, config.refresh_every)
    return res.state["beta"], res


def step3_canonical_shape(model: TemplateModel, fits, config: TrainConfig):
    out, flagged = [], []
    for s in fits:
        cloud = unposed_cloud(model, s, config.gate)
        if len(cloud) == 0:
            logger.warning("subject %s: no unposed points, keeping its canonical shape",
                           s.subject_id)
            flagged.append(s.subject_id)
            out.append(s)
            continue
        V, _ = fit_canonical_vertices(model, cloud, s.canonical, config)
        out.append(dataclasses.replace(s, canonical=V))
    return out, flagged


# ---------------------------------------------------------------------------
# metrics


def frame_metrics(posed: np.ndarray, keypoints_pred: np.ndarray, frame) -> dict:
    """Median NN distances both ways plus mean keypoint L2 error (mm)."""
    out = {"obs_to_model": np.nan, "model_to_obs": np.nan, "keypoint_l2": np.nan}
    if len(frame.vertices):
        out["obs_to_model"] = float(np.median(nn_distances(frame.vertices, posed)))
        out["model_to_obs"] = float(np.median(nn_distances(posed, frame.vertices)))
    v = np.asarray(frame.valid, bool)
    if v.any():
        out["keypoint_l2"] = float(np.mean(np.linalg.norm(keypoints_pred[v] - frame.keypoints[v],
                                                          axis=1)))
    return out


def series_metrics(model: TemplateModel, series: SubjectSeries) -> list:
    posed, kps = forward_batch(model, series.canonical, series.thetas, series.transl)
    return [frame_metrics(posed[f], kps[f], fr) for f, fr in enumerate(series.frames)]


def summarize(metrics_by_subject: dict) -> dict:
    """Time-averaged per-subject medians, then averaged over subjects."""
    keys = ("obs_to_model", "model_to_obs", "keypoint_l2")
    per_subject = {k: [np.nanmean([m[k] for m in ms]) for ms in metrics_by_subject.values()]
                   for k in keys}
    return {k: float(np.mean(v)) for k, v in per_subject.items()}


HISTORY_FIELDS = ("iteration", "stage", "obs_to_model", "model_to_obs", "keypoint_l2")


def save_history(path, history):
    """Per-iteration metrics as CSV (floats written with ``repr`` for exact round trips)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for rec in history:
            w.writerow([repr(float(rec[k])) if isinstance(rec[k], float) else rec[k]
                        for k in HISTORY_FIELDS])


# ---------------------------------------------------------------------------
# training


@dataclasses.dataclass
class TrainResult:
    model: TemplateModel
    fits: list
    history: list
    shape_space: ShapeSpace
    shape_info: dict
    excluded: list


def _digest(subjects) -> str:
    h = hashlib.sha256()
    for s in subjects:
        h.update(s.subject_id.encode())
        for fr in s.frames:
            h.update(np.ascontiguousarray(fr.vertices).tobytes())
            h.update(np.ascontiguousarray(fr.keypoints).tobytes())
            h.update(np.ascontiguousarray(fr.valid).tobytes())
    return h.hexdigest()


def finalize_shape_space(canonicals, n_components: int, robust: bool = True, lam=None):
    """Shape space of the canonical shapes.

    The robust fit defaults to ``lam = 1/sqrt(n_subjects)``: with far fewer
    shapes than coordinates, ``1/sqrt(max(dim))`` lets the sparse part absorb
    most of the genuine shape variation.
    """
    shapes = [np.asarray(c).reshape(-1) for c in canonicals]
    if robust:
        lam = 1.0 / np.sqrt(len(shapes)) if lam is None else lam
        return fit_robust_shape_space(shapes, n_components, lam=lam)
    return fit_pca(shapes, n_components), {}


def model_from_space(model: TemplateModel, space: ShapeSpace, meta: dict) -> TemplateModel:
    """Template with mean and unit-variance shape basis from ``space``."""
    std = np.where(space.std > 0, space.std, 1.0)
    return model.replace(vertices=space.mean.reshape(-1, 3), shape_basis=space.basis * std,
                         meta=meta)


def train(subjects, prior_model: TemplateModel, config: TrainConfig = TrainConfig(),
          callback: Optional[Callable] = None) -> TrainResult:
    """Learn mean shape, shape basis, pose blend shapes and keypoint regressor."""
    subjects = list(subjects)
    if len(subjects) < 2:
        raise InvalidArgument("training needs at least two subjects")
    anchor = np.array(prior_model.keypoint_regressor)
    model = prior_model.replace(pose_basis=np.zeros_like(prior_model.pose_basis))
    fits, excluded = initialize(model, subjects, config)
    if len(fits) < 2:
        raise RegistrationFailed("fewer than two subjects survived initialization")
    history = []

    def log(it, stage):
        per = {s.subject_id: series_metrics(model, s) for s in fits}
        rec = dict(summarize(per), iteration=it, stage=stage)
        history.append(rec)
        logger.info("iteration %d %s: obs->model %.4f mm", it, stage, rec["obs_to_model"])
        if callback is not None:
            callback(rec)

    log(0, "init")
    for it in range(1, config.iterations + 1):
        fits = step1_pose(model, fits, config)
        P, _ = step2_blend(model, fits, config)
        model = model.replace(pose_basis=P)
        J, _ = step2_keypoints(model, fits, anchor, config)
        model = model.replace(keypoint_regressor=J)
        fits, _ = step3_canonical_shape(model, fits, config)
        log(it, "shape")
        if config.min_improvement is not None and len(history) >= 2:
            prev, cur = history[-2]["obs_to_model"], history[-1]["obs_to_model"]
            if prev - cur < config.min_improvement * prev:
                break
    space, info = finalize_shape_space([s.canonical for s in fits], config.n_components,
                                       config.robust_pca, config.rpca_lam)
    meta = dict(prior_model.meta, role="trained", iterations=len(history) - 1,
                data_sha256=_digest(subjects), subjects=[s.subject_id for s in fits])
    trained = model_from_space(model, space, meta)
    return TrainResult(trained, fits, history, space, info, excluded)


# ---------------------------------------------------------------------------
# registration of new subjects


@dataclasses.dataclass
class Registration:
    beta: np.ndarray
    thetas: np.ndarray
    transl: np.ndarray
    canonical: np.ndarray
    metrics: list
    series: SubjectSeries


def register_joint(model: TemplateModel, series: SubjectSeries,
                   config: TrainConfig = TrainConfig()) -> Registration:
    """Baseline: joint shape and pose fit in posed space, no unposing."""
    fit = initialize_subject(model, series, config)
    return Registration(fit.beta, fit.thetas, fit.transl, fit.canonical,
                        series_metrics(model, fit), fit)


def register_new_subject(model: TemplateModel, series: SubjectSeries,
                         config: TrainConfig = TrainConfig(),
                         n_components: Optional[int] = None) -> Registration:
    """Initial fit, unpose, shape coefficients from the unposed cloud, pose refinement.

    ``n_components`` restricts the shape basis to its leading columns.
    """
    if n_components is not None:
        model = model.replace(shape_basis=model.shape_basis[:, :n_components])
    fit = initialize_subject(model, series, config)
    cloud = unposed_cloud(model, fit, config.gate)
    beta = fit.beta
    if len(cloud):
        beta, _ = fit_shape_coefficients(model, cloud, fit.beta, config)
    canonical = model.shape_vertices(beta)
    th, tr, _ = fit_poses(model, canonical, fit, config, fit.thetas, fit.transl)
    fit = dataclasses.replace(fit, beta=beta, canonical=canonical, thetas=th, transl=tr)
    return Registration(beta, th, tr, canonical, series_metrics(model, fit), fit)


def neighbour_poses(known_index, thetas, transl, query_index):
    """Pose and translation of the temporally nearest known frame for each query frame."""
    known = np.asarray(known_index)
    pick = [int(np.argmin(np.abs(known - q))) for q in query_index]
    return np.asarray(thetas)[pick].copy(), np.asarray(transl)[pick].copy()


def register_new_poses(model: TemplateModel, canonical, series: SubjectSeries,
                       config: TrainConfig = TrainConfig(), thetas=None,
                       transl=None) -> Registration:
    """Pose-only fits of held-out frames of a known subject (frames treated independently).

    ``thetas``/``transl`` seed the fit, e.g. from :func:`neighbour_poses`;
    otherwise keypoint pre-alignment is used.
    """
    th, tr, _ = fit_poses(model, canonical, series, config, thetas, transl, use_smooth=False)
    fit = dataclasses.replace(series, thetas=th, transl=tr, canonical=np.asarray(canonical))
    return Registration(None, th, tr, np.asarray(canonical), series_metrics(model, fit), fit)


def canonical_rmse(estimate, truth, align: bool = True) -> float:
    """Vertex RMSE between two canonical meshes (after rigid alignment by default)."""
    a, b = np.asarray(estimate, float), np.asarray(truth, float)
    if align:
        R, t = _kabsch(a, b)
        a = a @ R.T + t
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


# ---------------------------------------------------------------------------
# sklearn-style estimators


class BodyModelTrainer(BaseEstimator):
    """Learn a body model from subject series.

    ``fit(subjects, prior_model=...)`` sets ``model_`` (the trained
    :class:`TemplateModel`), ``fits_``, ``history_`` and ``shape_info_``.
    """

    def __init__(self, iterations=3, n_components=10, robust_pca=True, max_steps=None,
                 refresh_every=50, gate=3.0, lr_decay=0.1):
        self.iterations = iterations
        self.n_components = n_components
        self.robust_pca = robust_pca
        self.max_steps = max_steps
        self.refresh_every = refresh_every
        self.gate = gate
        self.lr_decay = lr_decay

    def _config(self) -> TrainConfig:
        c = TrainConfig(iterations=self.iterations, n_components=self.n_components,
                        robust_pca=self.robust_pca, refresh_every=self.refresh_every,
                        gate=self.gate)
        if self.max_steps is not None:
            c = c.with_steps(self.max_steps)
        return c.replace(**{f: getattr(c, f).replace(lr_decay=self.lr_decay) for f in
                            ("init_adam", "pose_adam", "blend_adam", "keyreg_adam",
                             "shape_adam")})

    def fit(self, subjects, y=None, prior_model: Optional[TemplateModel] = None):
        if prior_model is None:
            raise InvalidArgument("prior_model is required")
        res = train(subjects, prior_model, self._config())
        self.model_ = res.model
        self.fits_ = res.fits
        self.history_ = res.history
        self.shape_space_ = res.shape_space
        self.shape_info_ = res.shape_info
        self.excluded_ = res.excluded
        return self


class SubjectRegistration(BaseEstimator):
    """Register a frozen model to one subject series.

    After ``fit(series)``: ``beta_``, ``thetas_``, ``transl_``, ``canonical_``
    and per-frame ``metrics_``. ``score`` returns the negative time-averaged
    median observation-to-model distance.
    """

    def __init__(self, model=None, n_components=None, unpose=True, max_steps=None, lr_decay=0.1):
        self.model = model
        self.n_components = n_components
        self.unpose = unpose
        self.max_steps = max_steps
        self.lr_decay = lr_decay

    def fit(self, series, y=None):
        if self.model is None:
            raise InvalidArgument("model is required")
        cfg = BodyModelTrainer(max_steps=self.max_steps, lr_decay=self.lr_decay)._config()
        if self.unpose:
            reg = register_new_subject(self.model, series, cfg, self.n_components)
        else:
            model = self.model
            if self.n_components is not None:
                model = model.replace(shape_basis=model.shape_basis[:, :self.n_components])
            reg = register_joint(model, series, cfg)
        self.beta_, self.thetas_, self.transl_ = reg.beta, reg.thetas, reg.transl
        self.canonical_, self.metrics_ = reg.canonical, reg.metrics
        return self

    def score(self, series=None, y=None):
        return -float(np.nanmean([m["obs_to_model"] for m in self.metrics_]))
