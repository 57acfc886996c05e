"""Synthetic ground truth: a hidden true body model, subjects, observations and splits.

Both the hidden true model and the prior model used to initialise training are
built on one procedural base mesh, so they share topology, skin weights and the
joint regressor. They differ in mean shape, shape basis, pose blend shapes and
keypoint regressor, which is exactly what training has to recover.
"""
from __future__ import annotations

import dataclasses
import functools
import logging
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .energies import PosePrior
from .kinematics import InvalidArgument, TemplateModel, forward_batch
from .template import (HINGE_JOINTS, JOINT_NAMES, BodyProportions, build_template,
                       regress_points, shape_basis_from_fields, unit_field)

logger = logging.getLogger(__name__)

TRUE_SHAPE_FIELDS = ("size", "abdomen", "leg_length", "head_size", "arm_length")
TRUE_SHAPE_STD = (10.0, 6.0, 6.0, 5.0, 4.0)
PRIOR_SHAPE_FIELDS = ("size", "girth", "leg_length", "arm_length", "torso_length", "abdomen",
                      "shoulder_width", "hip_width", "limb_girth", "head_depth")
PRIOR_SHAPE_STD = (12.0, 5.0, 5.0, 4.0, 4.0, 4.0, 3.0, 3.0, 3.0, 3.0)
# prior mean = true mean + these unit fields (mm RMS): smaller head, longer and
# thicker limbs, as for a scaled-down newborn body
PRIOR_OFFSET = {"head_size": -4.0, "leg_length": 5.0, "limb_girth": 2.0, "abdomen": -3.0}

# mean fetal pose (axis-angle per joint): flexed hips and knees, arms folded forward
MEAN_POSE = {
    "spine": (-0.15, 0.0, 0.0), "neck": (-0.2, 0.0, 0.0),
    "hip_l": (0.9, 0.0, 0.0), "hip_r": (0.9, 0.0, 0.0),
    "knee_l": (-1.0, 0.0, 0.0), "knee_r": (-1.0, 0.0, 0.0),
    "shoulder_l": (0.0, 0.0, 0.8), "shoulder_r": (0.0, 0.0, -0.8),
}
JOINT_LIMIT = 2.0


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    K: int = 8
    N: int = 602
    M: int = 10
    D_true: int = 5
    n_subjects: int = 10
    n_frames: int = 40
    noise: float = 1.0
    dropout: float = 0.1
    n_occlusions: int = 2
    occlusion_radius: float = 30.0
    smoothness: float = 0.05
    pose_spread: float = 0.25
    translation_step: float = 1.0
    keypoint_noise: float = 1.0
    keypoint_dropout: float = 0.1
    pose_blend_scale: float = 5.0
    keypoint_offset: float = 3.0

    def __post_init__(self):
        if self.K != len(JOINT_NAMES) - 1:
            raise InvalidArgument(f"the procedural skeleton has K={len(JOINT_NAMES) - 1} joints")
        for name in ("N", "M", "n_subjects", "n_frames"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")
        if not 0 <= self.D_true <= len(TRUE_SHAPE_FIELDS):
            raise InvalidArgument(f"D_true must be in [0, {len(TRUE_SHAPE_FIELDS)}]")
        if not 0 <= self.dropout < 1 or not 0 <= self.keypoint_dropout < 1:
            raise InvalidArgument("dropout must lie in [0, 1)")
        if self.noise < 0 or self.n_occlusions < 0 or self.smoothness <= 0:
            raise InvalidArgument("noise and occlusion count must be nonnegative, smoothness positive")

    def replace(self, **kw) -> "SynthConfig":
        return dataclasses.replace(self, **kw)


@dataclasses.dataclass
class FrameObservation:
    vertices: np.ndarray
    keypoints: np.ndarray
    valid: np.ndarray
    index: int = 0
    timestamp: float = 0.0


@dataclasses.dataclass
class SubjectTruth:
    beta: np.ndarray
    thetas: np.ndarray
    transl: np.ndarray
    canonical: np.ndarray


@dataclasses.dataclass
class SubjectSeries:
    """Ordered frames of one subject plus (after fitting) its estimates."""

    subject_id: str
    frames: list
    truth: Optional[SubjectTruth] = None
    thetas: Optional[np.ndarray] = None
    transl: Optional[np.ndarray] = None
    canonical: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def subset(self, frame_ids) -> "SubjectSeries":
        ids = list(frame_ids)
        truth = None
        if self.truth is not None:
            t = self.truth
            truth = SubjectTruth(t.beta, t.thetas[ids], t.transl[ids], t.canonical)
        return SubjectSeries(self.subject_id, [self.frames[i] for i in ids], truth)


# ---------------------------------------------------------------------------
# models


def _rng(config: SynthConfig, *key) -> np.random.Generator:
    return np.random.default_rng([config.seed, *key])


@functools.lru_cache(maxsize=4)
def _base(n_vertices: int):
    return build_template(BodyProportions(), n_vertices=n_vertices, n_keypoints=16,
                          shape_fields=())


def _keypoint_subset(model: TemplateModel, M: int):
    from .template import _keypoint_subset as subset

    names = subset(M)
    return names, [model.keypoint_names.index(n) for n in names]


def _pose_blend_basis(base: TemplateModel, info, scale: float, rng) -> np.ndarray:
    """Bulges along the vertex normals near each joint, linear in ``R - I``."""
    v, W, nrm = base.vertices, base.skin_weights, info["normals"]
    joints = base.joint_regressor @ v
    K = base.tree.K
    P = np.zeros((v.shape[0], 3, 9 * K))
    for k in range(1, K + 1):
        g = W[k] * np.exp(-np.sum((v - joints[k]) ** 2, 1) / (2 * 25.0 ** 2))
        c = rng.normal(0.0, scale, 9)
        P[:, :, 9 * (k - 1):9 * k] = (g[:, None] * nrm)[:, :, None] * c
    return P.reshape(-1, 9 * K)


def make_true_model(config: SynthConfig = SynthConfig()) -> TemplateModel:
    """Hidden ground-truth model."""
    base, info = _base(config.N)
    rng = _rng(config, 1)
    names, rows = _keypoint_subset(base, config.M)
    kp = info["keypoints"][rows] + rng.normal(0.0, config.keypoint_offset / np.sqrt(3), (config.M, 3))
    Jk = regress_points(base.vertices, kp)
    fields = TRUE_SHAPE_FIELDS[:config.D_true]
    S = shape_basis_from_fields(info["fields"], fields, TRUE_SHAPE_STD[:config.D_true]) \
        if fields else np.zeros((3 * config.N, 0))
    P = _pose_blend_basis(base, info, config.pose_blend_scale, rng)
    return base.replace(keypoint_regressor=Jk, keypoint_names=names, shape_basis=S, pose_basis=P,
                        pose_prior=make_pose_prior(config),
                        meta=dict(base.meta, role="truth", seed=config.seed))


def make_prior_model(config: SynthConfig = SynthConfig()) -> TemplateModel:
    """Generic prior model: offset mean shape, generic shape space, P = 0, catalog regressor."""
    base, info = _base(config.N)
    names, rows = _keypoint_subset(base, config.M)
    offset = sum(w * unit_field(info["fields"][k]) for k, w in PRIOR_OFFSET.items())
    verts = base.vertices + offset
    S = shape_basis_from_fields(info["fields"], PRIOR_SHAPE_FIELDS, PRIOR_SHAPE_STD)
    return base.replace(vertices=verts, keypoint_regressor=base.keypoint_regressor[rows],
                        keypoint_names=names, shape_basis=S,
                        pose_prior=make_pose_prior(config), meta=dict(base.meta, role="prior"))


# ---------------------------------------------------------------------------
# poses


def mean_pose() -> np.ndarray:
    theta = np.zeros((len(JOINT_NAMES), 3))
    for name, aa in MEAN_POSE.items():
        theta[JOINT_NAMES.index(name)] = aa
    return theta


def _limit(theta: np.ndarray) -> np.ndarray:
    out = theta.copy()
    for k, name in enumerate(JOINT_NAMES[1:], start=1):
        if name in HINGE_JOINTS:
            out[k] = [np.clip(out[k, 0], -JOINT_LIMIT, 0.0), 0.0, 0.0]
        else:
            n = np.linalg.norm(out[k])
            if n > JOINT_LIMIT:
                out[k] *= JOINT_LIMIT / n
    return out


def sample_pose_trajectory(n_frames: int, rng, smoothness: float = 0.05, spread: float = 0.25,
                           translation_step: float = 1.0):
    """Smoothed random walk clipped to joint limits.

    The walk starts at a random perturbation (``spread``) of the population
    mean pose and is weakly pulled back towards that mean, so a subject's
    time-averaged pose stays close to it. Returns
    ``(thetas (F, J, 3), transl (F, 3))``. Each per-frame change of a joint's
    axis-angle has norm at most ``smoothness * sqrt(3)``.
    """
    J = len(JOINT_NAMES)
    centre = mean_pose()
    start = _limit(centre + rng.normal(0.0, spread, (J, 3)))
    start[0] = Rotation.random(random_state=rng).as_rotvec()
    hinge = np.array([n in HINGE_JOINTS for n in JOINT_NAMES])
    thetas = np.zeros((n_frames, J, 3))
    transl = np.zeros((n_frames, 3))
    theta, vel = start.copy(), np.zeros((J, 3))
    t, tvel = rng.normal(0.0, 10.0, 3), np.zeros(3)
    for f in range(n_frames):
        thetas[f], transl[f] = theta, t
        pull = 0.05 * (theta - centre)
        pull[0] = 0.0
        vel = 0.8 * vel + 0.5 * rng.normal(0.0, smoothness, (J, 3)) - pull
        vel[hinge, 1:] = 0.0
        step = np.clip(vel, -smoothness, smoothness)
        new = theta + step
        # the root rotation is composed rather than added so it stays well defined
        new[0] = (Rotation.from_rotvec(step[0]) * Rotation.from_rotvec(theta[0])).as_rotvec()
        theta = _limit(new)
        tvel = 0.8 * tvel + 0.5 * rng.normal(0.0, translation_step, 3)
        t = t + np.clip(tvel, -translation_step, translation_step)
    return thetas, transl


def make_pose_prior(config: SynthConfig, n_series: int = 50) -> PosePrior:
    """Gaussian fitted to poses drawn from the trajectory sampler (own seed stream)."""
    rng = _rng(config, 2)
    thetas = np.concatenate([
        sample_pose_trajectory(config.n_frames, rng, config.smoothness, config.pose_spread,
                               config.translation_step)[0] for _ in range(n_series)])
    return PosePrior.from_samples(thetas, loading=1e-4)


# ---------------------------------------------------------------------------
# observations


def observe(posed: np.ndarray, keypoints: np.ndarray, config: SynthConfig, rng):
    """Noisy, partial view of one posed frame: ``(points, keypoints, valid)``."""
    n = len(posed)
    keep = rng.random(n) >= config.dropout
    for _ in range(config.n_occlusions):
        centre = posed[rng.integers(n)]
        keep &= np.linalg.norm(posed - centre, axis=1) > config.occlusion_radius
    pts = posed[keep] + rng.normal(0.0, config.noise, (int(keep.sum()), 3))
    kps = keypoints + rng.normal(0.0, config.keypoint_noise, keypoints.shape)
    valid = rng.random(len(keypoints)) >= config.keypoint_dropout
    if valid.sum() < 3:
        valid[rng.choice(len(keypoints), 3, replace=False)] = True
    return pts, kps, valid


def sample_subject_series(model: TemplateModel, config: SynthConfig, subject: int = 0,
                          beta=None) -> SubjectSeries:
    """One subject: latent shape, pose trajectory and per-frame observations."""
    rng = _rng(config, 3, subject)
    beta = rng.normal(0.0, 1.0, model.n_shape) if beta is None else np.asarray(beta, float)
    canonical = model.shape_vertices(beta)
    thetas, transl = sample_pose_trajectory(config.n_frames, rng, config.smoothness,
                                            config.pose_spread, config.translation_step)
    posed, kps = forward_batch(model, canonical, thetas, transl)
    frames = []
    for f in range(config.n_frames):
        pts, k, valid = observe(posed[f], kps[f], config, rng)
        frames.append(FrameObservation(pts, k, valid, index=f, timestamp=float(f)))
    truth = SubjectTruth(beta, thetas, transl, canonical)
    return SubjectSeries(f"s{subject:03d}", frames, truth)


@dataclasses.dataclass
class SynthDataset:
    config: SynthConfig
    subjects: list
    true_model: TemplateModel
    prior_model: TemplateModel


def make_dataset(config: SynthConfig = SynthConfig()) -> SynthDataset:
    true = make_true_model(config)
    prior = make_prior_model(config)
    subjects = [sample_subject_series(true, config, s) for s in range(config.n_subjects)]
    return SynthDataset(config, subjects, true, prior)


# ---------------------------------------------------------------------------
# splits


@dataclasses.dataclass(frozen=True)
class Split:
    """One fold: held-out subjects plus held-out frames of the training subjects."""

    fold: int
    train: tuple
    new_shape: tuple
    new_pose: dict

    def train_frames(self, subject: int, n_frames: int) -> list:
        held = set(self.new_pose.get(subject, ()))
        return [f for f in range(n_frames) if f not in held]


def make_splits(n_subjects: int, n_frames: int, seed: int = 0, n_folds: int = 5,
                new_pose_fraction: float = 0.1) -> list:
    """``n_folds``-fold New-Shape rotation (every subject is held out exactly once);
    each fold also holds out 10% of every remaining subject's frames as New-Pose
    frames."""
    if n_subjects < n_folds:
        raise InvalidArgument(f"need at least {n_folds} subjects for {n_folds} folds")
    rng = np.random.default_rng([seed, 4])
    order = rng.permutation(n_subjects)
    folds = np.array_split(order, n_folds)
    n_pose = int(round(new_pose_fraction * n_frames))
    splits = []
    for k in range(n_folds):
        held = tuple(sorted(int(s) for s in folds[k]))
        train = tuple(s for s in range(n_subjects) if s not in held)
        new_pose = {s: tuple(sorted(int(f) for f in rng.choice(n_frames, n_pose, replace=False)))
                    for s in train}
        splits.append(Split(k, train, held, new_pose))
    return splits
