import numpy as np
import pytest

from articfit.energies import gradient_check
from articfit.kinematics import InvalidArgument
from articfit.pipeline import (TrainConfig, canonical_rmse, neighbour_poses, pose_blend_support,
                               register_new_subject, run_stage, train)
from articfit.synth import SynthConfig, make_dataset
from stage_cases import STAGES, stage_case

N_STATES = 20


@pytest.mark.parametrize("stage", STAGES)
def test_stage_gradients_match_finite_differences(stage):
    errs = [gradient_check(stage, *stage_case(stage, seed), rng=np.random.default_rng(seed))
            for seed in range(N_STATES)]
    assert max(errs) <= 1e-4, errs


@pytest.mark.parametrize("stage,field", [("pose", "pose_adam"), ("blend", "blend_adam"),
                                         ("keyreg", "keyreg_adam"), ("shape_beta", "shape_adam")])
def test_stage_lowers_energy(stage, field):
    state, ctx = stage_case(stage, 0)
    config = getattr(TrainConfig().with_steps(60), field)
    res = run_stage(stage, state, lambda s: ctx, config, refresh_every=0)
    assert res.exit_energy < res.entry_energy


def test_blend_support_follows_skinning(synth_models):
    true, _ = synth_models
    mask = pose_blend_support(true)
    assert mask.shape == true.pose_basis.shape
    # the generator's blend shapes are local to each joint's skinning support
    assert np.array_equal(true.pose_basis * mask, true.pose_basis)
    assert set(np.unique(mask)) == {0.0, 1.0}


def test_neighbour_poses():
    th = np.arange(4)[:, None, None] * np.ones((4, 2, 3))
    tr = np.arange(4)[:, None] * np.ones((4, 3))
    a, b = neighbour_poses([0, 2, 5, 9], th, tr, [1, 6, 10])
    assert a[:, 0, 0].tolist() == [0, 2, 3] and b[:, 0].tolist() == [0, 2, 3]


def test_canonical_rmse_rigid_invariant(rng):
    from scipy.spatial.transform import Rotation

    a = rng.normal(size=(30, 3)) * 10
    b = a @ Rotation.from_rotvec([0.2, 0.5, -0.3]).as_matrix().T + 4.0
    assert canonical_rmse(b, a) < 1e-9
    assert canonical_rmse(b, a, align=False) > 1.0


def test_train_needs_two_subjects():
    ds = make_dataset(SynthConfig(n_subjects=1, n_frames=2))
    with pytest.raises(InvalidArgument):
        train(ds.subjects, ds.prior_model)


def test_register_with_true_model_is_exact():
    # noise-free data and the generating model: registration reaches the truth
    cfg = SynthConfig(n_subjects=1, n_frames=3, noise=0.0, dropout=0.0, n_occlusions=0,
                      keypoint_noise=0.0, keypoint_dropout=0.0)
    ds = make_dataset(cfg)
    s = ds.subjects[0]
    reg = register_new_subject(ds.true_model, s, TrainConfig().with_steps(2000))
    o2m = np.median([m["obs_to_model"] for m in reg.metrics])
    assert o2m < 0.5
    assert canonical_rmse(reg.canonical, s.truth.canonical) < 1.0


def test_small_closed_loop_improves():
    ds = make_dataset(SynthConfig(n_subjects=3, n_frames=4))
    res = train(ds.subjects, ds.prior_model, TrainConfig(iterations=2, n_components=2)
                .with_steps(80))
    o2m = [h["obs_to_model"] for h in res.history]
    assert o2m[-1] < o2m[0]
    assert res.model.shape_basis.shape[1] == 2
    assert res.model.meta["role"] == "trained"
