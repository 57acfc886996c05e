import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from articfit.energies import PosePrior
from articfit.kinematics import KinematicTree, TemplateModel

sys.path.insert(0, str(Path(__file__).parent))
from meshes import icosphere  # noqa: E402

torch.set_num_threads(1)


def make_small_model(seed: int = 0, n_shape: int = 4, n_keypoints: int = 4,
                     pose_scale: float = 1.0) -> TemplateModel:
    """Stretched icosphere skinned to a 4-joint tree (root, two children, one grandchild)."""
    rng = np.random.default_rng(seed)
    v, f = icosphere(2, 1.0)
    v = v * np.array([40.0, 12.0, 12.0])
    parents = [-1, 0, 0, 1]
    joints = np.array([[0.0, 0, 0], [20.0, 0, 0], [-20.0, 0, 0], [32.0, 0, 0]])
    d = np.linalg.norm(v[None] - joints[:, None], axis=-1)
    W = np.exp(-d / 6.0)
    W /= W.sum(0)
    nearest = np.argsort(d, axis=1)[:, :6]
    Jr = np.zeros((4, len(v)))
    for k in range(4):
        Jr[k, nearest[k]] = 1.0 / 6
    Q, _ = np.linalg.qr(rng.normal(size=(3 * len(v), n_shape)))
    S = Q * 5.0 * np.sqrt(len(v))
    P = rng.normal(scale=pose_scale, size=(3 * len(v), 9 * 3))
    Jk = np.zeros((n_keypoints, len(v)))
    for m in range(n_keypoints):
        idx = rng.choice(len(v), 5, replace=False)
        Jk[m, idx] = rng.dirichlet(np.ones(5))
    prior = PosePrior(np.zeros(9), 0.25 * np.eye(9))
    return TemplateModel(KinematicTree(parents, ["root", "a", "b", "c"]), v, f, W, Jr, Jk, S, P,
                         pose_prior=prior)


@pytest.fixture(scope="session")
def small_model():
    return make_small_model()


@pytest.fixture(scope="session")
def synth_models():
    from articfit.synth import SynthConfig, make_prior_model, make_true_model

    cfg = SynthConfig()
    return make_true_model(cfg), make_prior_model(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
