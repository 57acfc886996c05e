import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from articfit.kinematics import (InvalidArgument, KinematicTree, PoseParams, _t,
                                 apply_blend_shapes, forward, forward_kinematics, rodrigues,
                                 rodrigues_t, skin)
from articfit.optim import finite_difference_gradient

finite3 = arrays(np.float64, 3, elements=st.floats(-6.0, 6.0, allow_nan=False))


def quat_rotate(r, v):
    """Rotate ``v`` by axis-angle ``r`` via unit-quaternion sandwich q v q*."""
    angle = np.linalg.norm(r)
    if angle == 0:
        return np.array(v, float)
    axis = r / angle
    w, xyz = np.cos(angle / 2), np.sin(angle / 2) * axis

    def mul(a, b):
        return np.concatenate([[a[0] * b[0] - a[1:] @ b[1:]],
                               a[0] * b[1:] + b[0] * a[1:] + np.cross(a[1:], b[1:])])

    q = np.concatenate([[w], xyz])
    qc = np.concatenate([[w], -xyz])
    return mul(mul(q, np.concatenate([[0.0], v])), qc)[1:]


def test_rodrigues_zero_is_identity():
    assert np.array_equal(rodrigues(np.zeros(3)), np.eye(3))


def test_rodrigues_half_turn_z():
    np.testing.assert_allclose(rodrigues([0, 0, np.pi]) @ [1, 0, 0], [-1, 0, 0], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(finite3)
def test_rodrigues_matches_quaternion_oracle(r):
    R = rodrigues(r)
    Q = np.stack([quat_rotate(r, e) for e in np.eye(3)], axis=1)
    np.testing.assert_allclose(R, Q, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(finite3)
def test_rodrigues_orthonormal(r):
    R = rodrigues(r)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1.0) < 1e-12


def test_rodrigues_small_angle_branch_smooth():
    r = _t(np.array([3e-9, -1e-9, 2e-9])).requires_grad_(True)
    R = rodrigues_t(r)
    (g,) = torch.autograd.grad(R[0, 1] + R[2, 0], r)
    assert torch.all(torch.isfinite(g))
    # dR/dr at 0 is the cross-product generator: R[0,1] ~ -r_z, R[2,0] ~ -r_y
    np.testing.assert_allclose(g.numpy(), [0.0, -1.0, -1.0], atol=1e-7)


@pytest.mark.parametrize("bad", [[np.nan, 0, 0], [0, np.inf, 0]])
def test_rodrigues_rejects_non_finite(bad):
    with pytest.raises(InvalidArgument):
        rodrigues(bad)


def test_tree_validation():
    with pytest.raises(InvalidArgument):
        KinematicTree([-1, -1])
    with pytest.raises(InvalidArgument):
        KinematicTree([-1, 2, 0])
    assert KinematicTree([-1, 0, 0, 1]).K == 3


def test_fk_rest_pose_relative_identity():
    tree = KinematicTree([-1, 0, 1])
    joints = np.array([[0, 0, 0], [1, 0, 0], [2, 1, 0]], float)
    _, G_rel = forward_kinematics(tree, joints, PoseParams.zeros(3))
    np.testing.assert_allclose(G_rel, np.broadcast_to(np.eye(4), G_rel.shape), atol=1e-15)


def test_fk_two_joint_chain_quarter_turn():
    tree = KinematicTree([-1, 0])
    joints = np.array([[0, 0, 0], [1, 0, 0]], float)
    theta = np.array([[0, 0, np.pi / 2], [0, 0, 0]])
    G, _ = forward_kinematics(tree, joints, PoseParams(theta, np.zeros(3)))
    np.testing.assert_allclose(G[1, :3, 3], [0, 1, 0], atol=1e-15)


def dense_fk(parents, joints, theta):
    out = []
    for k, p in enumerate(parents):
        A = np.eye(4)
        A[:3, :3] = rodrigues(theta[k])
        A[:3, 3] = joints[k] - (joints[p] if p >= 0 else 0)
        out.append(A if p < 0 else out[p] @ A)
    rel = []
    for k, G in enumerate(out):
        back = np.eye(4)
        back[:3, 3] = -joints[k]
        rel.append(G @ back)
    return np.array(out), np.array(rel)


def test_fk_matches_dense_matrix_oracle(rng):
    parents = [-1, 0, 1, 2, 3]
    tree = KinematicTree(parents)
    for _ in range(20):
        joints = rng.normal(size=(5, 3)) * 10
        theta = rng.normal(size=(5, 3))
        G, G_rel = forward_kinematics(tree, joints, PoseParams(theta, np.zeros(3)))
        G0, R0 = dense_fk(parents, joints, theta)
        np.testing.assert_allclose(G, G0, atol=1e-12)
        np.testing.assert_allclose(G_rel, R0, atol=1e-12)


def test_fk_joint_count_mismatch():
    with pytest.raises(InvalidArgument):
        forward_kinematics(KinematicTree([-1, 0]), np.zeros((3, 3)), PoseParams.zeros(2))


def test_blend_shapes_rest_is_template(small_model):
    T_P, _ = apply_blend_shapes(small_model, np.zeros(small_model.n_shape), np.zeros((4, 3)))
    assert np.array_equal(T_P, small_model.vertices)


def test_blend_shapes_unit_beta_is_column(small_model):
    beta = np.zeros(small_model.n_shape)
    beta[0] = 1.0
    T_P, _ = apply_blend_shapes(small_model, beta, np.zeros((4, 3)))
    np.testing.assert_allclose((T_P - small_model.vertices).reshape(-1),
                               small_model.shape_basis[:, 0], atol=1e-12)


def _dense_blend(m, beta, theta):
    shaped = m.vertices.reshape(-1) + m.shape_basis @ beta
    R = np.concatenate([(rodrigues(theta[k]) - np.eye(3)).reshape(-1)
                        for k in range(1, m.tree.n_joints)])
    return (shaped + m.pose_basis @ R).reshape(-1, 3), m.joint_regressor @ shaped.reshape(-1, 3)


def test_blend_shapes_match_dense_oracle(small_model, rng):
    for _ in range(10):
        beta, theta = rng.normal(size=small_model.n_shape), rng.normal(size=(4, 3))
        T_P, J = apply_blend_shapes(small_model, beta, theta)
        T0, J0 = _dense_blend(small_model, beta, theta)
        np.testing.assert_allclose(T_P, T0, rtol=0, atol=1e-10)
        np.testing.assert_allclose(J, J0, rtol=0, atol=1e-10)


def test_blend_shapes_superposition(small_model, rng):
    m = small_model
    th = np.zeros((4, 3))
    b1, b2 = rng.normal(size=m.n_shape), rng.normal(size=m.n_shape)
    f = lambda b: apply_blend_shapes(m, b, th)[0]  # noqa: E731
    np.testing.assert_allclose(f(b1 + b2) - f(np.zeros(m.n_shape)), (f(b1) - f(0 * b1)) +
                               (f(b2) - f(0 * b2)), atol=1e-10)
    # affine in vec(R(theta)): pose offsets add over joints with disjoint rotations
    t1, t2 = np.zeros((4, 3)), np.zeros((4, 3))
    t1[1], t2[2] = rng.normal(size=3), rng.normal(size=3)
    z = np.zeros(m.n_shape)
    g = lambda t: apply_blend_shapes(m, z, t)[0] - m.vertices  # noqa: E731
    np.testing.assert_allclose(g(t1 + t2), g(t1) + g(t2), atol=1e-10)
    # global rotation is excluded from the pose features
    t0 = np.zeros((4, 3))
    t0[0] = rng.normal(size=3)
    assert np.array_equal(apply_blend_shapes(m, z, t0)[0], m.vertices)


def test_blend_shapes_dimension_errors(small_model):
    with pytest.raises(InvalidArgument):
        apply_blend_shapes(small_model, np.zeros(small_model.n_shape + 1), np.zeros((4, 3)))
    with pytest.raises(InvalidArgument):
        apply_blend_shapes(small_model, np.zeros(small_model.n_shape), np.zeros((3, 3)))


def test_skin_identity_transforms(rng):
    v = rng.normal(size=(50, 3))
    W = rng.dirichlet(np.ones(3), size=50).T
    assert np.array_equal(skin(v, W, np.broadcast_to(np.eye(4), (3, 4, 4))), v)


def test_skin_single_joint_translation(rng):
    v = rng.normal(size=(20, 3))
    G = np.eye(4)[None].copy()
    G[0, :3, 3] = [5, 0, 0]
    np.testing.assert_allclose(skin(v, np.ones((1, 20)), G), v + [5, 0, 0], atol=1e-15)


def test_skin_convex_blend():
    G = np.stack([np.eye(4), np.eye(4)])
    G[0, 0, 3] = 2.0
    out = skin(np.array([[1.0, 2.0, 3.0]]), np.array([[0.5], [0.5]]), G)
    np.testing.assert_allclose(out, [[2.0, 2.0, 3.0]], atol=1e-15)


def test_forward_rest_and_keypoints(small_model):
    pm = forward(small_model)
    assert np.array_equal(pm.vertices, small_model.vertices)
    np.testing.assert_allclose(pm.keypoints, small_model.keypoint_regressor @ small_model.vertices,
                               atol=1e-12)


def test_forward_translation_equivariance(small_model, rng):
    beta, theta = rng.normal(size=small_model.n_shape), rng.normal(size=(4, 3)) * 0.5
    a = forward(small_model, beta, theta, np.zeros(3))
    b = forward(small_model, beta, theta, [10.0, 0, 0])
    np.testing.assert_allclose(b.vertices - a.vertices, np.broadcast_to([10.0, 0, 0], a.vertices.shape),
                               atol=1e-12)


def test_forward_rigid_motion_equivariance(small_model, rng):
    m = small_model
    for _ in range(20):
        beta, theta = rng.normal(size=m.n_shape), rng.normal(size=(4, 3)) * 0.5
        t = rng.normal(size=3) * 20
        theta[0] = 0.0
        base = forward(m, beta, theta, np.zeros(3))
        r0 = rng.normal(size=3)
        th = theta.copy()
        th[0] = r0
        moved = forward(m, beta, th, t)
        R0 = rodrigues(r0)
        j0 = (m.joint_regressor @ m.shape_vertices(beta))[0]
        expect = (base.vertices - j0) @ R0.T + j0 + t
        scale = np.abs(expect).max()
        assert np.abs(moved.vertices - expect).max() <= 1e-9 * scale
        expect_k = (base.keypoints - j0) @ R0.T + j0 + t
        assert np.abs(moved.keypoints - expect_k).max() <= 1e-9 * scale


def test_forward_gradients_match_finite_differences(small_model, rng):
    m = small_model
    nb = m.n_shape
    for _ in range(20):
        x0 = np.concatenate([rng.normal(size=nb), rng.normal(size=12) * 0.6, rng.normal(size=3)])
        w = rng.normal(size=(m.n_vertices, 3))

        def f(x):
            return float(np.sum(w * forward(m, x[:nb], x[nb:nb + 12].reshape(4, 3), x[-3:]).vertices))

        tm = m.torch
        xt = _t(x0).requires_grad_(True)
        from articfit.kinematics import pose_model_t
        canon = tm.vertices + (tm.shape_basis @ xt[:nb]).reshape(-1, 3)
        posed = pose_model_t(tm, canon, xt[nb:nb + 12].reshape(1, 4, 3), xt[-3:].reshape(1, 3))
        (g,) = torch.autograd.grad((posed[0] * _t(w)).sum(), xt)
        fd = finite_difference_gradient(f, x0, h=1e-5)
        rel = np.linalg.norm(g.numpy() - fd) / max(np.linalg.norm(fd), 1e-12)
        assert rel <= 1e-4


def test_template_invariants(small_model):
    assert small_model.check_closed_manifold()
    np.testing.assert_allclose(small_model.skin_weights.sum(0), 1.0, atol=1e-12)
    J = small_model.joint_regressor @ small_model.vertices
    lo, hi = small_model.vertices.min(0), small_model.vertices.max(0)
    assert np.all(J >= lo) and np.all(J <= hi)
    W = np.array(small_model.skin_weights)
    W[0, 0] += 0.1
    with pytest.raises(InvalidArgument):
        small_model.replace(skin_weights=W)
    with pytest.raises(InvalidArgument):
        small_model.replace(faces=np.array([[0, 1, 10 ** 6]]))


def test_template_is_immutable(small_model):
    with pytest.raises(ValueError):
        small_model.vertices[0, 0] = 1.0
