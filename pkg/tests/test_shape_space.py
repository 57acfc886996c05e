import time
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from articfit.shape_space import (RobustPCA, ShapePCA, fit_pca, fit_robust_pca,
                                  fit_robust_shape_space, pcp_objective, project, reconstruct)


def _low_rank(rng, n, m, r):
    return rng.normal(size=(n, r)) @ rng.normal(size=(r, m))


def _corrupted(seed, n=200, m=50, r=3, frac=0.05):
    rng = np.random.default_rng(seed)
    L = _low_rank(rng, n, m, r)
    E = np.zeros((n, m))
    idx = rng.choice(n * m, int(frac * n * m), replace=False)
    E.flat[idx] = rng.choice([-1.0, 1.0], len(idx)) * rng.uniform(5, 10, len(idx))
    return L, E


def test_identical_shapes_have_zero_variance(rng):
    s = rng.normal(size=30)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        space = fit_pca([s] * 5, 3)
    np.testing.assert_allclose(space.mean, s, atol=1e-12)
    assert np.all(space.singular_values < 1e-12)
    assert np.all(space.explained_variance_ratio == 0)


def test_rank_two_family(rng):
    base, a, b = rng.normal(size=(3, 60))
    shapes = [base + x * a + y * b for x, y in rng.normal(size=(12, 2))]
    space = fit_pca(shapes, 5)
    assert abs(space.explained_variance_ratio[:2].sum() - 1.0) < 1e-9
    assert np.all(space.explained_variance_ratio[2:] < 1e-12)


def test_full_rank_reconstruction(rng):
    shapes = rng.normal(size=(6, 40))
    space = fit_pca(shapes, 5)
    for s in shapes:
        np.testing.assert_allclose(reconstruct(project(s, space), space), s, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(3, 12), k=st.integers(1, 6))
def test_basis_orthonormal_and_ratio_nonincreasing(seed, n, k):
    rng = np.random.default_rng(seed)
    shapes = rng.normal(size=(n, 30)) * rng.uniform(0.1, 5, 30)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for space in (fit_pca(shapes, k), fit_robust_shape_space(shapes, k)[0]):
            B = space.basis
            np.testing.assert_allclose(B.T @ B, np.eye(B.shape[1]), atol=1e-10)
            assert np.all(np.diff(space.explained_variance_ratio) <= 1e-12)
            assert space.explained_variance_ratio.sum() <= 1 + 1e-12


def test_truncation_warns():
    with pytest.warns(RuntimeWarning, match="only 3 components"):
        fit_pca(np.eye(4), 10)


def test_project_matches_normal_equations(rng):
    space = fit_pca(rng.normal(size=(8, 25)), 4)
    x = rng.normal(size=25)
    B = space.basis
    beta_ref = np.linalg.solve(B.T @ B, B.T @ (x - space.mean))
    np.testing.assert_allclose(project(x, space), beta_ref, atol=1e-12)
    with pytest.raises(ValueError):
        project(x[:-1], space)
    with pytest.raises(ValueError):
        reconstruct(np.zeros(3), space)


def test_pcp_exact_low_rank_has_no_sparse_part(rng):
    M = _low_rank(rng, 100, 40, 2)
    L, E, info = fit_robust_pca(M)
    assert info["converged"]
    assert np.linalg.norm(E) / np.linalg.norm(M) < 1e-5
    assert np.linalg.norm(L - M) / np.linalg.norm(M) < 1e-5


def test_pcp_zero_matrix():
    L, E, info = fit_robust_pca(np.zeros((7, 5)))
    assert np.all(L == 0) and np.all(E == 0) and info["converged"]


def test_pcp_rejects_non_finite():
    with pytest.raises(ValueError):
        fit_robust_pca(np.array([[1.0, np.nan], [0.0, 1.0]]))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pcp_recovers_corrupted_low_rank(seed):
    L0, E0 = _corrupted(seed)
    t = time.perf_counter()
    L, E, info = fit_robust_pca(L0 + E0)
    assert time.perf_counter() - t < 60
    assert info["converged"]
    assert np.linalg.norm(L - L0) / np.linalg.norm(L0) <= 1e-4
    # the minimiser is no worse than the generating pair
    assert pcp_objective(L, E) <= pcp_objective(L0, E0) + 1e-6 * pcp_objective(L0, E0)


def test_pcp_reports_non_convergence(rng):
    L0, E0 = _corrupted(3)
    _, _, info = fit_robust_pca(L0 + E0, max_iter=3)
    assert not info["converged"] and info["n_iter"] == 3


def test_robust_space_ignores_sparse_spikes(rng):
    base, a, b = rng.normal(size=(3, 300))
    shapes = np.array([base + x * a + y * b for x, y in rng.normal(size=(30, 2))])
    clean = fit_pca(shapes, 2)
    dirty = shapes.copy()
    dirty[4, 17] += 50.0
    dirty[9, 123] -= 80.0
    robust, info = fit_robust_shape_space(dirty, 2)
    plain = fit_pca(dirty, 2)

    def gap(space):
        P = space.basis @ space.basis.T
        return np.linalg.norm(P - clean.basis @ clean.basis.T)

    assert info["sparse_fraction"] > 0
    assert gap(robust) < 0.2 * gap(plain)


def test_estimators(rng):
    X = rng.normal(size=(9, 20))
    est = ShapePCA(n_components=4, robust=False).fit(X)
    Z = est.transform(X)
    assert Z.shape == (9, 4)
    np.testing.assert_allclose(est.inverse_transform(Z[:1])[0], reconstruct(Z[0], est.space_),
                               atol=1e-12)
    assert est.get_params()["n_components"] == 4
    full = ShapePCA(n_components=8, robust=False).fit(X)
    np.testing.assert_allclose(full.inverse_transform(full.transform(X)), X, atol=1e-9)
    L0, E0 = _corrupted(4, 80, 30)
    rp = RobustPCA().fit(L0 + E0)
    assert rp.converged_
    np.testing.assert_allclose(rp.low_rank_ + rp.sparse_, L0 + E0, atol=1e-5)
    robust = ShapePCA(n_components=3).fit(X)
    assert robust.info_["converged"]
