"""Population shape statistics: mean shape, PCA and robust PCA of residuals."""
from __future__ import annotations

import dataclasses
import logging
import warnings

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class ShapeSpace:
    """Affine shape subspace ``mean + basis @ beta``.

    ``basis`` has orthonormal columns; ``explained_variance_ratio[k]`` is the
    fraction of the centred training-shape energy captured by column ``k``;
    ``std[k]`` is the standard deviation of the training coefficients.
    """

    mean: np.ndarray
    basis: np.ndarray
    singular_values: np.ndarray
    explained_variance_ratio: np.ndarray
    std: np.ndarray

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]

    def truncate(self, n: int) -> "ShapeSpace":
        return ShapeSpace(self.mean, self.basis[:, :n], self.singular_values[:n],
                          self.explained_variance_ratio[:n], self.std[:n])


def _sign_fix(U: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def _as_columns(shapes) -> np.ndarray:
    X = np.asarray([np.asarray(s, dtype=np.float64).reshape(-1) for s in shapes])
    if X.ndim != 2:
        raise ValueError("shapes must share one length")
    return X.T


def _negligible(total: float, M) -> bool:
    """Residual energy at rounding level relative to the data counts as none."""
    return total <= (1e-12 * np.linalg.norm(M)) ** 2


def _space_from_basis(mean, U, R, M) -> ShapeSpace:
    proj = U.T @ R
    captured = np.sum(proj ** 2, axis=1)
    total = np.sum(R ** 2)
    order = np.argsort(-captured, kind="stable")
    U, captured = U[:, order], captured[order]
    ratio = np.zeros_like(captured) if _negligible(total, M) else captured / total
    n = R.shape[1]
    std = np.sqrt(captured / max(n - 1, 1))
    return ShapeSpace(mean, U, np.sqrt(captured), ratio, std)


def fit_pca(shapes, n_components: int = 10) -> ShapeSpace:
    """Mean-centred PCA of flattened shapes (one shape per list entry)."""
    M = _as_columns(shapes)
    n = M.shape[1]
    if n < 2:
        raise ValueError("PCA needs at least two shapes")
    keep = min(n_components, n - 1, M.shape[0])
    if keep < n_components:
        warnings.warn(f"only {keep} components available from {n} shapes", RuntimeWarning,
                      stacklevel=2)
    mean = M.mean(axis=1)
    R = M - mean[:, None]
    U, s, _ = np.linalg.svd(R, full_matrices=False)
    U = _sign_fix(U[:, :keep])
    total = np.sum(s ** 2)
    ratio = np.zeros(keep) if _negligible(total, M) else s[:keep] ** 2 / total
    return ShapeSpace(mean, U, s[:keep], ratio, s[:keep] / np.sqrt(n - 1))


def _svt(X, tau):
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    r = int(np.count_nonzero(s))
    return (U[:, :r] * s[:r]) @ Vt[:r]


def _shrink(X, tau):
    return np.sign(X) * np.maximum(np.abs(X) - tau, 0.0)


def fit_robust_pca(M, lam=None, tol: float = 1e-7, max_iter: int = 1000, rho: float = 1.05):
    """Principal component pursuit by the inexact augmented Lagrangian method.

    Solves ``min ||L||_* + lam ||E||_1  s.t.  L + E = M`` with
    ``lam = 1 / sqrt(max(M.shape))`` by default. Returns ``(L, E, info)``; if the
    relative residual ``||M - L - E||_F / ||M||_F`` does not fall below ``tol``
    within ``max_iter`` iterations the best iterate is returned with
    ``info["converged"] = False``. The penalty grows by ``rho`` per iteration;
    faster growth reaches feasibility before the objective has converged.
    """
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix must be finite")
    normF = np.linalg.norm(M)
    if normF == 0:
        return np.zeros_like(M), np.zeros_like(M), {"converged": True, "n_iter": 0, "residual": 0.0}
    lam = 1.0 / np.sqrt(max(M.shape)) if lam is None else float(lam)
    norm2 = np.linalg.norm(M, 2)
    Y = M / max(norm2, np.abs(M).max() / lam)
    mu = 1.25 / norm2
    mu_bar = mu * 1e7
    E = np.zeros_like(M)
    best = (np.inf, None, None)
    for it in range(1, max_iter + 1):
        L = _svt(M - E + Y / mu, 1.0 / mu)
        E = _shrink(M - L + Y / mu, lam / mu)
        Z = M - L - E
        res = np.linalg.norm(Z) / normF
        if res < best[0]:
            best = (res, L, E)
        if res < tol:
            return L, E, {"converged": True, "n_iter": it, "residual": res}
        Y = Y + mu * Z
        mu = min(mu * rho, mu_bar)
    logger.warning("robust PCA stopped after %d iterations (residual %.3g)", max_iter, best[0])
    return best[1], best[2], {"converged": False, "n_iter": max_iter, "residual": best[0]}


def pcp_objective(L, E, lam=None) -> float:
    lam = 1.0 / np.sqrt(max(L.shape)) if lam is None else lam
    return float(np.linalg.svd(L, compute_uv=False).sum() + lam * np.abs(E).sum())


def fit_robust_shape_space(shapes, n_components: int = 10, lam=None, tol: float = 1e-7):
    """Mean shape plus a basis extracted from the low-rank part of the residuals.

    Residuals are arranged with subjects as columns. Returns ``(space, info)``.
    """
    M = _as_columns(shapes)
    n = M.shape[1]
    if n < 2:
        raise ValueError("shape space needs at least two shapes")
    keep = min(n_components, n - 1, M.shape[0])
    if keep < n_components:
        warnings.warn(f"only {keep} components available from {n} shapes", RuntimeWarning,
                      stacklevel=2)
    mean = M.mean(axis=1)
    R = M - mean[:, None]
    L, E, info = fit_robust_pca(R, lam=lam, tol=tol)
    U, s, _ = np.linalg.svd(L, full_matrices=False)
    U = _sign_fix(U[:, :keep])
    space = _space_from_basis(mean, U, R, M)
    info = dict(info, sparse_fraction=float(np.linalg.norm(E) / max(np.linalg.norm(R), 1e-300)))
    return space, info


def project(shape, space: ShapeSpace) -> np.ndarray:
    """Least-squares coefficients of ``shape`` in the (orthonormal) basis."""
    x = np.asarray(shape, dtype=np.float64).reshape(-1)
    if x.shape != space.mean.shape:
        raise ValueError("shape dimension does not match the space")
    return space.basis.T @ (x - space.mean)


def reconstruct(beta, space: ShapeSpace) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if beta.shape[0] != space.n_components:
        raise ValueError("beta length does not match the space")
    return space.mean + space.basis @ beta


class RobustPCA(BaseEstimator):
    """Low-rank plus sparse decomposition of a data matrix (PCP)."""

    def __init__(self, lam=None, tol=1e-7, max_iter=1000):
        self.lam = lam
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        L, E, info = fit_robust_pca(X, lam=self.lam, tol=self.tol, max_iter=self.max_iter)
        self.low_rank_, self.sparse_ = L, E
        self.converged_, self.n_iter_ = info["converged"], info["n_iter"]
        return self


class ShapePCA(TransformerMixin, BaseEstimator):
    """Shape space estimator over flattened shapes ``X`` of shape (n_shapes, 3N).

    ``transform`` returns PCA coefficients, ``inverse_transform`` shapes.
    """

    def __init__(self, n_components=10, robust=True, lam=None, tol=1e-7):
        self.n_components = n_components
        self.robust = robust
        self.lam = lam
        self.tol = tol

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        if self.robust:
            self.space_, self.info_ = fit_robust_shape_space(X, self.n_components, self.lam, self.tol)
        else:
            self.space_, self.info_ = fit_pca(X, self.n_components), {}
        self.mean_ = self.space_.mean
        self.components_ = self.space_.basis.T
        self.explained_variance_ratio_ = self.space_.explained_variance_ratio
        return self

    def transform(self, X):
        check_is_fitted(self, "space_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ self.space_.basis

    def inverse_transform(self, B):
        check_is_fitted(self, "space_")
        return np.atleast_2d(B) @ self.components_ + self.mean_
