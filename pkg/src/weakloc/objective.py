"""Square-loss discriminative clustering cost with the classifier solved out.

For features ``X`` (M x d) and assignments ``Y`` (M x K) the cost is

    h(Y) = min_W  1/(2M) ||XW - Y||_F^2 + lam/2 ||W||_F^2
         = 1/(2M) Tr(Y^T B Y),   B = I - X (X^T X + M lam I)^{-1} X^T.

``B`` is M x M and never formed; everything goes through a Cholesky
factorization of the d x d matrix ``A = X^T X + M lam I``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class RidgeCache:
    X: np.ndarray
    lam: float
    chol: tuple  # (c, lower) as returned by scipy.linalg.cho_factor

    @property
    def M(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def A(self) -> np.ndarray:
        return self.X.T @ self.X + self.M * self.lam * np.eye(self.d)

    def solve(self, R: np.ndarray) -> np.ndarray:
        """Return ``A^{-1} R``."""
        return linalg.cho_solve(self.chol, R, check_finite=False)


@dataclass(frozen=True)
class Classifier:
    W: np.ndarray
    lam: float

    def score(self, x: np.ndarray) -> np.ndarray:
        return score(self, x)


def l2_normalize(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(norms > 0, norms, 1.0)


def build_cache(X, lam: float, normalize: bool = False) -> RidgeCache:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"features must be a non-empty 2-D matrix, got shape {X.shape}")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if not np.all(np.isfinite(X)):
        raise NumericalError("non-finite features")
    if normalize:
        X = l2_normalize(X)
    M, d = X.shape
    A = X.T @ X
    A[np.diag_indices(d)] += M * lam
    try:
        chol = linalg.cho_factor(A, lower=False, check_finite=False)
    except linalg.LinAlgError:
        logger.warning("Cholesky of ridge matrix failed; retrying with spectral shift")
        A[np.diag_indices(d)] += 1e-10 * M * lam
        try:
            chol = linalg.cho_factor(A, lower=False, check_finite=False)
        except linalg.LinAlgError as exc:
            raise NumericalError("ridge matrix is not positive definite") from exc
    X.setflags(write=False)
    return RidgeCache(X, float(lam), chol)


def _check(cache: RidgeCache, Y: np.ndarray) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != cache.M:
        raise ValueError(f"expected {cache.M} rows, got shape {Y.shape}")
    return Y


def _quad(cache: RidgeCache, Y: np.ndarray) -> float:
    # ||Y||^2 - <X^T Y, A^{-1} X^T Y>  ==  Tr(Y^T B Y)
    XtY = cache.X.T @ Y
    return float(np.vdot(Y, Y) - np.vdot(XtY, cache.solve(XtY)))


def h_value(cache: RidgeCache, Y) -> float:
    Y = _check(cache, Y)
    return _quad(cache, Y) / (2 * cache.M)


def gradient(cache: RidgeCache, Y) -> np.ndarray:
    Y = _check(cache, Y)
    return (Y - cache.X @ cache.solve(cache.X.T @ Y)) / cache.M


def curvature(cache: RidgeCache, D) -> float:
    """Second derivative of ``h(Y + t D)`` in ``t``."""
    D = _check(cache, D)
    return max(_quad(cache, D), 0.0) / cache.M


def recover_classifier(cache: RidgeCache, Y) -> Classifier:
    Y = _check(cache, Y)
    return Classifier(cache.solve(cache.X.T @ Y), cache.lam)


def ridge_objective(X: np.ndarray, Y: np.ndarray, W: np.ndarray, lam: float) -> float:
    M = X.shape[0]
    R = X @ W - Y
    return float(np.vdot(R, R)) / (2 * M) + 0.5 * lam * float(np.vdot(W, W))


def score(classifier: Classifier, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != classifier.W.shape[0]:
        raise ValueError(f"descriptor dimension {x.shape[-1]} != {classifier.W.shape[0]}")
    return x @ classifier.W
