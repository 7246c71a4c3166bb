"""RBF support vector classifier trained by SMO, and AUC-driven grid search."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import StratifiedKFold
from sklearn.utils.validation import check_is_fitted

from .errors import ConvergenceError, ParameterError

C_GRID = tuple(2.0 ** p for p in range(-3, 8))
GAMMA_GRID = tuple(2.0 ** p for p in range(-9, 2))


def rbf_kernel(a, b, gamma):
    d = (a * a).sum(1)[:, None] - 2.0 * a @ b.T + (b * b).sum(1)[None, :]
    return np.exp(-gamma * np.maximum(d, 0.0))


def to_signed(y):
    """Map labels onto -1/+1; True, 1 and +1 become +1."""
    y = np.asarray(y)
    if y.dtype == bool:
        return np.where(y, 1.0, -1.0)
    return np.where(y > 0, 1.0, -1.0)


def smo(K, y, C, tol=1e-3, max_iter=100000):
    """Solve the SVM dual for a precomputed kernel.

    Working pairs are the maximal violating pair under the first-order
    criterion. Returns ``(alpha, rho, iterations)``; the decision function is
    ``sum_i alpha_i y_i K(x_i, x) - rho``.
    """
    n = len(y)
    alpha = np.zeros(n)
    G = -np.ones(n)  # gradient of 0.5 a'Qa - e'a with Q_ij = y_i y_j K_ij
    diag = np.diag(K).copy()
    for it in range(max_iter):
        F = -y * G
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        if not up.any() or not low.any():
            break
        i = np.flatnonzero(up)[np.argmax(F[up])]
        j = np.flatnonzero(low)[np.argmin(F[low])]
        if F[i] - F[j] < tol:
            break
        Qi = y[i] * y * K[i]
        Qj = y[j] * y * K[j]
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = max(diag[i] + diag[j] + 2.0 * Qi[j], 1e-12)
            delta = (-G[i] - G[j]) / quad
            diff = ai - aj
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j], alpha[i] = 0.0, diff
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, C - diff
            elif alpha[j] > C:
                alpha[j], alpha[i] = C, C + diff
        else:
            quad = max(diag[i] + diag[j] - 2.0 * Qi[j], 1e-12)
            delta = (G[i] - G[j]) / quad
            total = ai + aj
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, total - C
            elif alpha[j] < 0:
                alpha[j], alpha[i] = 0.0, total
            if total > C:
                if alpha[j] > C:
                    alpha[j], alpha[i] = C, total - C
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, total
        G += Qi * (alpha[i] - ai) + Qj * (alpha[j] - aj)
    else:
        raise ConvergenceError(f"SMO did not reach tolerance {tol} within {max_iter} iterations")
    F = -y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = -float(F[free].mean())
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        hi = F[up].max() if up.any() else F.max()
        lo = F[low].min() if low.any() else F.min()
        rho = -0.5 * float(hi + lo)
    return alpha, rho, it


class RbfSVC(ClassifierMixin, BaseEstimator):
    """Soft-margin SVM with an RBF kernel on standardised features.

    Parameters
    ----------
    C : float, default=1.0
    gamma : float, default=1.0
        Kernel width in ``exp(-gamma * ||a - b||^2)``, applied after scaling.
    tol : float, default=1e-3
        Stopping tolerance on the maximal KKT violation.
    max_iter : int, default=100000
        SMO pair updates before :class:`ConvergenceError` is raised.
    standardize : bool, default=True
        Centre and scale each feature with training-set mean and std.

    Attributes
    ----------
    classes_ : ndarray of shape (2,)
    mean_, scale_ : ndarray
        Standardisation fitted on the training data only.
    support_ : ndarray
        Indices of training points with non-zero multiplier.
    support_vectors_ : ndarray
    dual_coef_ : ndarray
        ``alpha_i * y_i`` for the support vectors.
    intercept_ : float
    alpha_ : ndarray
        All multipliers, ``0 <= alpha_i <= C``.
    n_iter_ : int
    """

    def __init__(self, C=1.0, gamma=1.0, tol=1e-3, max_iter=100000, standardize=True):
        self.C = C
        self.gamma = gamma
        self.tol = tol
        self.max_iter = max_iter
        self.standardize = standardize

    def _scale(self, X):
        return (X - self.mean_) / self.scale_

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or len(X) != len(y):
            raise ParameterError("X must be (n_samples, n_features) with one label per row")
        if not np.isfinite(X).all():
            raise ParameterError("features must be finite")
        classes = np.unique(y)
        if len(classes) != 2:
            raise ParameterError(f"need exactly two classes, got {len(classes)}")
        if self.C <= 0 or self.gamma < 0:
            raise ParameterError("C must be positive and gamma non-negative")
        self.classes_ = classes
        ys = np.where(np.asarray(y) == classes[1], 1.0, -1.0)
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            sd = X.std(axis=0)
            self.scale_ = np.where(sd > 0, sd, 1.0)
        else:
            self.mean_, self.scale_ = np.zeros(X.shape[1]), np.ones(X.shape[1])
        Xs = self._scale(X)
        K = rbf_kernel(Xs, Xs, self.gamma)
        K = 0.5 * (K + K.T)  # exact symmetry keeps mirrored SMO paths identical
        alpha, rho, it = smo(K, ys, float(self.C), self.tol, self.max_iter)
        self.alpha_ = alpha
        self.y_signed_ = ys
        self.support_ = np.flatnonzero(alpha > 0)
        self.support_vectors_ = Xs[self.support_]
        self.dual_coef_ = alpha[self.support_] * ys[self.support_]
        self.intercept_ = -rho
        self.n_iter_ = it
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        """``sum_i alpha_i y_i K(x_i, x) + b``; positive favours ``classes_[1]``."""
        check_is_fitted(self, "alpha_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if X.shape[1] != self.n_features_in_:
            raise ParameterError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        if not len(self.support_):
            return np.full(len(X), self.intercept_)
        return rbf_kernel(self._scale(X), self.support_vectors_, self.gamma) @ self.dual_coef_ + self.intercept_

    def predict(self, X):
        return np.where(self.decision_function(X) > 0, self.classes_[1], self.classes_[0])

    def kkt_residuals(self, X):
        """Per-point KKT violation on training data ``X``."""
        m = self.y_signed_ * self.decision_function(X)
        a, C = self.alpha_, self.C
        at_zero, at_c = a <= 0, a >= C
        res = np.abs(m - 1.0)
        res[at_zero] = np.maximum(0.0, 1.0 - m[at_zero])
        res[at_c] = np.maximum(0.0, m[at_c] - 1.0)
        return res


def _inner_folds(y, n_folds):
    counts = np.bincount(np.asarray(y, dtype=np.int64))
    return max(2, min(n_folds, counts.min()))


def grid_search(X, y, C_grid=C_GRID, gamma_grid=GAMMA_GRID, inner_folds=5, seed=None, ids=None,
                observer=None, tol=1e-3):
    """Pick ``(C, gamma)`` maximising pooled inner cross-validated AUC.

    Only ``X``/``y`` are touched, so callers pass the outer training fold.
    Ties go to the smaller C, then the smaller gamma. ``observer(event,
    ids)`` is called with ``"inner_train"`` and ``"inner_val"`` id arrays
    (``ids`` default to row numbers).

    Returns ``(C, gamma, auc_table)`` where ``auc_table[i, j]`` belongs to
    ``C_grid[i]``, ``gamma_grid[j]``.
    """
    from .evaluation import auc_score

    if not len(C_grid) or not len(gamma_grid):
        raise ParameterError("grids must be non-empty")
    X = np.asarray(X, dtype=np.float64)
    y01 = (to_signed(y) > 0).astype(int)
    ids = np.arange(len(X)) if ids is None else np.asarray(ids)
    table = np.full((len(C_grid), len(gamma_grid)), np.nan)
    if len(C_grid) * len(gamma_grid) == 1:
        return C_grid[0], gamma_grid[0], table
    if np.bincount(y01, minlength=2).min() < 2:
        # too few records for inner folds: fall back to the tie-break winner
        return min(C_grid), min(gamma_grid), table
    skf = StratifiedKFold(_inner_folds(y01, inner_folds), shuffle=True, random_state=seed)
    splits = list(skf.split(X, y01))
    scores = np.zeros((len(C_grid), len(gamma_grid), len(X)))
    for tr, va in splits:
        if observer is not None:
            observer("inner_train", ids[tr])
            observer("inner_val", ids[va])
        for i, C in enumerate(C_grid):
            for j, g in enumerate(gamma_grid):
                model = RbfSVC(C=C, gamma=g, tol=tol).fit(X[tr], y01[tr])
                scores[i, j, va] = model.decision_function(X[va])
    for i in range(len(C_grid)):
        for j in range(len(gamma_grid)):
            table[i, j] = auc_score(scores[i, j], y01)
    order = sorted(((-table[i, j], C_grid[i], gamma_grid[j]) for i in range(len(C_grid))
                    for j in range(len(gamma_grid))))
    _, C, g = order[0]
    return C, g, table


__all__ = ["C_GRID", "GAMMA_GRID", "RbfSVC", "grid_search", "rbf_kernel", "smo", "to_signed"]
