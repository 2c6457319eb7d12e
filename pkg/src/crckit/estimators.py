"""scikit-learn compatible estimators wrapping the CRC family.

Samples follow the scikit-learn convention here (rows), and are transposed
into dictionary columns internally.
"""

from __future__ import annotations

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import solvers
from .classifiers import (
    GLOBAL_METHODS,
    PATCH_METHODS,
    RESIDUAL_RULES,
    argmin_tiebreak,
    collaborative_residuals,
    kernel_residuals,
    normalized_residuals,
    vote_from_residuals,
)
from .dictionary import build_covariance, build_dictionary
from .patching import PatchGrid, build_local_dictionaries, extract_patch_batch
from .solvers import KernelSpec, PProCRCFactor


def _encode(y):
    check_classification_targets(y)
    classes, codes = np.unique(y, return_inverse=True)
    return classes, codes


def _predict_from_residuals(R):
    """``R`` is ``c x m``; returns class index per column."""
    return np.array([argmin_tiebreak(R[:, i]) for i in range(R.shape[1])], dtype=np.int64)


class CRCClassifier(ClassifierMixin, BaseEstimator):
    """Whole-sample collaborative representation classifier.

    Parameters
    ----------
    method : {"crc", "ecrc", "rcrc", "kcrc", "procrc", "eprocrc"}
    lam : float
        Ridge weight on the coefficients.
    gamma : float
        Collaboration weight (ProCRC / EProCRC).
    tau, eta : float
        RCRC relaxation weight and group-weight smoothing.
    kernel : {"linear", "rbf"}
    bandwidth : float
        RBF bandwidth.
    covariance_ridge : float or None
        Ridge added to the ECRC sample covariance (None picks a scale-aware default).
    norm_mode : {"unit-l2", "none"}
    residual : {"normalized", "collaborative"}
        Decision residual; ``collaborative`` only affects ProCRC/EProCRC.
    """

    def __init__(self, method="crc", lam=1e-3, gamma=1e-3, tau=0.0, eta=1e-2,
                 kernel="linear", bandwidth=1.0, covariance_ridge=None,
                 norm_mode="unit-l2", residual="normalized", tolerance=1e-10,
                 max_iters=200):
        self.method = method
        self.lam = lam
        self.gamma = gamma
        self.tau = tau
        self.eta = eta
        self.kernel = kernel
        self.bandwidth = bandwidth
        self.covariance_ridge = covariance_ridge
        self.norm_mode = norm_mode
        self.residual = residual
        self.tolerance = tolerance
        self.max_iters = max_iters

    def _solver_config(self):
        return solvers.SolverConfig(
            lam=self.lam, gamma=self.gamma, tau=self.tau, eta=self.eta,
            kernel=KernelSpec(self.kernel, self.bandwidth),
            tolerance=self.tolerance, max_iters=self.max_iters)

    def fit(self, X, y):
        if self.method not in GLOBAL_METHODS:
            raise ValueError(f"method must be one of {GLOBAL_METHODS}, got {self.method!r}")
        if self.residual not in RESIDUAL_RULES:
            raise ValueError(f"residual must be one of {RESIDUAL_RULES}")
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = _encode(y)
        self.config_ = self._solver_config()
        d = build_dictionary(X.T, codes, norm_mode=self.norm_mode,
                             n_classes=len(self.classes_))
        self.dictionary_ = d
        self.n_features_in_ = X.shape[1]
        lam, gamma = self.config_.lam, self.config_.gamma
        self.covariance_ = None
        self.priors_ = None
        if self.method == "crc":
            self._factor = d.cache.factor(lam)
            self._rhs = d.data.T
        elif self.method == "ecrc":
            self.covariance_ = build_covariance(d, self.covariance_ridge)
            H, B = solvers.ecrc_operators(d, self.covariance_, lam)
            self._factor = solvers._cho(H, "ECRC")
            self._rhs = B
        elif self.method in ("procrc", "eprocrc"):
            w = None
            if self.method == "eprocrc":
                self.priors_ = solvers.compute_class_priors(d)
                w = self.priors_.beta_c
            self._factor = solvers._cho(solvers.procrc_system(d, lam, gamma, w), "ProCRC")
            self._rhs = d.data.T
        elif self.method == "kcrc":
            kern = self.config_.kernel
            self._K = solvers.kernel_gram(d, kern)
            solvers.check_psd(self._K)
            self._factor = solvers._cho(self._K + lam * np.eye(d.n_samples), "KCRC")
        return self

    def _features(self, X):
        check_is_fitted(self, "dictionary_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        if self.norm_mode == "unit-l2":
            from .dictionary import normalize_columns
            return normalize_columns(X.T, "unit-l2")
        return X.T.copy()

    def codes(self, X):
        """Coefficient matrix ``N x m`` for the queries in ``X``."""
        Y = self._features(X)
        return self._codes(Y)

    def _codes(self, Y):
        d = self.dictionary_
        if self.method == "rcrc":
            cfg = self.config_
            return np.column_stack([
                solvers.rcrc_solve(d, Y[:, i], cfg.lam, cfg.tau, cfg.eta,
                                   cfg.tolerance, cfg.max_iters).alpha
                for i in range(Y.shape[1])])
        if self.method == "kcrc":
            rhs = self.config_.kernel(d.data, Y)
        else:
            rhs = self._rhs @ Y
        return linalg.cho_solve(self._factor, rhs, check_finite=False)

    def residuals(self, X):
        """Per-class decision residuals, shape ``(n_samples, n_classes)``."""
        Y = self._features(X)
        return self._residuals(Y).T

    def _residuals(self, Y):
        d = self.dictionary_
        A = self._codes(Y)
        if self.method == "kcrc":
            kern = self.config_.kernel
            kyy = np.array([kern(Y[:, i], Y[:, i])[0, 0] for i in range(Y.shape[1])])
            return kernel_residuals(self._K, d.class_offsets, kern(d.data, Y), kyy, A)
        if self.residual == "collaborative" and self.method in ("procrc", "eprocrc"):
            return collaborative_residuals(d.data, d.class_offsets, A)
        return normalized_residuals(d.data, d.class_offsets, Y, A)

    def predict(self, X):
        Y = self._features(X)
        return self.classes_[_predict_from_residuals(self._residuals(Y))]


class PatchCRCClassifier(ClassifierMixin, BaseEstimator):
    """Patch-voting collaborative classifiers for images.

    ``X`` is an ``(n, h, w)`` stack, or ``(n, h*w)`` rows together with
    ``image_shape``.

    Parameters
    ----------
    method : {"pcrc", "gpcrc", "pprocrc"}
    lam, gamma : float
        Ridge weight and coupling weight (GP-CRC location penalty, or the
        PProCRC test-side ridge).
    patch_shape : (int, int) or None
        Defaults to half the image size.
    stride : int or None
        Defaults to half the smaller patch side.
    pca_rank : int or None
        Project patches on a PCA basis fitted to the training patches.
    n_jobs : int or None
        Thread parallelism over test images; predictions do not depend on it.
    """

    def __init__(self, method="pprocrc", lam=1e-3, gamma=1e-3, patch_shape=None,
                 stride=None, image_shape=None, norm_mode="unit-l2", pca_rank=None,
                 n_jobs=None):
        self.method = method
        self.lam = lam
        self.gamma = gamma
        self.patch_shape = patch_shape
        self.stride = stride
        self.image_shape = image_shape
        self.norm_mode = norm_mode
        self.pca_rank = pca_rank
        self.n_jobs = n_jobs

    def _images(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2 and self.image_shape is not None:
            X = X.reshape((X.shape[0],) + tuple(self.image_shape))
        X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_features=1)
        if X.ndim != 3:
            raise ValueError("expected images of shape (n, h, w) or rows with image_shape set")
        return X

    def _grid(self, h, w):
        if self.patch_shape is None:
            base = PatchGrid.default_for(h, w)
            ph, pw = base.patch_h, base.patch_w
        else:
            ph, pw = self.patch_shape
        stride = self.stride if self.stride is not None else max(min(ph, pw) // 2, 1)
        return PatchGrid(h, w, ph, pw, stride)

    def fit(self, X, y):
        if self.method not in PATCH_METHODS:
            raise ValueError(f"method must be one of {PATCH_METHODS}, got {self.method!r}")
        imgs = self._images(X)
        y = np.asarray(y)
        if y.shape != (imgs.shape[0],):
            raise ValueError("need one label per image")
        self.classes_, codes = _encode(y)
        self.grid_ = self._grid(*imgs.shape[1:])
        self.local_ = build_local_dictionaries(imgs, codes, self.grid_, self.norm_mode,
                                               self.pca_rank, n_classes=len(self.classes_))
        self.image_shape_ = imgs.shape[1:]
        self._prepare()
        return self

    def _prepare(self):
        lam, gamma = self.lam, self.gamma
        local = self.local_
        if self.method == "pcrc":
            self._factors = [local.location_dictionary(j).cache.factor(lam)
                             for j in range(local.q)]
        elif self.method == "gpcrc":
            aug = local.augmented_dictionary()
            self._factors = [solvers._cho(
                solvers.gpcrc_system(aug, local.location_columns(j), lam, gamma), "GP-CRC")
                for j in range(local.q)]
        else:
            self._pprocrc = PProCRCFactor.build(local.augmented_dictionary().data, lam)

    def _patch_residuals(self, Y):
        """``c x q`` residual matrix for one test image's patch matrix ``Y``."""
        local = self.local_
        if self.method == "pprocrc":
            aug = local.augmented_dictionary()
            alpha, _ = self._pprocrc.solve_patches(Y, self.gamma)
            return normalized_residuals(aug.data, aug.class_offsets, Y, alpha)
        R = np.empty((local.n_classes, local.q))
        for j in range(local.q):
            d = (local.location_dictionary(j) if self.method == "pcrc"
                 else local.augmented_dictionary())
            y = Y[:, j:j + 1]
            a = linalg.cho_solve(self._factors[j], d.data.T @ y, check_finite=False)
            R[:, j] = normalized_residuals(d.data, d.class_offsets, y, a)[:, 0]
        return R

    def vote_tallies(self, X):
        check_is_fitted(self, "local_")
        imgs = self._images(X)
        if imgs.shape[1:] != self.image_shape_:
            raise ValueError(f"images must be {self.image_shape_}, got {imgs.shape[1:]}")
        patches = extract_patch_batch(imgs, self.grid_, self.norm_mode, self.local_.basis)

        def one(Y):
            return vote_from_residuals(self._patch_residuals(Y))

        if self.n_jobs in (None, 1):
            return [one(Y) for Y in patches]
        return Parallel(n_jobs=self.n_jobs, prefer="threads")(delayed(one)(Y) for Y in patches)

    def predict(self, X):
        winners = np.array([t.winner for t in self.vote_tallies(X)], dtype=np.int64)
        return self.classes_[winners]


def make_estimator(method, **params):
    """Estimator for any method name, dropping parameters it does not take."""
    cls = CRCClassifier if method in GLOBAL_METHODS else PatchCRCClassifier
    if method not in GLOBAL_METHODS + PATCH_METHODS:
        raise ValueError(f"unknown method {method!r}")
    accepted = cls().get_params()
    return cls(method=method, **{k: v for k, v in params.items() if k in accepted})
