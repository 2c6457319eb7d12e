"""Training-side data model: feature matrices, class partitions and Gram caches.

Feature matrices follow the column convention used throughout the package:
``data`` is ``d x N`` with one training sample per column.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

NORM_MODES = ("unit-l2", "none")


class DictionaryError(ValueError):
    """Raised for malformed training dictionaries."""


def normalize_columns(data, norm_mode="unit-l2"):
    """Return ``data`` with every column scaled to unit Euclidean norm.

    Zero columns cannot be normalized and raise :class:`DictionaryError`.
    Columns whose norm is already 1 to within a few ulps are left untouched,
    which makes the operation exactly idempotent.
    """
    data = np.asarray(data, dtype=np.float64)
    if norm_mode == "none":
        return data.copy()
    if norm_mode != "unit-l2":
        raise DictionaryError(f"unknown norm_mode {norm_mode!r}")
    norms = np.linalg.norm(data, axis=0)
    if np.any(norms == 0.0):
        bad = np.flatnonzero(norms == 0.0)
        raise DictionaryError(f"zero column(s) {bad.tolist()} cannot be unit-l2 normalized")
    norms = np.where(np.abs(norms - 1.0) <= 8 * np.finfo(np.float64).eps, 1.0, norms)
    return data / norms


@dataclass
class GramCache:
    """Lazily computed ``X^T X`` plus Cholesky factors of ``X^T X + lam I``.

    One factorization is kept per distinct ``lam``; filling the cache is
    guarded by a lock so concurrent readers see a single initialization.
    """

    data: np.ndarray
    _gram: np.ndarray | None = field(default=None, repr=False)
    _factors: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def gram(self):
        if self._gram is None:
            with self._lock:
                if self._gram is None:
                    g = self.data.T @ self.data
                    self._gram = 0.5 * (g + g.T)
        return self._gram

    @property
    def dirty(self):
        return self._gram is None

    def factor(self, lam):
        """Cholesky factor of ``X^T X + lam I`` (cached per ``lam``)."""
        lam = float(lam)
        cf = self._factors.get(lam)
        if cf is None:
            gram = self.gram
            with self._lock:
                cf = self._factors.get(lam)
                if cf is None:
                    a = gram + lam * np.eye(gram.shape[0])
                    try:
                        cf = linalg.cho_factor(a, lower=True, check_finite=False)
                    except linalg.LinAlgError as exc:
                        raise np.linalg.LinAlgError(
                            f"X^T X + {lam:g} I is not positive definite"
                        ) from exc
                    self._factors[lam] = cf
        return cf

    def solve(self, lam, rhs):
        """Solve ``(X^T X + lam I) z = rhs``."""
        return linalg.cho_solve(self.factor(lam), rhs, check_finite=False)


@dataclass
class FeatureDictionary:
    """Column dictionary ``X = [X_0, ..., X_{c-1}]`` partitioned by class.

    Columns are stored in their input order; ``class_offsets[i]`` holds the
    column indices belonging to class ``i``.
    """

    data: np.ndarray
    labels: np.ndarray
    class_offsets: tuple
    norm_mode: str = "unit-l2"
    cache: GramCache = field(init=False, repr=False)

    def __post_init__(self):
        self.data.setflags(write=False)
        self.labels.setflags(write=False)
        self.cache = GramCache(self.data)

    @property
    def n_features(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]

    @property
    def n_classes(self):
        return len(self.class_offsets)

    @property
    def class_sizes(self):
        return np.array([len(ix) for ix in self.class_offsets])

    @property
    def gram(self):
        return self.cache.gram

    def class_masks(self):
        """Boolean ``c x N`` matrix; row ``i`` selects the class-``i`` columns."""
        return self.labels[None, :] == np.arange(self.n_classes)[:, None]


def _check_labels(labels, n_samples, n_classes=None):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != n_samples:
        raise DictionaryError(
            f"expected {n_samples} labels, got array of shape {labels.shape}"
        )
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise DictionaryError("labels must be integer class indices")
    labels = labels.astype(np.int64)
    if labels.size and labels.min() < 0:
        raise DictionaryError("labels must be non-negative")
    c = int(labels.max()) + 1 if n_classes is None else int(n_classes)
    counts = np.bincount(labels, minlength=c)
    if counts.shape[0] > c:
        raise DictionaryError(f"label {labels.max()} out of range for {c} classes")
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DictionaryError(f"empty class(es) {empty.tolist()}; labels must be contiguous 0..c-1")
    return labels, c


def build_dictionary(features, labels, norm_mode="unit-l2", n_classes=None):
    """Build a :class:`FeatureDictionary` from a ``d x N`` feature matrix.

    Parameters
    ----------
    features : array_like, shape (d, N)
        One training sample per column.
    labels : array_like of int, shape (N,)
        Class index of each column, contiguous in ``0..c-1``.
    norm_mode : {"unit-l2", "none"}
        Column normalization applied before storage.
    n_classes : int, optional
        Declared class count; every class must still be non-empty.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DictionaryError(f"features must be 2-D (d x N), got shape {x.shape}")
    d, n = x.shape
    if d < 1 or n < 1:
        raise DictionaryError(f"features must have d >= 1 and N >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DictionaryError("features contain non-finite values")
    labels, c = _check_labels(labels, n, n_classes)
    data = normalize_columns(x, norm_mode)
    offsets = tuple(np.flatnonzero(labels == i) for i in range(c))
    return FeatureDictionary(data=np.ascontiguousarray(data), labels=labels,
                             class_offsets=offsets, norm_mode=norm_mode)


def class_submatrix(dictionary, i):
    """Columns of class ``i`` in stored order (a read-only copy)."""
    if not 0 <= i < dictionary.n_classes:
        raise IndexError(f"class index {i} out of range for {dictionary.n_classes} classes")
    return dictionary.data[:, dictionary.class_offsets[i]]


@dataclass(frozen=True)
class CovarianceModel:
    """SPD matrix ``R`` used to whiten residuals in ECRC."""

    R: np.ndarray
    mode: str
    ridge: float

    def factor(self):
        return linalg.cho_factor(self.R, lower=True, check_finite=False)


def build_covariance(dictionary, ridge=None, mode="sample"):
    """Sample covariance of the dictionary columns plus ``ridge * I``.

    The covariance uses the unbiased ``N - 1`` divisor. When ``ridge`` is
    None it defaults to ``1e-6 * trace(C) / d`` (or ``1e-6`` for a zero
    covariance). ``mode="identity"`` returns ``R = I``.
    """
    d = dictionary.n_features
    if mode == "identity":
        return CovarianceModel(R=np.eye(d), mode="identity", ridge=0.0)
    if mode != "sample":
        raise DictionaryError(f"unknown covariance mode {mode!r}")
    n = dictionary.n_samples
    if n < 2:
        raise DictionaryError("sample covariance needs at least two columns")
    cov = np.cov(dictionary.data, rowvar=True, ddof=1).reshape(d, d)
    if ridge is None:
        tr = np.trace(cov)
        ridge = 1e-6 * tr / d if tr > 0 else 1e-6
    if ridge < 0:
        raise DictionaryError("ridge must be non-negative")
    r = cov + ridge * np.eye(d)
    r = 0.5 * (r + r.T)
    try:
        linalg.cholesky(r, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        pivot = float(np.linalg.eigvalsh(r).min())
        raise DictionaryError(
            f"covariance is not positive definite (smallest eigenvalue {pivot:.3e}); "
            "increase the ridge"
        ) from exc
    return CovarianceModel(R=r, mode="sample", ridge=float(ridge))
