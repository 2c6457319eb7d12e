"""Overlapping patch grids, location-matched dictionaries and test patch sets."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.decomposition import PCA

from .dictionary import _check_labels, build_dictionary, normalize_columns


class PatchError(ValueError):
    """Raised for invalid patch geometry or mismatched image sizes."""


def patch_count(image_h, image_w, patch_h, patch_w, stride):
    """Return ``(rows, cols, q)`` for a grid anchored at the top-left pixel.

    Border pixels that do not fill a whole patch are dropped.

    >>> patch_count(32, 32, 16, 16, 8)
    (3, 3, 9)
    """
    if stride < 1:
        raise PatchError(f"stride must be >= 1, got {stride}")
    if patch_h < 1 or patch_w < 1:
        raise PatchError("patch dimensions must be positive")
    if patch_h > image_h or patch_w > image_w:
        raise PatchError(
            f"patch {patch_h}x{patch_w} does not fit in image {image_h}x{image_w}"
        )
    rows = (image_h - patch_h) // stride + 1
    cols = (image_w - patch_w) // stride + 1
    return rows, cols, rows * cols


@dataclass(frozen=True)
class PatchGrid:
    image_h: int
    image_w: int
    patch_h: int
    patch_w: int
    stride: int

    def __post_init__(self):
        patch_count(self.image_h, self.image_w, self.patch_h, self.patch_w, self.stride)

    @classmethod
    def default_for(cls, image_h, image_w):
        """Half-size patches at half-patch stride."""
        ph, pw = max(image_h // 2, 1), max(image_w // 2, 1)
        return cls(image_h, image_w, ph, pw, max(min(ph, pw) // 2, 1))

    @property
    def rows(self):
        return patch_count(self.image_h, self.image_w, self.patch_h, self.patch_w, self.stride)[0]

    @property
    def cols(self):
        return patch_count(self.image_h, self.image_w, self.patch_h, self.patch_w, self.stride)[1]

    @property
    def q(self):
        return self.rows * self.cols

    @property
    def patch_dim(self):
        return self.patch_h * self.patch_w

    def location(self, j):
        """Row-major ``(row, col)`` grid coordinates of patch ``j``."""
        if not 0 <= j < self.q:
            raise IndexError(f"patch index {j} out of range for q={self.q}")
        return divmod(j, self.cols)

    def index(self, row, col):
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise IndexError(f"grid position ({row}, {col}) out of range")
        return row * self.cols + col

    def pixel_origin(self, j):
        r, c = self.location(j)
        return r * self.stride, c * self.stride

    def to_dict(self):
        return {"h": self.patch_h, "w": self.patch_w, "stride": self.stride}


def _raw_patches(images, grid):
    """Raw row-major patches: ``(n, patch_dim, q)`` for ``n`` images."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 2:
        imgs = imgs[None]
    if imgs.ndim != 3:
        raise PatchError(f"expected image array of shape (h, w) or (n, h, w), got {imgs.shape}")
    if imgs.shape[1:] != (grid.image_h, grid.image_w):
        raise PatchError(
            f"image size {imgs.shape[1:]} does not match grid {(grid.image_h, grid.image_w)}"
        )
    win = sliding_window_view(imgs, (grid.patch_h, grid.patch_w), axis=(1, 2))
    win = win[:, ::grid.stride, ::grid.stride][:, :grid.rows, :grid.cols]
    n = imgs.shape[0]
    flat = win.reshape(n, grid.q, grid.patch_dim)
    return np.ascontiguousarray(flat.transpose(0, 2, 1))


@dataclass(frozen=True)
class PatchBasis:
    """PCA projection fitted on training patches; applied before normalization."""

    mean: np.ndarray
    components: np.ndarray

    @property
    def rank(self):
        return self.components.shape[0]

    def project(self, patches):
        # patches: (patch_dim, m)
        return self.components @ (patches - self.mean[:, None])


def fit_patch_basis(images, grid, rank):
    raw = _raw_patches(images, grid)
    cols = raw.transpose(1, 0, 2).reshape(grid.patch_dim, -1)
    rank = int(rank)
    if not 1 <= rank <= min(cols.shape):
        raise PatchError(f"PCA rank {rank} out of range for {cols.shape} patch matrix")
    pca = PCA(n_components=rank, svd_solver="full").fit(cols.T)
    return PatchBasis(mean=pca.mean_.copy(), components=pca.components_.copy())


def _featurize(raw, norm_mode, basis):
    """``raw`` is ``(patch_dim, m)``; returns normalized (optionally projected) columns."""
    feats = raw if basis is None else basis.project(raw)
    return normalize_columns(feats, norm_mode)


@dataclass(frozen=True)
class TestPatchSet:
    """The ``q`` patches of one test image as columns of ``Y``."""

    __test__ = False  # keeps pytest from collecting it

    Y: np.ndarray
    grid: PatchGrid

    @property
    def q(self):
        return self.Y.shape[1]

    def patch(self, i):
        return self.Y[:, i]


def extract_patches(image, grid, norm_mode="unit-l2", basis=None):
    """Split one ``h x w`` image into its grid patches.

    Column ``i`` of the returned ``Y`` is the row-major flattening of the
    patch at row-major grid location ``i``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise PatchError(f"expected a 2-D image, got shape {img.shape}")
    raw = _raw_patches(img, grid)[0]
    return TestPatchSet(Y=_featurize(raw, norm_mode, basis), grid=grid)


def extract_patch_batch(images, grid, norm_mode="unit-l2", basis=None):
    """Patch matrices for a stack of images: array ``(n, d_p, q)``."""
    raw = _raw_patches(images, grid)
    n, dp, q = raw.shape
    flat = raw.transpose(1, 0, 2).reshape(dp, n * q)
    feats = _featurize(flat, norm_mode, basis)
    return np.ascontiguousarray(feats.reshape(feats.shape[0], n, q).transpose(1, 0, 2))


@dataclass
class LocalDictionary:
    """Per-location training dictionaries ``M_j`` and the augmented ``M``.

    ``local[j]`` is ``d_p x N`` (column ``s`` = location-``j`` patch of
    training sample ``s``). The augmented ``M`` is location-major: column
    ``t = j * N + s`` holds sample ``s`` at location ``j``.
    """

    local: np.ndarray  # (q, d_p, N)
    labels: np.ndarray
    n_classes: int
    grid: PatchGrid
    norm_mode: str = "unit-l2"
    basis: PatchBasis | None = None
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def q(self):
        return self.local.shape[0]

    @property
    def patch_dim(self):
        return self.local.shape[1]

    @property
    def n_samples(self):
        return self.local.shape[2]

    @property
    def M(self):
        return self.augmented_dictionary().data

    @property
    def provenance(self):
        """``(sample, location, label)`` arrays for the columns of ``M``."""
        n, q = self.n_samples, self.q
        sample = np.tile(np.arange(n), q)
        location = np.repeat(np.arange(q), n)
        return sample, location, self.labels[sample]

    def column_index(self, sample, location):
        return location * self.n_samples + sample

    def location_columns(self, j):
        """Column indices of ``M`` that belong to location ``j``."""
        n = self.n_samples
        return np.arange(j * n, (j + 1) * n)

    def _cached(self, key, build):
        out = self._cache.get(key)
        if out is None:
            with self._lock:
                out = self._cache.get(key)
                if out is None:
                    out = build()
                    self._cache[key] = out
        return out

    def location_dictionary(self, j):
        """:class:`FeatureDictionary` wrapping ``M_j``."""
        if not 0 <= j < self.q:
            raise IndexError(f"location {j} out of range for q={self.q}")
        return self._cached(("local", j), lambda: build_dictionary(
            self.local[j], self.labels, norm_mode="none", n_classes=self.n_classes))

    def augmented_dictionary(self):
        """:class:`FeatureDictionary` wrapping the augmented ``M``."""
        def build():
            m = self.local.transpose(1, 0, 2).reshape(self.patch_dim, -1)
            return build_dictionary(m, self.provenance[2], norm_mode="none",
                                    n_classes=self.n_classes)
        return self._cached("augmented", build)

    def test_patches(self, image):
        """Featurize a test image exactly as the training patches were."""
        return extract_patches(image, self.grid, self.norm_mode, self.basis)


def build_local_dictionaries(images, labels, grid, norm_mode="unit-l2", pca_rank=None,
                             n_classes=None):
    """Assemble ``M_j`` for every grid location from a stack of training images.

    Parameters
    ----------
    images : array_like, shape (N, h, w)
    labels : array_like of int, shape (N,)
    grid : PatchGrid
    pca_rank : int, optional
        If given, patches are projected onto a PCA basis of this rank fitted
        on the training patches, then normalized.
    """
    if isinstance(images, (list, tuple)):
        shapes = {np.shape(im) for im in images}
        if len(shapes) > 1:
            raise PatchError(f"training images have heterogeneous sizes {sorted(shapes)}")
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim != 3 or imgs.shape[0] == 0:
        raise PatchError("need a non-empty (N, h, w) stack of training images")
    labels, c = _check_labels(labels, imgs.shape[0], n_classes)
    basis = None if pca_rank is None else fit_patch_basis(imgs, grid, pca_rank)
    feats = extract_patch_batch(imgs, grid, norm_mode, basis)  # (N, d_p, q)
    local = np.ascontiguousarray(feats.transpose(2, 1, 0))
    local.setflags(write=False)
    return LocalDictionary(local=local, labels=labels, n_classes=c, grid=grid,
                           norm_mode=norm_mode, basis=basis)
