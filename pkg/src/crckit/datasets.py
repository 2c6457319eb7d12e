"""Dataset ingestion and generation.

File formats
------------
FMX1
    ``b"FMX1"``, then ``d`` and ``N`` as little-endian uint32, then the
    ``d x N`` matrix as little-endian float64 in column-major order.
labels CSV
    Header ``index,label`` followed by one ``<column>,<class index>`` row
    per sample.
PGM
    Binary ``P5`` only; intensities are scaled to ``[0, 1]`` by ``maxval``.
manifest
    JSON object with ``name``, ``classes``, ``source`` (``"images"`` or
    ``"features"``), ``labels_path``, ``features_path`` or ``images``,
    optional ``image_shape`` and ``patch`` (``{h, w, stride}``), and
    ``sha256`` mapping every referenced relative path to its digest.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from sklearn.model_selection import StratifiedKFold

from .patching import PatchGrid

FMX_MAGIC = b"FMX1"
_FMX_HEADER = struct.Struct("<4sII")


class FormatError(ValueError):
    """Malformed or inconsistent data file."""


class ChecksumError(FormatError):
    """A manifest-referenced file does not match its recorded digest."""


# --------------------------------------------------------------------------
# FMX1


def write_fmx(path, matrix):
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise FormatError(f"FMX1 stores 2-D matrices, got shape {m.shape}")
    d, n = m.shape
    if d == 0 or n == 0:
        raise FormatError("FMX1 matrices must have d >= 1 and N >= 1")
    if d > 0xFFFFFFFF or n > 0xFFFFFFFF:
        raise FormatError("matrix dimensions overflow uint32")
    payload = np.asfortranarray(m).astype("<f8", copy=False).tobytes(order="F")
    Path(path).write_bytes(_FMX_HEADER.pack(FMX_MAGIC, d, n) + payload)


def read_fmx(path):
    """Return ``(matrix, d, N)`` from an FMX1 file."""
    raw = Path(path).read_bytes()
    if len(raw) < _FMX_HEADER.size:
        raise FormatError("truncated FMX1 header")
    magic, d, n = _FMX_HEADER.unpack_from(raw)
    if magic != FMX_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FMX_MAGIC!r}")
    if d == 0 or n == 0:
        raise FormatError(f"FMX1 declares an empty {d}x{n} matrix")
    need = d * n * 8
    body = raw[_FMX_HEADER.size:]
    if len(body) < need:
        raise FormatError(f"truncated FMX1 payload: need {need} bytes, have {len(body)}")
    if len(body) > need:
        raise FormatError(f"trailing bytes after FMX1 payload ({len(body) - need})")
    m = np.frombuffer(body, dtype="<f8").reshape((d, n), order="F").astype(np.float64)
    return m, d, n


# --------------------------------------------------------------------------
# labels CSV


def write_labels(path, labels):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "label"])
    for i, lab in enumerate(np.asarray(labels, dtype=np.int64)):
        w.writerow([i, int(lab)])
    Path(path).write_text(buf.getvalue())


def read_labels(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["index", "label"]:
        raise FormatError("labels CSV must start with header 'index,label'")
    body = [r for r in rows[1:] if r]
    try:
        pairs = [(int(r[0]), int(r[1])) for r in body]
    except (ValueError, IndexError) as exc:
        raise FormatError(f"malformed labels CSV row: {exc}") from exc
    idx = [p[0] for p in pairs]
    if idx != list(range(len(pairs))):
        raise FormatError("labels CSV indices must run 0..N-1 in order")
    return np.array([p[1] for p in pairs], dtype=np.int64)


# --------------------------------------------------------------------------
# PGM (P5)

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def read_pgm(path):
    """Read a binary PGM into an ``h x w`` float array in ``[0, 1]``."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None:
            raise FormatError("malformed PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError(f"only binary PGM (P5) is supported, got {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("non-numeric PGM header field") from exc
    if w < 1 or h < 1 or not 1 <= maxval <= 65535:
        raise FormatError(f"invalid PGM header values w={w} h={h} maxval={maxval}")
    if pos >= len(raw) or raw[pos:pos + 1] not in b" \t\r\n":
        raise FormatError("PGM header must end with a single whitespace byte")
    pos += 1
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = w * h * dtype.itemsize
    if len(raw) - pos != need:
        raise FormatError(f"PGM size mismatch: expected {need} data bytes, got {len(raw) - pos}")
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return data.astype(np.float64) / maxval


def write_pgm(path, image, maxval=65535):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError("PGM images are 2-D")
    if not 1 <= maxval <= 65535:
        raise FormatError("maxval must be in 1..65535")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    dtype = "u1" if maxval < 256 else ">u2"
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + q.astype(dtype).tobytes())


# --------------------------------------------------------------------------
# manifests


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Dataset:
    """In-memory dataset: ``images`` (n, h, w) or ``features`` (n, d) rows."""

    name: str
    classes: list
    labels: np.ndarray
    images: np.ndarray | None = None
    features: np.ndarray | None = None
    patch: dict | None = None

    def __post_init__(self):
        if (self.images is None) == (self.features is None):
            raise ValueError("a dataset holds exactly one of images or features")
        n = len(self.images if self.images is not None else self.features)
        if self.labels.shape != (n,):
            raise ValueError("need one label per sample")

    @property
    def n_samples(self):
        return self.labels.shape[0]

    @property
    def is_image(self):
        return self.images is not None

    def flat(self):
        """Samples as feature rows (images are flattened row-major)."""
        if self.features is not None:
            return self.features
        return self.images.reshape(self.images.shape[0], -1)

    def grid(self):
        if not self.is_image:
            raise ValueError("feature datasets have no patch grid")
        h, w = self.images.shape[1:]
        if self.patch is None:
            return PatchGrid.default_for(h, w)
        return PatchGrid(h, w, int(self.patch["h"]), int(self.patch["w"]),
                         int(self.patch["stride"]))


def _verify(base, rel, digests):
    if rel not in digests:
        raise ChecksumError(f"manifest has no sha256 entry for {rel}")
    p = base / rel
    if not p.is_file():
        raise FormatError(f"referenced file {rel} does not exist")
    actual = sha256_file(p)
    if actual != digests[rel]:
        raise ChecksumError(f"checksum mismatch for {rel}")
    return p


def load_manifest(path):
    """Load and verify a dataset manifest; any mismatch aborts the whole load."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    base = path.parent
    digests = doc.get("sha256", {})
    for key in ("name", "classes", "labels_path"):
        if key not in doc:
            raise FormatError(f"manifest missing field {key!r}")
    source = doc.get("source", "images" if "images" in doc else "features")
    refs = [doc["labels_path"]]
    if source == "images":
        refs += list(doc.get("images", []))
    elif source == "features":
        refs.append(doc["features_path"])
    else:
        raise FormatError(f"unknown manifest source {source!r}")
    resolved = {rel: _verify(base, rel, digests) for rel in refs}

    labels = read_labels(resolved[doc["labels_path"]])
    classes = list(doc["classes"])
    if labels.size and (labels.min() < 0 or labels.max() >= len(classes)):
        raise FormatError("labels reference classes outside the manifest class list")
    patch = doc.get("patch")
    if source == "images":
        imgs = [read_pgm(resolved[rel]) for rel in doc["images"]]
        if len({im.shape for im in imgs}) > 1:
            raise FormatError("manifest images have heterogeneous sizes")
        if len(imgs) != labels.size:
            raise FormatError(f"{len(imgs)} images but {labels.size} labels")
        return Dataset(doc["name"], classes, labels, images=np.stack(imgs), patch=patch)
    feats, d, n = read_fmx(resolved[doc["features_path"]])
    if n != labels.size:
        raise FormatError(f"{n} feature columns but {labels.size} labels")
    return Dataset(doc["name"], classes, labels, features=feats.T.copy(), patch=patch)


def write_manifest(out_dir, dataset):
    """Write ``dataset`` under ``out_dir`` (PGMs or FMX1 plus labels) with a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"name": dataset.name, "classes": list(dataset.classes), "labels_path": "labels.csv"}
    write_labels(out / "labels.csv", dataset.labels)
    refs = ["labels.csv"]
    if dataset.is_image:
        (out / "images").mkdir(exist_ok=True)
        names = []
        width = max(4, len(str(dataset.n_samples - 1)))
        for i, im in enumerate(dataset.images):
            rel = f"images/{i:0{width}d}.pgm"
            write_pgm(out / rel, im)
            names.append(rel)
        doc.update(source="images", images=names, image_shape=list(dataset.images.shape[1:]))
        refs += names
    else:
        write_fmx(out / "features.fmx", dataset.features.T)
        doc.update(source="features", features_path="features.fmx")
        refs.append("features.fmx")
    if dataset.patch is not None:
        doc["patch"] = dict(dataset.patch)
    doc["sha256"] = {rel: sha256_file(out / rel) for rel in refs}
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# synthetic confounded data


@dataclass
class SyntheticSpec:
    """Fine-grained toy data: shared background textures plus class signatures.

    Every image is one of ``n_backgrounds`` smooth random textures (shared by
    all classes) with its class signature stamped on it at a random position
    on a ``placement_stride`` lattice, plus white noise. Backgrounds have
    mean level 0.5 and ``fg_contrast`` is the mean amount by which the
    signature lifts its region. With ``fg_mode="add"`` the signature is
    added to the background; ``"occlude"`` replaces the background under it.
    ``bg_jitter`` circularly shifts each image's texture by up to that many
    pixels per axis, so images sharing a texture do not share it pixel for
    pixel. The defaults are the confounded benchmark configuration.
    """

    n_classes: int = 5
    samples_per_class: int | list = 40
    image_size: tuple = (32, 32)
    fg_size: tuple = (16, 16)
    fg_contrast: float = 0.2
    n_backgrounds: int = 4
    bg_amplitude: float = 0.15
    bg_smoothness: float = 2.0
    noise_sigma: float = 0.05
    bg_jitter: int = 32
    fg_mode: str = "add"
    placement_stride: int | None = None
    patch: dict | None = None
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.fg_size = tuple(int(v) for v in self.fg_size)
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        counts = self.class_counts()
        if len(counts) != self.n_classes or min(counts) < 1:
            raise ValueError("samples_per_class must give one positive count per class")
        if self.fg_size[0] > self.image_size[0] or self.fg_size[1] > self.image_size[1]:
            raise ValueError(f"foreground {self.fg_size} larger than image {self.image_size}")
        if self.n_backgrounds < 1:
            raise ValueError("need at least one background texture")
        if self.noise_sigma < 0 or self.bg_amplitude < 0 or self.bg_smoothness < 0:
            raise ValueError("noise, amplitude and smoothness must be non-negative")
        if self.fg_mode not in ("occlude", "add"):
            raise ValueError("fg_mode must be 'occlude' or 'add'")
        if self.bg_jitter < 0:
            raise ValueError("bg_jitter must be non-negative")
        if self.placement_stride is not None and self.placement_stride < 1:
            raise ValueError("placement_stride must be >= 1")

    def class_counts(self):
        s = self.samples_per_class
        return [int(s)] * self.n_classes if np.isscalar(s) else [int(v) for v in s]

    def positions(self):
        """Grid-aligned top-left corners available to the foreground."""
        stride = self.placement_stride or max(min(self.fg_size) // 2, 1)
        ys = range(0, self.image_size[0] - self.fg_size[0] + 1, stride)
        xs = range(0, self.image_size[1] - self.fg_size[1] + 1, stride)
        return [(y, x) for y in ys for x in xs]

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["fg_size"] = list(self.fg_size)
        return d

    @classmethod
    def from_dict(cls, doc):
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown synthetic spec field(s): {sorted(extra)}")
        return cls(**doc)


@dataclass
class SyntheticSample:
    images: np.ndarray
    labels: np.ndarray
    background_index: np.ndarray
    positions: np.ndarray
    shifts: np.ndarray
    backgrounds: np.ndarray
    signatures: np.ndarray = field(repr=False)


def _texture(rng, shape, amplitude, smoothness):
    t = rng.standard_normal(shape)
    if smoothness > 0:
        t = gaussian_filter(t, smoothness, mode="wrap")
    sd = t.std()
    return amplitude * (t - t.mean()) / (sd if sd > 0 else 1.0)


def synth_sample(spec):
    """Generate a :class:`SyntheticSample` (images plus ground-truth metadata)."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.image_size
    fh, fw = spec.fg_size
    backgrounds = np.stack([0.5 + _texture(rng, (h, w), spec.bg_amplitude, spec.bg_smoothness)
                            for _ in range(spec.n_backgrounds)])
    signatures = []
    for _ in range(spec.n_classes):
        p = 1.0 + _texture(rng, (fh, fw), 0.5, 1.0)
        p = np.clip(p, 0.0, None)
        p = p / p.mean() if p.mean() > 0 else np.zeros((fh, fw))
        signatures.append(0.5 + spec.fg_contrast * p)
    signatures = np.stack(signatures)
    pos = spec.positions()
    counts = spec.class_counts()
    n = sum(counts)
    labels = np.repeat(np.arange(spec.n_classes), counts)
    bg_idx = rng.integers(0, spec.n_backgrounds, size=n)
    loc_idx = rng.integers(0, len(pos), size=n)
    shifts = rng.integers(0, spec.bg_jitter + 1, size=(n, 2))
    noise = rng.standard_normal((n, h, w)) * spec.noise_sigma
    images = np.stack([np.roll(backgrounds[b], tuple(sh), axis=(0, 1))
                       for b, sh in zip(bg_idx, shifts)]) + noise
    where = np.array([pos[i] for i in loc_idx], dtype=np.int64).reshape(n, 2)
    for s in range(n):
        y0, x0 = where[s]
        if spec.fg_mode == "add":
            images[s, y0:y0 + fh, x0:x0 + fw] += signatures[labels[s]] - 0.5
        else:
            images[s, y0:y0 + fh, x0:x0 + fw] = signatures[labels[s]] + noise[s, y0:y0 + fh, x0:x0 + fw]
    return SyntheticSample(images=images, labels=labels, background_index=bg_idx,
                           positions=where, shifts=shifts, backgrounds=backgrounds, signatures=signatures)


def synth_generate(spec):
    """Return ``(images, labels)`` for a :class:`SyntheticSpec`; seed-deterministic."""
    s = synth_sample(spec)
    return s.images, s.labels


def synth_dataset(spec):
    images, labels = synth_generate(spec)
    return Dataset(spec.name, [f"class{i}" for i in range(spec.n_classes)], labels,
                   images=images, patch=spec.patch)


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: tuple  # ((train_idx, test_idx), ...)

    def __iter__(self):
        return iter(self.folds)

    def __len__(self):
        return len(self.folds)


def kfold_split(labels, k, seed):
    """Stratified ``k``-fold partition; each class needs at least ``k`` samples."""
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be >= 2")
    cls, counts = np.unique(labels, return_counts=True)
    small = cls[counts < k]
    if small.size:
        raise ValueError(f"class(es) {small.tolist()} have fewer than k={k} samples")
    skf = StratifiedKFold(n_splits=k, shuffle=True, random_state=int(seed))
    folds = tuple((np.sort(tr), np.sort(te))
                  for tr, te in skf.split(np.zeros(labels.size), labels))
    return FoldPlan(k=int(k), seed=int(seed), folds=folds)
