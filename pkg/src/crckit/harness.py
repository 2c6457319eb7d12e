"""k-fold benchmark orchestration, nested grid search and report emission."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from .classifiers import METHODS, PATCH_METHODS
from .datasets import Dataset, kfold_split, load_manifest
from .estimators import make_estimator

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "crckit.report/1"
CSV_COLUMNS = ("method", "fold", "accuracy", "mean", "std", "seconds")
TIMING_KEYS = ("fit_seconds", "predict_seconds", "seconds", "wall_clock")


class BenchmarkError(RuntimeError):
    """A fold failed; the message carries the fold and sample provenance."""


@dataclass(frozen=True)
class RunConfig:
    method: str = "crc"
    lam: float = 1e-3
    gamma: float = 1e-3
    tau: float = 0.0
    eta: float = 1e-2
    kernel: str = "linear"
    bandwidth: float = 1.0
    residual: str = "normalized"
    norm_mode: str = "unit-l2"
    folds: int = 5
    seed: int = 0
    patch: dict | None = None
    pca_rank: int | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.folds < 2:
            raise ValueError("fold count must be >= 2")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    def to_dict(self):
        return asdict(self)

    def estimator_params(self):
        params = dict(lam=self.lam, gamma=self.gamma, tau=self.tau, eta=self.eta,
                      kernel=self.kernel, bandwidth=self.bandwidth,
                      residual=self.residual, norm_mode=self.norm_mode,
                      pca_rank=self.pca_rank)
        return params


@dataclass
class FoldResult:
    fold: int
    accuracy: float
    n_train: int
    n_test: int
    fit_seconds: float
    predict_seconds: float
    test_indices: list
    predictions: list
    config: dict | None = None


@dataclass
class BenchmarkReport:
    dataset: str
    config: dict
    classes: list
    folds: list
    confusion: list
    version: str
    schema: str = REPORT_SCHEMA
    extra: dict = field(default_factory=dict)

    @property
    def fold_accuracies(self):
        return [f.accuracy for f in self.folds]

    @property
    def mean(self):
        return float(np.mean(self.fold_accuracies))

    @property
    def std(self):
        acc = self.fold_accuracies
        return float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0

    def to_dict(self):
        return {
            "schema": self.schema,
            "version": self.version,
            "dataset": self.dataset,
            "config": self.config,
            "classes": self.classes,
            "fold_accuracies": self.fold_accuracies,
            "mean": self.mean,
            "std": self.std,
            "confusion": self.confusion,
            "folds": [asdict(f) for f in self.folds],
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(dataset=doc["dataset"], config=doc["config"], classes=doc["classes"],
                   folds=[FoldResult(**f) for f in doc["folds"]],
                   confusion=doc["confusion"], version=doc["version"],
                   schema=doc.get("schema", REPORT_SCHEMA), extra=doc.get("extra", {}))


def _version():
    from . import __version__
    return __version__


def resolve_dataset(source):
    if isinstance(source, Dataset):
        return source
    return load_manifest(source)


def _inputs(dataset, config):
    if config.method in PATCH_METHODS:
        if not dataset.is_image:
            raise BenchmarkError(f"method {config.method!r} needs an image dataset")
        return dataset.images
    return dataset.flat()


def _estimator(dataset, config):
    params = config.estimator_params()
    if config.method in PATCH_METHODS:
        grid = dataset.grid() if config.patch is None else None
        if config.patch is not None:
            params.update(patch_shape=(int(config.patch["h"]), int(config.patch["w"])),
                          stride=int(config.patch["stride"]))
        else:
            params.update(patch_shape=(grid.patch_h, grid.patch_w), stride=grid.stride)
    return make_estimator(config.method, **params)


def evaluate_fold(dataset, config, train, test, fold=0):
    """Fit on ``train`` indices only and score on ``test``."""
    train = np.asarray(train)
    test = np.asarray(test)
    if np.intersect1d(train, test).size:
        raise BenchmarkError(f"fold {fold}: train and test indices overlap")
    X = _inputs(dataset, config)
    y = dataset.labels
    est = _estimator(dataset, config)
    t0 = time.perf_counter()
    try:
        est.fit(X[train], y[train])
        t1 = time.perf_counter()
        pred = est.predict(X[test])
    except Exception as exc:
        raise BenchmarkError(
            f"fold {fold} ({config.method}) failed on test samples "
            f"{test[:10].tolist()}{'...' if test.size > 10 else ''}: {exc}") from exc
    t2 = time.perf_counter()
    return FoldResult(fold=fold, accuracy=float(np.mean(pred == y[test])),
                      n_train=int(train.size), n_test=int(test.size),
                      fit_seconds=t1 - t0, predict_seconds=t2 - t1,
                      test_indices=test.tolist(), predictions=pred.tolist())


def _confusion(labels, folds, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for f in folds:
        np.add.at(cm, (labels[f.test_indices], np.asarray(f.predictions, dtype=np.int64)), 1)
    return cm.tolist()


def _run_folds(dataset, config, plan, progress=None):
    def one(i, tr, te):
        res = evaluate_fold(dataset, config, tr, te, fold=i)
        if progress is not None:
            progress(f"fold {i + 1}/{len(plan)} accuracy {res.accuracy:.4f}")
        return res

    jobs = [(i, tr, te) for i, (tr, te) in enumerate(plan)]
    if config.jobs == 1:
        return [one(*j) for j in jobs]
    return Parallel(n_jobs=config.jobs, prefer="threads")(delayed(one)(*j) for j in jobs)


def run_benchmark(source, config, progress=None):
    """Stratified k-fold evaluation of one method on a dataset or manifest path.

    Each fold builds its dictionaries from the training split only. The
    result is deterministic given the dataset and ``config``.
    """
    dataset = resolve_dataset(source)
    plan = kfold_split(dataset.labels, config.folds, config.seed)
    folds = _run_folds(dataset, config, plan, progress)
    return BenchmarkReport(dataset=dataset.name, config=config.to_dict(),
                           classes=list(dataset.classes), folds=folds,
                           confusion=_confusion(dataset.labels, folds, len(dataset.classes)),
                           version=_version())


@dataclass
class GridSearchResult:
    best: RunConfig
    table: list
    report: BenchmarkReport


def _grid_configs(base, lams, gammas, taus):
    if not (len(lams) and len(gammas) and len(taus)):
        raise ValueError("every hyperparameter grid must be non-empty")
    return [replace(base, lam=float(l), gamma=float(g), tau=float(t))
            for l, g, t in itertools.product(sorted(lams), sorted(gammas), sorted(taus))]


def _pick(rows):
    # highest accuracy; ties -> smaller lam, then gamma, then tau
    return min(rows, key=lambda r: (-r["accuracy"], r["lam"], r["gamma"], r["tau"]))


def inner_accuracy(dataset, config, train, seed):
    """Mean accuracy of ``config`` under an inner k-fold split of ``train``."""
    train = np.asarray(train)
    inner = kfold_split(dataset.labels[train], config.folds, seed)
    accs = [evaluate_fold(dataset, config, train[tr], train[te], fold=i).accuracy
            for i, (tr, te) in enumerate(inner)]
    return float(np.mean(accs))


def grid_search(source, method, lams, gammas=(0.0,), taus=(0.0,), folds=5, seed=0,
                base=None, progress=None):
    """Nested cross-validated grid search.

    Every outer fold selects its configuration by an inner CV on its own
    training split, so model selection never sees the outer test fold. The
    returned table averages each configuration's inner accuracy over the
    outer folds; ``best`` is the table's top row.
    """
    dataset = resolve_dataset(source)
    base = RunConfig(method=method, folds=folds, seed=seed) if base is None else \
        replace(base, method=method, folds=folds, seed=seed)
    configs = _grid_configs(base, lams, gammas, taus)
    plan = kfold_split(dataset.labels, folds, seed)
    per_fold = []
    results = []
    for i, (tr, te) in enumerate(plan):
        if base.jobs > 1:
            accs = Parallel(n_jobs=base.jobs, prefer="threads")(
                delayed(inner_accuracy)(dataset, c, tr, seed) for c in configs)
        else:
            accs = [inner_accuracy(dataset, c, tr, seed) for c in configs]
        rows = [dict(lam=c.lam, gamma=c.gamma, tau=c.tau, accuracy=a)
                for c, a in zip(configs, accs)]
        choice = _pick(rows)
        cfg = replace(base, lam=choice["lam"], gamma=choice["gamma"], tau=choice["tau"])
        res = evaluate_fold(dataset, cfg, tr, te, fold=i)
        res.config = {"lam": cfg.lam, "gamma": cfg.gamma, "tau": cfg.tau}
        results.append(res)
        per_fold.append(rows)
        if progress is not None:
            progress(f"fold {i + 1}/{len(plan)} selected lam={cfg.lam:g} gamma={cfg.gamma:g} "
                     f"tau={cfg.tau:g} accuracy {res.accuracy:.4f}")
    table = []
    for k, c in enumerate(configs):
        table.append(dict(lam=c.lam, gamma=c.gamma, tau=c.tau,
                          accuracy=float(np.mean([rows[k]["accuracy"] for rows in per_fold]))))
    best_row = _pick(table)
    best = replace(base, lam=best_row["lam"], gamma=best_row["gamma"], tau=best_row["tau"])
    report = BenchmarkReport(dataset=dataset.name, config=base.to_dict(),
                             classes=list(dataset.classes), folds=results,
                             confusion=_confusion(dataset.labels, results, len(dataset.classes)),
                             version=_version(), extra={"grid": table})
    return GridSearchResult(best=best, table=table, report=report)


def emit_report(report, fmt="json"):
    """Serialize a report as JSON or CSV text."""
    if not report.folds:
        raise ValueError("report has no folds")
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        mean, std = report.mean, report.std
        for f in report.folds:
            w.writerow([report.config["method"], f.fold, repr(f.accuracy), repr(mean),
                        repr(std), repr(f.fit_seconds + f.predict_seconds)])
        return buf.getvalue()
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report(text):
    return BenchmarkReport.from_dict(json.loads(text))


def strip_timing(doc):
    """Copy of a report dict without wall-clock fields (for determinism checks)."""
    if isinstance(doc, dict):
        return {k: strip_timing(v) for k, v in doc.items() if k not in TIMING_KEYS}
    if isinstance(doc, list):
        return [strip_timing(v) for v in doc]
    return doc
