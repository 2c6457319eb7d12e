import json
from dataclasses import replace

import numpy as np
import pytest

from crckit import harness
from crckit.datasets import Dataset, SyntheticSpec, synth_dataset, write_manifest
from crckit.harness import (
    CSV_COLUMNS,
    BenchmarkReport,
    FoldResult,
    RunConfig,
    emit_report,
    grid_search,
    parse_report,
    run_benchmark,
    strip_timing,
)


def _duplicated(rng, c=3, per_class=5, d=12):
    base = rng.standard_normal((c * per_class, d))
    X = np.vstack([base, base])
    y = np.tile(np.repeat(np.arange(c), per_class), 2)
    return Dataset("dup", [f"k{i}" for i in range(c)], y, features=X)


def _small_images(seed=3, **kw):
    spec = SyntheticSpec(n_classes=3, samples_per_class=10, image_size=(12, 12),
                         fg_size=(6, 6), seed=seed, **kw)
    return synth_dataset(spec)


def _report(accs):
    folds = [FoldResult(fold=i, accuracy=a, n_train=4, n_test=2, fit_seconds=0.1,
                        predict_seconds=0.2, test_indices=[2 * i, 2 * i + 1],
                        predictions=[0, 0]) for i, a in enumerate(accs)]
    return BenchmarkReport(dataset="x", config=RunConfig().to_dict(), classes=["a"],
                           folds=folds, confusion=[[4]], version="0")


# ---------------------------------------------------------------- run_benchmark


def test_exact_duplicates_are_recognised(rng):
    ds = _duplicated(rng)
    # two copies per sample and 2 folds: stratification cannot separate every pair,
    # so use the plan that keeps one copy in each fold
    n = ds.n_samples // 2
    cfg = RunConfig(method="crc", lam=1e-4)
    for tr, te in ((np.arange(n), np.arange(n, 2 * n)), (np.arange(n, 2 * n), np.arange(n))):
        assert harness.evaluate_fold(ds, cfg, tr, te).accuracy == 1.0


def test_duplicates_full_benchmark(rng):
    base = rng.standard_normal((15, 12))
    X = np.repeat(base, 5, axis=0)  # five copies: every fold keeps one in train
    y = np.repeat(np.arange(3), 25)
    ds = Dataset("dup5", ["a", "b", "c"], y, features=X)
    rep = run_benchmark(ds, RunConfig(method="crc", lam=1e-4, folds=5))
    assert rep.fold_accuracies == [1.0] * 5


def test_shuffled_labels_are_at_chance():
    correct = total = 0
    for seed in range(20):
        gen = np.random.default_rng(seed)
        X = gen.standard_normal((60, 20))
        y = gen.permutation(np.repeat(np.arange(3), 20))
        rep = run_benchmark(Dataset("noise", ["a", "b", "c"], y, features=X),
                            RunConfig(method="crc", lam=1e-2, seed=seed))
        correct += sum(int(np.sum(np.array(f.predictions) == y[f.test_indices]))
                       for f in rep.folds)
        total += 60
    p = 1 / 3
    half_width = 3.3 * np.sqrt(p * (1 - p) / total)
    assert abs(correct / total - p) <= half_width


def test_report_shape_and_determinism():
    ds = synth_dataset(SyntheticSpec(seed=3))
    cfg = RunConfig(method="crc", lam=1e-4)
    a, b = run_benchmark(ds, cfg), run_benchmark(ds, cfg)
    assert len(a.fold_accuracies) == 5
    assert strip_timing(a.to_dict()) == strip_timing(b.to_dict())
    cm = np.array(a.confusion)
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(ds.labels))
    assert a.mean == pytest.approx(np.trace(cm) / cm.sum())


@pytest.mark.parametrize("method", ["crc", "procrc", "pcrc", "pprocrc"])
def test_jobs_invariance(method):
    ds = _small_images()
    cfg = RunConfig(method=method, lam=1e-2, gamma=0.1)
    one = strip_timing(run_benchmark(ds, cfg).to_dict())
    many = strip_timing(run_benchmark(ds, replace(cfg, jobs=4)).to_dict())
    one["config"].pop("jobs"), many["config"].pop("jobs")
    assert one == many


def test_train_test_hygiene(monkeypatch):
    ds = _small_images()
    seen = []
    real = harness.make_estimator

    def recording(method, **params):
        est = real(method, **params)
        fit = est.fit

        def fit_and_record(X, y):
            seen.append(np.asarray(X).reshape(len(X), -1).copy())
            return fit(X, y)
        est.fit = fit_and_record
        return est

    monkeypatch.setattr(harness, "make_estimator", recording)
    rep = run_benchmark(ds, RunConfig(method="pprocrc", lam=0.1, gamma=0.1))
    flat = ds.flat()
    for rows, fold in zip(seen, rep.folds):
        fit_rows = {r.tobytes() for r in rows}
        assert all(flat[i].tobytes() not in fit_rows for i in fold.test_indices)
        assert len(rows) == fold.n_train


def test_manifest_source_and_errors(tmp_path):
    ds = _small_images()
    path = write_manifest(tmp_path, ds)
    rep = run_benchmark(path, RunConfig(method="crc"))
    assert rep.dataset == ds.name
    feats = Dataset("f", ["a", "b"], np.repeat([0, 1], 5), features=np.eye(10))
    with pytest.raises(harness.BenchmarkError):
        run_benchmark(feats, RunConfig(method="pcrc"))
    with pytest.raises(ValueError):
        RunConfig(method="svm")
    with pytest.raises(ValueError):
        RunConfig(folds=1)


def test_fold_failures_carry_provenance():
    ds = Dataset("z", ["a", "b"], np.repeat([0, 1], 5), features=np.zeros((10, 3)))
    with pytest.raises(harness.BenchmarkError, match="fold 0"):
        run_benchmark(ds, RunConfig(method="crc"))


# ---------------------------------------------------------------- grid search


def test_grid_singleton_equals_benchmark():
    ds = _small_images()
    res = grid_search(ds, "crc", [1e-2], folds=3)
    direct = run_benchmark(ds, RunConfig(method="crc", lam=1e-2, gamma=0.0, folds=3))
    assert res.report.fold_accuracies == direct.fold_accuracies
    assert len(res.table) == 1 and res.best.lam == 1e-2


def test_grid_finds_planted_optimum(rng):
    # huge ridge drowns every class in the tied all-zero limit, which breaks to class 0
    base = rng.standard_normal((15, 12))
    X = np.repeat(base, 5, axis=0)
    y = np.repeat(np.arange(3), 25)
    ds = Dataset("dup5", ["a", "b", "c"], y, features=X)
    res = grid_search(ds, "crc", [1e-4, 1e6], folds=5)
    assert res.best.lam == 1e-4
    assert res.report.fold_accuracies == [1.0] * 5


def test_grid_table_rows_reproducible():
    ds = _small_images()
    res = grid_search(ds, "procrc", [1e-3, 1e-1], [0.0, 1.0], folds=3, seed=2)
    assert len(res.table) == 4
    assert [(r["lam"], r["gamma"]) for r in res.table] == [(1e-3, 0.0), (1e-3, 1.0),
                                                            (1e-1, 0.0), (1e-1, 1.0)]
    plan = harness.kfold_split(ds.labels, 3, 2)
    row = res.table[3]
    cfg = RunConfig(method="procrc", lam=row["lam"], gamma=row["gamma"], folds=3, seed=2)
    inner = [harness.inner_accuracy(ds, cfg, tr, 2) for tr, _ in plan]
    assert row["accuracy"] == pytest.approx(np.mean(inner), abs=0)


def test_grid_tie_breaks_to_smaller_values():
    rows = [dict(lam=1.0, gamma=0.0, tau=0.0, accuracy=0.5),
            dict(lam=0.1, gamma=1.0, tau=0.0, accuracy=0.5),
            dict(lam=0.1, gamma=0.5, tau=2.0, accuracy=0.5)]
    assert harness._pick(rows) == rows[2]


def test_grid_rejects_empty():
    with pytest.raises(ValueError):
        grid_search(_small_images(), "crc", [])


# ---------------------------------------------------------------- reports


def test_emit_perfect_folds():
    rep = _report([1.0, 1.0])
    doc = json.loads(emit_report(rep))
    assert doc["mean"] == 1.0 and doc["std"] == 0.0
    lines = emit_report(rep, "csv").splitlines()
    assert lines[0].split(",") == list(CSV_COLUMNS)
    assert lines[1].split(",")[:5] == ["crc", "0", "1.0", "1.0", "0.0"]


def test_std_is_sample_deviation():
    rep = _report([0.5, 0.7, 0.9])
    assert rep.std == pytest.approx(0.2)
    assert rep.mean == pytest.approx(0.7)


def test_json_round_trip_exact(rng):
    rep = _report(list(rng.random(5)))
    text = emit_report(rep)
    back = parse_report(text)
    assert back.fold_accuracies == rep.fold_accuracies
    assert back.mean == rep.mean and back.std == rep.std
    assert emit_report(back) == text


def test_emit_rejects_empty_and_unknown():
    with pytest.raises(ValueError):
        emit_report(_report([]))
    with pytest.raises(ValueError):
        emit_report(_report([1.0]), "xml")


def test_strip_timing_removes_wall_clock():
    doc = strip_timing(_report([1.0]).to_dict())
    assert "fit_seconds" not in doc["folds"][0]
    assert doc["folds"][0]["accuracy"] == 1.0


def test_grid_search_jobs_invariance():
    ds = _small_images()
    a = grid_search(ds, "crc", [1e-3, 1e-1], folds=3)
    b = grid_search(ds, "crc", [1e-3, 1e-1], folds=3, base=RunConfig(jobs=3))
    assert a.table == b.table
    assert a.report.fold_accuracies == b.report.fold_accuracies
