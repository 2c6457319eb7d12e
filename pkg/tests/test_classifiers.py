import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crckit.classifiers import (
    ClassificationError,
    ResidualVector,
    argmin_tiebreak,
    class_residuals,
    classify_global,
    classify_patch,
    classify_pprocrc,
    collaborative_residuals,
    majority_vote,
)
from crckit.dictionary import build_dictionary
from crckit.estimators import PatchCRCClassifier
from crckit.patching import PatchGrid, build_local_dictionaries
from crckit.solvers import CoefficientSolution, SolverConfig, crc_solve

from conftest import random_dictionary


def _solution(alpha):
    return CoefficientSolution(alpha=np.asarray(alpha, dtype=float), achieved_cost=0.0,
                               grad_norm=0.0)


# ---------------------------------------------------------------- residuals


def test_residual_zero_on_exact_reconstruction():
    D = build_dictionary(np.eye(3), [0, 1, 1])
    rv = class_residuals(D, [1.0, 0.0, 0.0], _solution([1.0, 0.0, 0.0]))
    assert rv.r[0] == 0.0


def test_residual_infinite_for_zero_code():
    D = build_dictionary(np.eye(3), [0, 1, 1])
    rv = class_residuals(D, [1.0, 0.0, 0.0], _solution([1.0, 0.0, 0.0]))
    assert rv.r[1] == np.inf
    assert rv.argmin_class == 0


def test_residual_matches_direct_formula(rng):
    D = random_dictionary(rng, n_per_class=(2, 4, 3))
    y = rng.standard_normal(D.n_features)
    a = crc_solve(D, y, 0.1).alpha
    rv = class_residuals(D, y, _solution(a))
    for i in range(3):
        mask = D.labels == i
        ai = a[mask]
        direct = np.sum((y - D.data[:, mask] @ ai) ** 2) / np.sum(ai ** 2)
        assert rv.r[i] == pytest.approx(direct, rel=1e-12)
    srt = np.sort(rv.r)
    assert rv.margin == pytest.approx(srt[1] - srt[0])


def test_residual_dimension_mismatch(rng):
    D = random_dictionary(rng)
    with pytest.raises(ValueError):
        class_residuals(D, np.ones(D.n_features + 1), _solution(np.ones(D.n_samples)))
    with pytest.raises(ValueError):
        class_residuals(D, np.ones(D.n_features), _solution(np.ones(2)))


def test_collaborative_residual_direct(rng):
    D = random_dictionary(rng)
    a = rng.standard_normal(D.n_samples)
    r = collaborative_residuals(D.data, D.class_offsets, a[:, None])[:, 0]
    full = D.data @ a
    for i in range(3):
        mask = D.labels == i
        assert r[i] == pytest.approx(np.sum((full - D.data[:, mask] @ a[mask]) ** 2), rel=1e-12)


def test_argmin_tiebreak():
    assert argmin_tiebreak([0.5, 0.5, 1.0]) == 0
    assert argmin_tiebreak([1.0, 0.5 * (1 + 1e-13), 0.5]) == 1
    assert argmin_tiebreak([np.inf, 2.0]) == 1
    with pytest.raises(ClassificationError):
        argmin_tiebreak([np.inf, np.inf])


# ---------------------------------------------------------------- global rule


def test_classify_global_identity_dictionary():
    D = build_dictionary(np.eye(2), [0, 1])
    k, rv = classify_global(D, [1.0, 0.0], "crc", SolverConfig(lam=0.1))
    assert k == 0
    assert rv.r[0] < rv.r[1]


def test_classify_global_duplicate_classes_tie_to_zero(rng):
    X = rng.standard_normal((4, 3))
    D = build_dictionary(np.hstack([X, X]), [0, 0, 0, 1, 1, 1])
    k, rv = classify_global(D, rng.standard_normal(4), "crc", SolverConfig(lam=0.1))
    assert k == 0
    assert rv.r[0] == pytest.approx(rv.r[1], rel=1e-10)


def test_classify_global_single_class(rng):
    D = build_dictionary(rng.standard_normal((5, 4)), np.zeros(4, dtype=int))
    for method in ("crc", "procrc", "eprocrc", "rcrc", "kcrc", "ecrc"):
        k, _ = classify_global(D, rng.standard_normal(5), method)
        assert k == 0


def test_classify_global_all_infinite_raises():
    D = build_dictionary(np.eye(2), [0, 1])
    with pytest.raises(ClassificationError):
        classify_global(D, [0.0, 0.0], "crc", SolverConfig(lam=0.1))


def test_classify_global_rejects_patch_method(rng):
    D = random_dictionary(rng)
    with pytest.raises(ValueError):
        classify_global(D, np.ones(D.n_features), "pcrc")
    with pytest.raises(ValueError):
        classify_global(D, np.ones(D.n_features), "crc", residual="other")


@pytest.mark.parametrize("method", ["crc", "ecrc", "procrc", "eprocrc", "rcrc", "kcrc"])
def test_label_permutation_equivariance(rng, method):
    D = random_dictionary(rng, d=6, n_per_class=(3, 4, 5))
    y = D.data[:, 4] + 0.1 * rng.standard_normal(6)
    perm = np.array([2, 0, 1])
    Dp = build_dictionary(D.data, perm[D.labels])
    cfg = SolverConfig(lam=0.05, gamma=0.1, tau=0.5)
    k, rv = classify_global(D, y, method, cfg)
    kp, rvp = classify_global(Dp, y, method, cfg)
    assert kp == perm[k]
    np.testing.assert_allclose(rvp.r[perm], rv.r, rtol=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=1, max_size=8),
       st.floats(1e-6, 1e6))
def test_argmin_scale_invariance(r, scale):
    r = np.array(r)
    assert ResidualVector.from_residuals(r * scale).argmin_class == \
        ResidualVector.from_residuals(r).argmin_class


# ---------------------------------------------------------------- patches


def _local(rng, image=(5, 5), patch=(3, 3), stride=1, n=9, c=3):
    grid = PatchGrid(*image, *patch, stride)
    imgs = rng.random((n, *image)) + 0.1
    return build_local_dictionaries(imgs, np.arange(n) % c, grid), imgs


def test_classify_patch_single_patch_is_global_crc(rng):
    local, imgs = _local(rng, image=(4, 4), patch=(4, 4))
    D = build_dictionary(imgs.reshape(len(imgs), -1).T, local.labels)
    for _ in range(5):
        img = rng.random((4, 4))
        k, rv = classify_patch(local, local.test_patches(img), 0, "pcrc", SolverConfig(lam=0.1))
        kg, rvg = classify_global(D, img.ravel() / np.linalg.norm(img), "crc",
                                  SolverConfig(lam=0.1))
        assert k == kg
        np.testing.assert_allclose(rv.r, rvg.r, rtol=1e-10)


@pytest.mark.parametrize("method", ["pcrc", "gpcrc"])
def test_classify_patch_exact_match(rng, method):
    local, imgs = _local(rng)
    test = local.test_patches(imgs[4])  # a class-1 training image
    cfg = SolverConfig(lam=1e-8, gamma=1e-8)
    for j in range(local.q):
        assert classify_patch(local, test, j, method, cfg)[0] == 1


@pytest.mark.parametrize("method", ["pcrc", "gpcrc"])
def test_classify_patch_brute_force(rng, method):
    from crckit import solvers
    local, _ = _local(rng)
    test = local.test_patches(rng.random((5, 5)))
    cfg = SolverConfig(lam=0.1, gamma=0.2)
    for j in range(local.q):
        k, rv = classify_patch(local, test, j, method, cfg)
        if method == "pcrc":
            X = local.location_dictionary(j)
            a = solvers.pcrc_patch_solve(local, test, j, 0.1).alpha
        else:
            X = local.augmented_dictionary()
            a = solvers.gpcrc_solve(local, test, j, 0.1, 0.2).alpha
        y = test.Y[:, j]
        brute = []
        for i in range(3):
            cols = [t for t in range(X.n_samples) if X.labels[t] == i]
            part = sum(X.data[:, t] * a[t] for t in cols)
            brute.append(np.sum((y - part) ** 2) / sum(a[t] ** 2 for t in cols))
        np.testing.assert_allclose(rv.r, brute, rtol=1e-10)
        assert k == int(np.argmin(brute))


def test_classify_patch_rejects_other_methods(rng):
    local, imgs = _local(rng)
    with pytest.raises(ValueError):
        classify_patch(local, local.test_patches(imgs[0]), 0, "crc")


# ---------------------------------------------------------------- voting


def test_majority_vote_plurality():
    t = majority_vote([1, 1, 2])
    assert t.winner == 1
    assert t.q == 3


def test_majority_vote_residual_tiebreak():
    res = np.array([[np.inf, 0.1, 0.2], [np.inf, 0.2, 0.4]])  # sums: class 1 0.3, class 2 0.6
    assert majority_vote([1, 2], res).winner == 1
    assert majority_vote([1, 2], res[:, [0, 2, 1]]).winner == 2


def test_majority_vote_index_tiebreak():
    assert majority_vote([2, 1], n_classes=3).winner == 1


def test_majority_vote_empty():
    with pytest.raises(ValueError):
        majority_vote([])


def test_majority_vote_recount(rng):
    for _ in range(100):
        q, c = int(rng.integers(1, 12)), int(rng.integers(1, 5))
        labels = rng.integers(0, c, size=q)
        res = rng.integers(0, 3, size=(q, c)).astype(float)  # coarse values force ties
        tally = majority_vote(labels, res)
        counts = {k: 0 for k in range(c)}
        for l in labels:
            counts[int(l)] += 1
        sums = {k: sum(res[i][k] for i in range(q)) for k in range(c)}
        best = sorted(range(c), key=lambda k: (-counts[k], sums[k], k))[0]
        assert tally.winner == best
        assert tally.counts.sum() == q


# ---------------------------------------------------------------- PProCRC


def test_pprocrc_single_patch(rng):
    from crckit.solvers import pprocrc_solve
    local, _ = _local(rng, image=(4, 4), patch=(4, 4))
    test = local.test_patches(rng.random((4, 4)))
    winner, tally = classify_pprocrc(local, test, 0.1, 0.1)
    aug = local.augmented_dictionary()
    sol = pprocrc_solve(aug.data, test.Y, test.Y[:, 0], 0.1, 0.1)
    assert tally.q == 1
    assert winner == class_residuals(aug, test.Y[:, 0], sol).argmin_class


def test_pprocrc_exact_match_is_unanimous(rng):
    grid = PatchGrid(4, 4, 2, 2, 2)
    imgs = rng.random((6, 4, 4)) + 0.1
    # every class-2 patch equals the same template, which is also the test image's patch
    template = rng.random((2, 2)) + 0.1
    for s in (2, 5):
        imgs[s] = np.tile(template, (2, 2))
    local = build_local_dictionaries(imgs, np.arange(6) % 3, grid)
    winner, tally = classify_pprocrc(local, local.test_patches(np.tile(template, (2, 2))),
                                     1e-6, 1e-6)
    assert winner == 2
    assert tally.counts[2] == local.q


def test_pprocrc_beats_pcrc_on_confounded_data():
    from crckit.datasets import SyntheticSpec, synth_generate
    X, y = synth_generate(SyntheticSpec(seed=7))
    gen = np.random.default_rng(7)
    wins = []
    for _ in range(20):
        perm = gen.permutation(len(y))
        tr, te = perm[:150], perm[150:]
        acc = {}
        for method, params in (("pcrc", dict(lam=1e-2)), ("pprocrc", dict(lam=0.1, gamma=0.1))):
            est = PatchCRCClassifier(method=method, **params).fit(X[tr], y[tr])
            acc[method] = np.mean(est.predict(X[te]) == y[te])
        wins.append(acc["pprocrc"] - acc["pcrc"])
    assert np.mean(wins) >= 0


@pytest.mark.parametrize("method", ["pcrc", "gpcrc", "pprocrc"])
def test_patch_predictions_independent_of_jobs(rng, method):
    imgs = rng.random((12, 8, 8))
    labels = np.arange(12) % 3
    tests = rng.random((5, 8, 8))
    out = [PatchCRCClassifier(method=method, n_jobs=j).fit(imgs, labels).vote_tallies(tests)
           for j in (1, 3)]
    for a, b in zip(*out):
        assert a.winner == b.winner
        np.testing.assert_array_equal(a.counts, b.counts)
        np.testing.assert_array_equal(a.residual_sums, b.residual_sums)
