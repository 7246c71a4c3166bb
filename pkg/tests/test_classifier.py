import warnings

import numpy as np
import pytest
from sklearn.svm import SVC

from myoscan.classifier import RbfSVC, grid_search, smo, rbf_kernel
from myoscan.errors import ConvergenceError, ParameterError
from myoscan.evaluation import (
    RocResult,
    auc_score,
    cross_validate,
    operating_points,
    roc_curve_auc,
    roc_svg,
)


def blobs(rng, n=40, gap=4.0, d=2):
    X = np.vstack([rng.normal(0, 1, (n // 2, d)), rng.normal(gap, 1, (n - n // 2, d))])
    y = np.r_[np.zeros(n // 2, int), np.ones(n - n // 2, int)]
    return X, y


def pairwise_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return total / (len(pos) * len(neg))


@pytest.fixture
def noisy():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(60, 3))
    y = (X[:, 0] + 0.8 * rng.normal(size=60) > 0).astype(int)
    return X, y


class TestSMO:
    def test_separable_blobs(self):
        X, y = blobs(np.random.default_rng(0))
        model = RbfSVC(C=10.0, gamma=0.5).fit(X, y)
        assert (model.predict(X) == y).mean() == 1.0

    def test_kkt_and_equality_constraint(self, noisy):
        X, y = noisy
        for C, g in [(0.5, 0.1), (4.0, 1.0), (64.0, 0.25)]:
            m = RbfSVC(C=C, gamma=g).fit(X, y)
            assert m.kkt_residuals(X).max() <= 1e-3
            assert abs(np.sum(m.alpha_ * m.y_signed_)) <= 1e-8 * C * len(X)
            assert m.alpha_.min() >= 0 and m.alpha_.max() <= C

    def test_matches_libsvm(self, noisy):
        X, y = noisy
        ours = RbfSVC(C=2.0, gamma=0.3, tol=1e-6).fit(X, y)
        Xs = (X - X.mean(0)) / X.std(0)
        ref = SVC(C=2.0, gamma=0.3, tol=1e-6).fit(Xs, y)
        np.testing.assert_allclose(ours.decision_function(X), ref.decision_function(Xs), atol=1e-4)

    def test_label_flip_negates(self, noisy):
        X, y = noisy
        a = RbfSVC(C=3.0, gamma=0.5).fit(X, y).decision_function(X)
        b = RbfSVC(C=3.0, gamma=0.5).fit(X, 1 - y).decision_function(X)
        np.testing.assert_allclose(a, -b, atol=1e-6)

    def test_duplicates_hard_margin(self):
        X, y = blobs(np.random.default_rng(1), n=30)
        a = RbfSVC(C=1e6, gamma=0.5, tol=1e-6).fit(X, y)
        b = RbfSVC(C=1e6, gamma=0.5, tol=1e-6).fit(np.vstack([X, X]), np.r_[y, y])
        grid = np.random.default_rng(2).uniform(-2, 6, (50, 2))
        np.testing.assert_allclose(a.decision_function(grid), b.decision_function(grid), atol=1e-3)

    def test_support_vector_margin(self):
        X, y = blobs(np.random.default_rng(4), n=30)
        m = RbfSVC(C=1e6, gamma=0.5).fit(X, y)
        assert np.all(np.abs(m.decision_function(X[m.support_])) >= 1 - 1e-3)

    def test_tiny_gamma_constant(self, noisy):
        X, y = noisy
        d = RbfSVC(C=1.0, gamma=1e-12).fit(X, y).decision_function(np.random.default_rng(0).normal(size=(10, 3)))
        assert np.ptp(d) < 1e-6

    def test_permutation_symmetry(self, noisy):
        X, y = noisy
        p = np.random.default_rng(5).permutation(len(X))
        a = RbfSVC(C=2.0, gamma=0.5, tol=1e-6).fit(X, y).decision_function(X)
        b = RbfSVC(C=2.0, gamma=0.5, tol=1e-6).fit(X[p], y[p]).decision_function(X)
        np.testing.assert_allclose(a, b, atol=1e-4)

    def test_single_class(self):
        with pytest.raises(ParameterError):
            RbfSVC().fit(np.ones((4, 2)), np.ones(4))

    def test_dimension_mismatch(self, noisy):
        X, y = noisy
        with pytest.raises(ParameterError):
            RbfSVC().fit(X, y).decision_function(np.ones((2, 5)))

    def test_iteration_cap(self, noisy):
        X, y = noisy
        with pytest.raises(ConvergenceError):
            RbfSVC(C=100.0, gamma=2.0, max_iter=3).fit(X, y)

    def test_training_only_standardisation(self, noisy):
        X, y = noisy
        m = RbfSVC().fit(X[:40], y[:40])
        np.testing.assert_allclose(m.mean_, X[:40].mean(0))
        np.testing.assert_allclose(m.scale_, X[:40].std(0))

    def test_raw_solver_on_kernel(self):
        K = rbf_kernel(np.array([[0.0], [1.0]]), np.array([[0.0], [1.0]]), 1.0)
        alpha, rho, _ = smo(K, np.array([-1.0, 1.0]), C=10.0)
        assert alpha[0] == pytest.approx(alpha[1])
        assert rho == pytest.approx(0.0, abs=1e-9)


class TestGridSearch:
    def test_single_cell(self, noisy):
        X, y = noisy
        C, g, _ = grid_search(X, y, C_grid=[2.0], gamma_grid=[0.125])
        assert (C, g) == (2.0, 0.125)

    def test_separable_reaches_one(self):
        X, y = blobs(np.random.default_rng(6), n=30, gap=6.0)
        C, g, table = grid_search(X, y, C_grid=[0.5, 1, 8], gamma_grid=[0.03125, 0.5], inner_folds=3, seed=0)
        assert table.max() == 1.0
        # every cell ties at 1.0, so the smallest C and gamma win
        if (table == 1.0).all():
            assert (C, g) == (0.5, 0.03125)

    def test_tie_break_order(self, monkeypatch):
        import myoscan.classifier as clf
        monkeypatch.setattr("myoscan.evaluation.auc_score", lambda s, y: 0.7)
        X, y = blobs(np.random.default_rng(7), n=20)
        C, g, _ = clf.grid_search(X, y, C_grid=[4.0, 1.0], gamma_grid=[2.0, 0.5], inner_folds=2, seed=0)
        assert (C, g) == (1.0, 0.5)


class TestRoc:
    def test_against_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(2, 40))
            labels = rng.integers(0, 2, n)
            labels[:2] = [0, 1]
            scores = rng.integers(0, 6, n).astype(float)  # plenty of ties
            assert auc_score(scores, labels) == pairwise_auc(scores, labels)
            assert roc_curve_auc(scores, labels).auc == pairwise_auc(scores, labels)

    def test_trapezoid_agrees(self):
        rng = np.random.default_rng(1)
        s, l = rng.normal(size=50), rng.integers(0, 2, 50)
        r = roc_curve_auc(s, l)
        fpr = 1 - r.specificity
        assert np.trapezoid(r.sensitivity, fpr) == pytest.approx(r.auc)

    def test_trivial_cases(self):
        assert roc_curve_auc([0, 1, 1, 0], [0, 1, 1, 0]).auc == 1.0
        assert roc_curve_auc([3, 3, 3, 3], [0, 1, 1, 0]).auc == 0.5
        with pytest.raises(ParameterError):
            roc_curve_auc([1, 2], [1, 1])

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(2)
        s, l = rng.normal(size=40), rng.integers(0, 2, 40)
        assert auc_score(np.exp(3 * s), l) == auc_score(s, l)

    def test_curve_monotone(self):
        rng = np.random.default_rng(3)
        r = roc_curve_auc(rng.normal(size=30), rng.integers(0, 2, 30))
        assert np.all(np.diff(r.sensitivity) >= 0) and np.all(np.diff(r.specificity) <= 0)

    def test_operating_points_hand(self):
        # scores 0.9(+) 0.8(-) 0.7(+) 0.6(-) give the staircase
        # thr 0.9: sens .5 spec 1; 0.8: .5/.5; 0.7: 1/.5; 0.6: 1/0
        r = roc_curve_auc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
        ops = operating_points(r, [0.5, 0.6, 1.0])
        assert [o["specificity"] for o in ops] == [1.0, 0.5, 0.5]
        assert all(o["reachable"] for o in ops)

    def test_perfect_classifier_points(self):
        r = roc_curve_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert [o["specificity"] for o in operating_points(r)] == [1.0, 1.0, 1.0]

    def test_unreachable_flagged(self):
        r = RocResult(np.array([0.0, 0.5]), np.array([1.0, 0.4]), 0.5)
        o = operating_points(r, [0.8])[0]
        assert o["specificity"] == 0.0 and not o["reachable"]

    def test_json_and_svg(self):
        r = roc_curve_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        import json
        d = json.loads(r.to_json())
        assert d["auc"] == 0.75 and d["thresholds"][0] is None
        svg = roc_svg(r)
        assert svg.startswith("<svg") and "polyline" in svg


class TestCrossValidation:
    def test_informative_feature(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 2, 40)
        res = cross_validate(y[:, None].astype(float), y, folds=5, repeats=3, seed=1,
                             C_grid=[1.0], gamma_grid=[0.5])
        assert res.aucs == [1.0, 1.0, 1.0]

    def test_noise_features(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(200, 4))
        y = rng.integers(0, 2, 200)
        res = cross_validate(X, y, folds=10, repeats=3, seed=2, C_grid=[1.0], gamma_grid=[0.25])
        assert 0.4 <= res.auc <= 0.6

    def test_folds_partition_and_hygiene(self, noisy):
        X, y = noisy
        ids = np.array([f"p{i:03d}" for i in range(len(X))])
        log = []
        cross_validate(X, y, folds=4, repeats=2, seed=0, C_grid=[1.0, 4.0], gamma_grid=[0.5], inner_folds=3,
                       ids=ids, observer=lambda e, i: log.append((e, set(i))))
        tests = [s for e, s in log if e == "outer_test"]
        assert len(tests) == 8
        for rep in range(2):
            block = tests[rep * 4:(rep + 1) * 4]
            assert set().union(*block) == set(ids)
            assert sum(len(b) for b in block) == len(ids)
        held = None
        for e, s in log:
            if e == "outer_test":
                held = s
            elif e in ("inner_train", "inner_val", "fit"):
                assert not (s & held)

    def test_standardisation_sees_training_rows_only(self, noisy, monkeypatch):
        X, y = noisy
        X = X + np.arange(len(X))[:, None] * 1e-3  # make rows identifiable
        seen = []
        original = RbfSVC.fit

        def spy(self, Xf, yf):
            seen.append(np.asarray(Xf).copy())
            return original(self, Xf, yf)

        monkeypatch.setattr(RbfSVC, "fit", spy)
        log = []
        cross_validate(X, y, folds=3, repeats=1, seed=0, C_grid=[1.0], gamma_grid=[0.5, 1.0], inner_folds=2,
                       observer=lambda e, i: log.append((e, i)))
        tests = [i for e, i in log if e == "outer_test"]
        rows = {tuple(r) for r in X}
        assert len(seen) > 0
        # every fit call belongs to one outer fold and never includes its test rows
        fold = -1
        calls_per_fold = 2 * 2 + 1
        for k, Xf in enumerate(seen):
            fold = k // calls_per_fold
            test_rows = {tuple(r) for r in X[tests[fold]]}
            fit_rows = {tuple(r) for r in Xf}
            assert fit_rows <= rows and not (fit_rows & test_rows)

    def test_average_mode(self, noisy):
        X, y = noisy
        res = cross_validate(X, y, folds=3, repeats=2, seed=0, C_grid=[1.0], gamma_grid=[0.5], mode="average")
        assert len(res.aucs) == 2 and 0 <= res.auc <= 1

    def test_reproducible(self, noisy):
        X, y = noisy
        a = cross_validate(X, y, folds=3, repeats=2, seed=5, C_grid=[1.0, 2.0], gamma_grid=[0.5], inner_folds=2)
        b = cross_validate(X, y, folds=3, repeats=2, seed=5, C_grid=[1.0, 2.0], gamma_grid=[0.5], inner_folds=2)
        assert a.to_json() == b.to_json()

    def test_mean_curve_band(self, noisy):
        X, y = noisy
        res = cross_validate(X, y, folds=3, repeats=3, seed=0, C_grid=[1.0], gamma_grid=[0.5])
        assert res.sensitivity.shape == res.sensitivity_std.shape == (101,)
        assert res.sensitivity[-1] == 1.0

    def test_reshuffle_warning(self):
        from myoscan.evaluation import _stratified_splits

        with warnings.catch_warnings():
            warnings.simplefilter("error")
            _stratified_splits(np.array([0, 0, 0, 1, 1]), 2, np.random.default_rng(0))
        # a lone positive always leaves one training fold without positives
        with pytest.warns(RuntimeWarning), pytest.raises(ParameterError):
            _stratified_splits(np.array([0, 0, 0, 1]), 2, np.random.default_rng(0), max_reshuffles=1)
