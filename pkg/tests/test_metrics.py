import numpy as np
import pytest
from scipy import stats as sps

from ganaug import metrics
from ganaug.data import STRUCTURES
from ganaug.errors import BadCount, DegenerateClass, DegenerateVariance, ShapeMismatch


class TestDsc:
    def test_identical(self):
        m = np.zeros((6, 6), bool)
        m[1:4, 1:4] = True
        assert metrics.dsc(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((6, 6), bool)
        b = np.zeros((6, 6), bool)
        a[0, 0] = True
        b[5, 5] = True
        assert metrics.dsc(a, b) == 0.0

    def test_hand_computed(self):
        # |A|=4, |B|=6, |A&B|=3 -> 2*3/10
        a = np.zeros(10, bool)
        b = np.zeros(10, bool)
        a[:4] = True
        b[1:7] = True
        assert metrics.dsc(a, b) == pytest.approx(0.6)

    def test_both_empty_is_one(self):
        assert metrics.dsc(np.zeros(4, bool), np.zeros(4, bool)) == 1.0

    def test_symmetry_property(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = rng.random((8, 8)) < 0.4
            b = rng.random((8, 8)) < 0.4
            assert metrics.dsc(a, b) == metrics.dsc(b, a)
            assert 0.0 <= metrics.dsc(a, b) <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            metrics.dsc(np.zeros(3, bool), np.zeros(4, bool))


def brute_force_dsc(pred, ref, cls):
    a = {tuple(p) for p in np.argwhere(pred == cls)}
    b = {tuple(p) for p in np.argwhere(ref == cls)}
    if not a and not b:
        return 1.0
    return 2 * len(a & b) / (len(a) + len(b))


class TestDscReport:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(1)
        ref = rng.integers(0, 8, size=(8, 8, 3))
        rep = metrics.dsc_report(ref, ref)
        assert rep.row() == [1.0] * 9

    def test_all_background_prediction(self):
        ref = np.zeros((6, 6), dtype=int)
        ref[2:4, 2:4] = 3
        rep = metrics.dsc_report(np.zeros_like(ref), ref)
        assert rep.overall == 0.0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            pred = rng.integers(0, 8, size=(8, 8))
            ref = rng.integers(0, 8, size=(8, 8))
            rep = metrics.dsc_report(pred, ref)
            for c, name in enumerate(STRUCTURES):
                assert rep.per_structure[name] == pytest.approx(
                    brute_force_dsc(pred, ref, c + 1))
            merged_pred = (pred > 0).astype(int)
            merged_ref = (ref > 0).astype(int)
            assert rep.overall == pytest.approx(
                brute_force_dsc(merged_pred, merged_ref, 1))

    def test_overall_differs_from_mean(self):
        pred = np.zeros((6, 6), dtype=int)
        ref = np.zeros((6, 6), dtype=int)
        pred[0, 0] = 1
        ref[0, 0] = 2
        rep = metrics.dsc_report(pred, ref)
        assert rep.overall == 1.0
        assert rep.mean_structures < 1.0


class TestMakeFolds:
    def test_every_subject_tested_once(self):
        ids = [f"s{i:02d}" for i in range(30)]
        folds = metrics.make_folds(ids, k=5, seed=3)
        assert len(folds) == 5
        tested = [t for f in folds for t in f.test_ids]
        assert sorted(tested) == sorted(ids)
        for f in folds:
            assert len(f.train_ids) == 24 and len(f.test_ids) == 6

    def test_seeded_rerun_identical(self):
        ids = [f"s{i}" for i in range(30)]
        a = metrics.make_folds(ids, seed=4)
        b = metrics.make_folds(ids, seed=4)
        assert all(x.test_ids == y.test_ids for x, y in zip(a, b))

    def test_bad_count(self):
        with pytest.raises(BadCount):
            metrics.make_folds([f"s{i}" for i in range(29)], k=5)
        with pytest.raises(BadCount):
            metrics.make_folds(["a", "a", "b", "c", "d"], k=5)

    def test_budget_subset(self):
        ids = [f"s{i}" for i in range(30)]
        fold = metrics.make_folds(ids, seed=5)[0]
        sub = metrics.subset_budget(fold, 6)
        assert sub.labelled_subset == fold.train_ids[:6]
        assert sub.labelled_budget == 6


class TestVolumes:
    def test_empty_map(self):
        assert metrics.volumes_from_seg(np.zeros((4, 4, 2), int)).tolist() == [0] * 7

    def test_count_oracle(self):
        m = np.zeros((5, 5, 2), int)
        m[0, :5, 0] = 3
        m[1, :5, 0] = 3
        vols = metrics.volumes_from_seg(m, spacing=1.0)
        assert vols[2] == 10.0
        assert vols.sum() == 10.0

    def test_flip_invariance(self):
        rng = np.random.default_rng(6)
        m = rng.integers(0, 8, size=(6, 6, 3))
        a = metrics.volumes_from_seg(m)
        b = metrics.volumes_from_seg(m[:, ::-1, :])
        np.testing.assert_array_equal(a, b)

    def test_anisotropic_spacing(self):
        m = np.zeros((2, 2, 2), int)
        m[0, 0, 0] = 1
        vols = metrics.volumes_from_seg(m, spacing=(1.0, 1.0, 3.0))
        assert vols[0] == 3.0


def synth_features(rng, n0=69, n1=30, effect=1.0):
    x0 = rng.normal(0, 1, size=(n0, 7))
    x1 = rng.normal(0, 1, size=(n1, 7))
    x1[:, 0] += effect
    x = np.vstack([x0, x1])
    y = np.array([0] * n0 + [1] * n1)
    return x, y


def separable_features(rng, n0=69, n1=30, gap=3.0):
    """Bounded noise so the class supports genuinely do not overlap."""
    x0 = rng.normal(0, 1, size=(n0, 7))
    x1 = rng.normal(0, 1, size=(n1, 7))
    x0[:, 0] = rng.uniform(-1, 1, n0)
    x1[:, 0] = gap + rng.uniform(-1, 1, n1)
    return np.vstack([x0, x1]), np.array([0] * n0 + [1] * n1)


class TestClassifyCdr:
    def test_linearly_separable(self):
        x, y = separable_features(np.random.default_rng(7))
        res = metrics.classify_cdr(x, y, repeats=20, seed=0)
        assert res.auc_mean >= 0.99

    def test_permuted_labels_chance_level(self):
        x, y = synth_features(np.random.default_rng(8), effect=3.0)
        res = metrics.classify_cdr(x, y, repeats=50, seed=1, permute=True)
        assert 0.45 <= res.auc_mean <= 0.55

    def test_degenerate_class(self):
        x = np.random.default_rng(9).normal(size=(20, 7))
        with pytest.raises(DegenerateClass):
            metrics.classify_cdr(x, np.zeros(20, int))
        with pytest.raises(DegenerateClass):
            metrics.classify_cdr(x[:8], np.array([0, 1] * 4))

    def test_deterministic_given_seed(self):
        x, y = synth_features(np.random.default_rng(10))
        a = metrics.classify_cdr(x, y, repeats=5, seed=2)
        b = metrics.classify_cdr(x, y, repeats=5, seed=2)
        np.testing.assert_array_equal(a.aucs, b.aucs)


class TestPairedTtest:
    def test_identical_samples(self):
        a = np.array([1.0, 2.0, 3.0])
        p, sig = metrics.paired_ttest(a, a.copy())
        assert p == 1.0 and not sig

    def test_constant_shift_tiny_noise(self):
        rng = np.random.default_rng(11)
        b = rng.normal(0, 1, size=30)
        a = b + 1.0 + rng.normal(0, 1e-6, size=30)
        p, sig = metrics.paired_ttest(a, b)
        assert p < 1e-6 and sig

    def test_textbook_pairs_against_closed_form(self):
        a = np.array([82.0, 69.0, 73.0, 43.0, 58.0])
        b = np.array([63.0, 42.0, 74.0, 37.0, 51.0])
        d = a - b
        t = d.mean() / (d.std(ddof=1) / np.sqrt(len(d)))
        expected = 2 * sps.t.sf(abs(t), len(d) - 1)
        p, _ = metrics.paired_ttest(a, b)
        assert p == pytest.approx(expected, rel=1e-10)

    def test_degenerate_variance(self):
        with pytest.raises(DegenerateVariance):
            metrics.paired_ttest(np.array([1.0, 2.0]), np.array([0.0, 1.0]))


class TestKernelRegression:
    def test_constant_y(self):
        x = np.linspace(0, 1, 10)
        _, est, _ = metrics.kernel_regression(x, np.full(10, 3.5))
        np.testing.assert_allclose(est, 3.5)

    def test_single_point(self):
        grid, est, sup = metrics.kernel_regression([2.0], [7.0])
        np.testing.assert_allclose(est, 7.0)
        assert sup.all()

    def test_two_point_symmetry(self):
        _, est, _ = metrics.kernel_regression([0.0, 1.0], [0.0, 1.0],
                                              bandwidth=0.5,
                                              grid=np.array([0.5]))
        assert est[0] == pytest.approx(0.5)

    def test_bounded_by_data(self):
        rng = np.random.default_rng(12)
        x = rng.random(40)
        y = rng.normal(0, 1, 40)
        _, est, _ = metrics.kernel_regression(x, y)
        assert est.min() >= y.min() - 1e-12
        assert est.max() <= y.max() + 1e-12

    def test_far_grid_points_flagged(self):
        grid = np.array([0.0, 100.0])
        _, est, sup = metrics.kernel_regression([0.0], [5.0], bandwidth=0.1,
                                                grid=grid)
        assert sup[0] and not sup[1]
        assert est[1] == 5.0
