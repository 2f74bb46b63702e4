import numpy as np
import pytest
from scipy.optimize import linprog

from robustfed.datagen import (
    gen_clutter,
    gen_huber,
    gen_logreg_2d,
    gen_student_t,
    partition_homogeneous,
)


def separating_plane_exists(x, y):
    """LP feasibility: does some theta achieve margin 1 on every point?"""
    xt = np.hstack([np.ones((x.shape[0], 1)), x])
    signs = np.where(y == 1, -1.0, 1.0)
    a_ub = signs[:, None] * xt
    b_ub = -np.ones(x.shape[0])
    res = linprog(
        c=np.zeros(xt.shape[1]),
        A_ub=a_ub,
        b_ub=b_ub,
        bounds=[(None, None)] * xt.shape[1],
        method="highs",
    )
    return res.status == 0


class TestClutter:
    def test_zero_contamination_all_inliers(self):
        d = gen_clutter(100, 0.0, seed=1)
        assert not d.is_outlier.any()

    def test_paper_setting_shapes(self):
        d = gen_clutter(100, 0.25, seed=3)
        assert d.x.shape == (100,)
        assert d.inlier_location == pytest.approx(d.theta - 2.0)
        assert d.outlier_location == pytest.approx(d.theta + 3.0)

    def test_outlier_fraction_within_binomial_band(self):
        n, eps = 100, 0.25
        for seed in range(30):
            d = gen_clutter(n, eps, seed=seed)
            k = d.is_outlier.sum()
            sd = np.sqrt(n * eps * (1 - eps))
            assert abs(k - n * eps) <= 3 * sd

    def test_cluster_locations(self):
        d = gen_clutter(20000, 0.3, seed=5)
        inl = d.x[~d.is_outlier]
        out = d.x[d.is_outlier]
        assert inl.mean() == pytest.approx(d.theta - 2.0, abs=0.05)
        assert out.mean() == pytest.approx(d.theta + 3.0, abs=0.05)

    def test_eps_range(self):
        with pytest.raises(ValueError):
            gen_clutter(10, 0.5, seed=0)

    def test_seed_reproducible(self):
        a, b = gen_clutter(50, 0.2, seed=11), gen_clutter(50, 0.2, seed=11)
        np.testing.assert_array_equal(a.x, b.x)
        assert a.theta == b.theta


class TestHuber:
    @staticmethod
    def base(rng, n):
        return rng.normal(0.0, 1.0, size=n)

    @staticmethod
    def contaminant(rng, n):
        return rng.normal(6.0, 0.5, size=n)

    def test_mixture_cdf_within_dkw_band(self):
        from scipy.stats import norm

        n, eps = 4000, 0.3
        d = gen_huber(self.base, self.contaminant, eps, seed=2, n=n)
        xs = np.sort(d.x)
        ecdf = np.arange(1, n + 1) / n
        mix = (1 - eps) * norm.cdf(xs, 0, 1) + eps * norm.cdf(xs, 6, 0.5)
        # DKW: P(sup |F_n - F| > t) <= 2 exp(-2 n t^2); t for 1e-6 failure
        t = np.sqrt(np.log(2 / 1e-6) / (2 * n))
        assert np.max(np.abs(ecdf - mix)) < t

    def test_tiny_eps_degenerates_to_base(self):
        d = gen_huber(self.base, self.contaminant, 1e-12, seed=4, n=500)
        assert not d.is_outlier.any()

    def test_seed_reproducible(self):
        a = gen_huber(self.base, self.contaminant, 0.2, seed=9, n=100)
        b = gen_huber(self.base, self.contaminant, 0.2, seed=9, n=100)
        np.testing.assert_array_equal(a.x, b.x)

    def test_eps_range(self):
        with pytest.raises(ValueError):
            gen_huber(self.base, self.contaminant, 0.6, seed=0, n=10)


class TestLogreg2D:
    def test_clean_data_linearly_separable(self):
        d = gen_logreg_2d(100, outliers=0, seed=0)
        assert separating_plane_exists(d.x, d.y)

    def test_outliers_break_separability(self):
        d = gen_logreg_2d(100, outliers=20, seed=0)
        assert not separating_plane_exists(d.x, d.y)

    def test_class_counts_as_configured(self):
        d = gen_logreg_2d(101, outliers=7, seed=3)
        assert d.x.shape == (108, 2)
        assert (d.y == 1).sum() == 51  # ceil half of the clean points
        assert (d.y == 0).sum() == 50 + 7
        assert d.is_outlier.sum() == 7
        assert (d.y[d.is_outlier] == 0).all()  # mislabelled into class 0


class TestPartition:
    def test_disjoint_cover_with_balanced_sizes(self):
        parts = partition_homogeneous(103, 5, seed=0)
        sizes = sorted(len(p) for p in parts)
        assert sizes == [20, 20, 21, 21, 21]
        all_idx = np.concatenate(parts)
        assert np.array_equal(np.sort(all_idx), np.arange(103))

    def test_seeded_shuffle(self):
        a = partition_homogeneous(50, 3, seed=1)
        b = partition_homogeneous(50, 3, seed=1)
        c = partition_homogeneous(50, 3, seed=2)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert any(not np.array_equal(x, y) for x, y in zip(a, c))


class TestStudentT:
    def test_moments_roughly_match(self):
        x = gen_student_t(200_000, seed=0, df=4.0)
        assert x.mean() == pytest.approx(0.0, abs=0.02)
        assert x.std() == pytest.approx(np.sqrt(2.0), abs=0.05)  # df/(df-2)
