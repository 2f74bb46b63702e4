import numpy as np
import pytest

from robustfed.divergences import (
    AlphaBlendNotPD,
    DivergenceSpec,
    UnsupportedDivergence,
    divergence,
    divergence_grad,
    fisher_rao_1d,
)
from robustfed.errors import NotPositiveDefinite
from robustfed.gaussians import (
    MomentGaussian,
    NatGaussian,
    from_moment,
    log_pdf,
    to_moment,
)
from robustfed.oracles import fisher_rao_geodesic_1d

from conftest import grid_1d, random_proper


def gauss1(mean, var):
    return from_moment(MomentGaussian(np.array([mean]), np.array([var])))


def quad_kl_1d(q, p):
    axis = grid_1d(q, half_width=14.0, n=200001)
    lq, lp = log_pdf(q, axis), log_pdf(p, axis)
    return np.trapezoid(np.exp(lq) * (lq - lp), axis)


def quad_alpha_renyi_1d(alpha, q, p):
    # the integrand q^a p^(1-a) concentrates around the *blended* Gaussian,
    # which can sit far from either input; cover all three bulks
    blend = NatGaussian(
        alpha * q.precision_matrix + (1 - alpha) * p.precision_matrix,
        alpha * q.shift + (1 - alpha) * p.shift,
    )
    centres = []
    for f in (q, p, blend):
        m = to_moment(f)
        centres.append((float(m.mean[0]), float(m.std[0])))
    lo = min(c - 18 * s for c, s in centres)
    hi = max(c + 18 * s for c, s in centres)
    axis = np.linspace(lo, hi, 600001)
    lq, lp = log_pdf(q, axis), log_pdf(p, axis)
    val = np.trapezoid(np.exp(alpha * lq + (1 - alpha) * lp), axis)
    return np.log(val) / (alpha * (alpha - 1.0))


def mean_field(mu, log_sd):
    mu = np.asarray(mu, dtype=float)
    return from_moment(MomentGaussian(mu, np.exp(2.0 * np.asarray(log_sd, dtype=float))))


class TestKL:
    def test_identity_of_indiscernibles(self, rng):
        q = random_proper(rng, dim=2)
        assert divergence(DivergenceSpec.kl(), q, q) == pytest.approx(0.0, abs=1e-12)

    def test_unit_shift_against_quadrature(self):
        q, p = gauss1(1.0, 1.0), gauss1(0.0, 1.0)
        oracle = quad_kl_1d(q, p)
        assert oracle == pytest.approx(0.5, abs=1e-9)
        assert divergence(DivergenceSpec.kl(), q, p) == pytest.approx(0.5, abs=1e-12)

    def test_random_pairs_against_quadrature(self, rng):
        for _ in range(20):
            q, p = random_proper(rng, dim=1), random_proper(rng, dim=1)
            got = divergence(DivergenceSpec.kl(), q, p)
            assert got == pytest.approx(quad_kl_1d(q, p), abs=1e-8)

    def test_bivariate_against_tensor_quadrature(self, rng):
        q, p = random_proper(rng, dim=2), random_proper(rng, dim=2)
        mq = to_moment(q)
        sds = np.sqrt(np.diag(mq.covariance_matrix))
        ax0 = np.linspace(mq.mean[0] - 12 * sds[0], mq.mean[0] + 12 * sds[0], 2001)
        ax1 = np.linspace(mq.mean[1] - 12 * sds[1], mq.mean[1] + 12 * sds[1], 2001)
        gx, gy = np.meshgrid(ax0, ax1, indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        lq = log_pdf(q, pts).reshape(gx.shape)
        lp = log_pdf(p, pts).reshape(gx.shape)
        vals = np.exp(lq) * (lq - lp)
        oracle = np.trapezoid(np.trapezoid(vals, ax1, axis=1), ax0)
        assert divergence(DivergenceSpec.kl(), q, p) == pytest.approx(oracle, abs=1e-6)

    def test_weighted_kl_is_kl_over_w(self, rng):
        for _ in range(10):
            q, p = random_proper(rng, dim=1), random_proper(rng, dim=1)
            kl = divergence(DivergenceSpec.kl(), q, p)
            assert divergence(DivergenceSpec.weighted_kl(2.0), q, p) == pytest.approx(0.5 * kl)

    def test_reverse_kl_swaps_arguments(self, rng):
        q, p = random_proper(rng, dim=1), random_proper(rng, dim=1)
        assert divergence(DivergenceSpec.reverse_kl(), q, p) == pytest.approx(
            divergence(DivergenceSpec.kl(), p, q)
        )

    def test_rejects_improper(self):
        site = NatGaussian(np.array([[-1.0]]), np.zeros(1))
        with pytest.raises(NotPositiveDefinite):
            divergence(DivergenceSpec.kl(), site, gauss1(0, 1))


class TestAlphaRenyi:
    def test_zero_at_equality(self):
        q = gauss1(0.0, 1.0)
        assert divergence(DivergenceSpec.alpha_renyi(2.0), q, q) == pytest.approx(0.0, abs=1e-12)

    def test_random_pairs_against_quadrature(self, rng):
        checked = 0
        while checked < 20:
            q, p = random_proper(rng, dim=1), random_proper(rng, dim=1)
            alpha = rng.uniform(1.05, 2.5)
            try:
                got = divergence(DivergenceSpec.alpha_renyi(alpha), q, p)
            except AlphaBlendNotPD:
                continue
            oracle = quad_alpha_renyi_1d(alpha, q, p)
            assert got == pytest.approx(oracle, abs=1e-8)
            checked += 1

    def test_limit_alpha_to_one_is_kl(self, rng):
        for _ in range(10):
            q, p = random_proper(rng, dim=1), random_proper(rng, dim=1)
            kl = divergence(DivergenceSpec.kl(), q, p)
            for eps in (1e-6, -1e-6):
                ar = divergence(DivergenceSpec.alpha_renyi(1.0 + eps), q, p)
                assert ar == pytest.approx(kl, abs=1e-4)

    def test_limit_alpha_to_zero_is_reverse_kl(self, rng):
        for _ in range(10):
            q, p = random_proper(rng, dim=1), random_proper(rng, dim=1)
            rkl = divergence(DivergenceSpec.reverse_kl(), q, p)
            ar = divergence(DivergenceSpec.alpha_renyi(1e-6), q, p)
            assert ar == pytest.approx(rkl, abs=1e-4)
            # alpha slightly below zero needs the blend to stay PD
            try:
                ar_neg = divergence(DivergenceSpec.alpha_renyi(-1e-6), q, p)
            except AlphaBlendNotPD:
                continue
            assert ar_neg == pytest.approx(rkl, abs=1e-4)

    def test_blend_not_pd_is_a_distinct_error(self):
        q, p = gauss1(0.0, 10.0), gauss1(0.0, 0.1)
        with pytest.raises(AlphaBlendNotPD):
            divergence(DivergenceSpec.alpha_renyi(30.0), q, p)

    def test_invalid_alpha_rejected(self):
        with pytest.raises(ValueError):
            DivergenceSpec.alpha_renyi(1.0)
        with pytest.raises(ValueError):
            DivergenceSpec.alpha_renyi(0.0)


class TestFisherRao:
    def test_zero_at_equality(self):
        q = MomentGaussian(np.array([0.3]), np.array([2.0]))
        assert fisher_rao_1d(q, q) == 0.0

    def test_symmetry(self, rng):
        for _ in range(30):
            q = MomentGaussian(rng.uniform(-3, 3, 1), rng.uniform(0.2, 5, 1))
            p = MomentGaussian(rng.uniform(-3, 3, 1), rng.uniform(0.2, 5, 1))
            assert fisher_rao_1d(q, p) == pytest.approx(fisher_rao_1d(p, q), rel=1e-12)

    def test_against_geodesic_quadrature_oracle(self):
        q = MomentGaussian(np.array([0.0]), np.array([1.0]))
        p = MomentGaussian(np.array([1.0]), np.array([1.0]))
        oracle = fisher_rao_geodesic_1d(q, p)
        got = fisher_rao_1d(q, p)
        assert got == pytest.approx(oracle, abs=1e-6)
        # also the closed value: sqrt(2) log 2 for this pair
        assert got == pytest.approx(np.sqrt(2.0) * np.log(2.0), abs=1e-12)

    def test_random_pairs_against_geodesic_oracle(self, rng):
        for _ in range(15):
            q = MomentGaussian(rng.uniform(-3, 3, 1), rng.uniform(0.3, 4, 1))
            p = MomentGaussian(rng.uniform(-3, 3, 1), rng.uniform(0.3, 4, 1))
            assert fisher_rao_1d(q, p) == pytest.approx(fisher_rao_geodesic_1d(q, p), abs=1e-6)

    def test_equal_scale_pure_location_case(self):
        # vertical-geodesic degenerate case: equal means, different scales
        q = MomentGaussian(np.array([0.5]), np.array([1.0]))
        p = MomentGaussian(np.array([0.5]), np.array([4.0]))
        assert fisher_rao_1d(q, p) == pytest.approx(np.sqrt(2.0) * np.log(2.0), rel=1e-12)
        assert fisher_rao_1d(q, p) == pytest.approx(fisher_rao_geodesic_1d(q, p), abs=1e-8)

    def test_dim_error(self):
        q = MomentGaussian(np.zeros(2), np.ones(2))
        with pytest.raises(UnsupportedDivergence):
            fisher_rao_1d(q, q)
        with pytest.raises(UnsupportedDivergence):
            divergence(DivergenceSpec.fisher_rao(), random_proper(np.random.default_rng(0), 2),
                       random_proper(np.random.default_rng(1), 2))


class TestNonNegativity:
    def test_thousand_random_pairs_all_kinds(self, rng):
        specs = [
            DivergenceSpec.kl(),
            DivergenceSpec.weighted_kl(3.0),
            DivergenceSpec.reverse_kl(),
            DivergenceSpec.alpha_renyi(0.5),
            DivergenceSpec.alpha_renyi(2.0),
            DivergenceSpec.fisher_rao(),
        ]
        for _ in range(1000):
            q, p = random_proper(rng, dim=1), random_proper(rng, dim=1)
            for spec in specs:
                try:
                    val = divergence(spec, q, p)
                except AlphaBlendNotPD:
                    continue
                assert val >= -1e-12
                if not q.same_distribution(p):
                    assert val > 0.0


class TestGradients:
    def fd_grad(self, spec, mu, log_sd, p, h=1e-5):
        x = np.concatenate([mu, log_sd])
        d = mu.shape[0]
        out = np.zeros_like(x)
        for i in range(x.shape[0]):
            hi, lo = x.copy(), x.copy()
            hi[i] += h
            lo[i] -= h
            f_hi = divergence(spec, mean_field(hi[:d], hi[d:]), p)
            f_lo = divergence(spec, mean_field(lo[:d], lo[d:]), p)
            out[i] = (f_hi - f_lo) / (2 * h)
        return out

    def test_zero_at_minimum(self, rng):
        p = random_proper(rng, dim=3, diagonal=True)
        m = to_moment(p)
        mu, log_sd = m.mean, np.log(m.std)
        for spec in (DivergenceSpec.kl(), DivergenceSpec.weighted_kl(2.0),
                     DivergenceSpec.reverse_kl(), DivergenceSpec.alpha_renyi(1.5)):
            g = divergence_grad(spec, mu, log_sd, p)
            np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_matches_central_differences_on_50_random_points(self, rng):
        specs = [
            DivergenceSpec.kl(),
            DivergenceSpec.weighted_kl(2.5),
            DivergenceSpec.reverse_kl(),
            DivergenceSpec.alpha_renyi(1.5),
            DivergenceSpec.alpha_renyi(0.5),
        ]
        done = 0
        while done < 50:
            d = int(rng.integers(1, 4))
            p = random_proper(rng, dim=d, diagonal=bool(rng.integers(0, 2)))
            mu = rng.uniform(-2, 2, d)
            log_sd = rng.uniform(-0.8, 0.8, d)
            spec = specs[done % len(specs)]
            try:
                got = divergence_grad(spec, mu, log_sd, p)
            except AlphaBlendNotPD:
                continue
            want = self.fd_grad(spec, mu, log_sd, p)
            np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-7)
            done += 1

    def test_fisher_rao_grad_matches_fd(self, rng):
        spec = DivergenceSpec.fisher_rao()
        for _ in range(10):
            p = random_proper(rng, dim=1)
            mu = rng.uniform(-2, 2, 1)
            log_sd = rng.uniform(-0.5, 0.5, 1)
            got = divergence_grad(spec, mu, log_sd, p)
            want = self.fd_grad(spec, mu, log_sd, p)
            np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-7)

    def test_weighted_grad_is_scaled_kl_grad(self, rng):
        p = random_proper(rng, dim=2, diagonal=True)
        mu, log_sd = rng.uniform(-1, 1, 2), rng.uniform(-0.3, 0.3, 2)
        g_kl = divergence_grad(DivergenceSpec.kl(), mu, log_sd, p)
        g_w = divergence_grad(DivergenceSpec.weighted_kl(4.0), mu, log_sd, p)
        np.testing.assert_allclose(g_w, g_kl / 4.0, rtol=1e-14)
