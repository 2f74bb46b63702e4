import numpy as np
import pytest

from robustfed.gaussians import MomentGaussian, from_moment
from robustfed.losses import augment
from robustfed.predict import KAPPA_PROBIT, KAPPA_VERBATIM, predict_logit


def sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def mc_predictive(mean, cov_diag, x, n=1_000_000, seed=0):
    """Monte-Carlo oracle for E_q[sigmoid(theta' xt)]."""
    rng = np.random.default_rng(seed)
    thetas = mean + np.sqrt(cov_diag) * rng.standard_normal((n, mean.shape[0]))
    return sigmoid(thetas @ augment(x).T).mean(axis=0)


class TestPredictLogit:
    def test_point_mass_limit_is_plain_sigmoid(self):
        mu = np.array([0.25, 1.5, -2.0])
        q = from_moment(MomentGaussian(mu, np.full(3, 1e-16)))
        x = np.array([[0.5, 0.25], [-1.0, 2.0]])
        got = predict_logit(q, x)
        want = sigmoid(augment(x) @ mu)
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_orthogonal_input_gives_half(self):
        q = from_moment(MomentGaussian(np.array([0.0, 1.0, 0.0]), np.ones(3)))
        x = np.array([[0.0, 3.0]])  # xt = [1, 0, 3] orthogonal to mu
        assert predict_logit(q, x)[0] == pytest.approx(0.5)

    def test_probit_blend_tracks_mc_oracle(self, rng):
        for _ in range(10):
            mu = rng.uniform(-1.5, 1.5, size=3)
            var = rng.uniform(0.1, 2.0, size=3)
            q = from_moment(MomentGaussian(mu, var))
            x = rng.uniform(-2, 2, size=(4, 2))
            oracle = mc_predictive(mu, var, x, n=1_000_000, seed=int(rng.integers(1e6)))
            got = predict_logit(q, x, kappa=KAPPA_PROBIT)
            np.testing.assert_allclose(got, oracle, atol=0.01)

    def test_verbatim_kappa_differs_but_orders_the_same(self, rng):
        mu = np.array([0.5, 1.0, -0.5])
        q = from_moment(MomentGaussian(mu, np.full(3, 0.5)))
        x = rng.uniform(-2, 2, size=(16, 2))
        a = predict_logit(q, x, kappa=KAPPA_VERBATIM)
        b = predict_logit(q, x, kappa=KAPPA_PROBIT)
        assert not np.allclose(a, b)
        # both shrink towards 1/2 relative to the plain sigmoid, kappa=pi more
        plain = sigmoid(augment(x) @ mu)
        assert np.all((a - 0.5) * (plain - 0.5) >= 0)
        assert np.all(np.abs(a - 0.5) <= np.abs(b - 0.5) + 1e-12)

    def test_dense_covariance_supported(self):
        cov = np.array([[0.5, 0.1], [0.1, 0.3]])
        q = from_moment(MomentGaussian(np.array([0.2, -0.1]), cov))
        x = np.array([[1.0]])
        val = predict_logit(q, x)
        assert 0.0 < val[0] < 1.0
