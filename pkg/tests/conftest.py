import numpy as np
import pytest

from robustfed.gaussians import MomentGaussian, NatGaussian, from_moment

# filled by tests/test_acceptance.py, printed in the terminal summary
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for entry in ACCEPTANCE_RESULTS:
        status = "PASS" if entry["passed"] else "FAIL"
        terminalreporter.write_line(
            f"criterion {entry['criterion']}: {status} "
            f"({entry['elapsed']:.1f}s / budget {entry['budget']:.0f}s) -- {entry['note']}"
        )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_proper(rng, dim=1, diagonal=False, mean_scale=3.0, var_lo=0.2, var_hi=5.0):
    """A random proper Gaussian with moderate conditioning."""
    mean = rng.uniform(-mean_scale, mean_scale, size=dim)
    if diagonal or dim == 1:
        var = rng.uniform(var_lo, var_hi, size=dim)
        cov = var if diagonal else np.diag(var)
        return from_moment(MomentGaussian(mean, var if diagonal else cov))
    a = rng.standard_normal((dim, dim))
    cov = a @ a.T + var_lo * np.eye(dim)
    return from_moment(MomentGaussian(mean, cov))


def grid_1d(q: NatGaussian, half_width=12.0, n=20001):
    """A quadrature axis covering q's bulk generously."""
    from robustfed.gaussians import to_moment

    m = to_moment(q)
    centre, sd = float(m.mean[0]), float(m.std[0])
    return np.linspace(centre - half_width * sd, centre + half_width * sd, n)
