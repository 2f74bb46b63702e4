"""Brute-force ground truth used to certify every closed form in the package.

Nothing here is fast and nothing here shares code paths with the engine's
closed forms: posteriors are tabulated on dense grids and integrated by the
trapezoid rule, expectations go through Gauss-Hermite quadrature, the
Fisher-Rao distance is integrated along the geodesic, and conjugate updates
are certified against a generic numeric minimiser.  Reports are plain
dataclasses that serialise to JSON for the harness.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import integrate, optimize

from .client import ClientState, SiteFactor
from .divergences import DivergenceSpec, fisher_rao_1d
from .engine import run_federation
from .errors import DimensionMismatch, RobustFedError
from .gaussians import MomentGaussian, NatGaussian, log_pdf, to_moment
from .losses import LossSpec, total_loss
from .optim import OptimSettings
from .server import ServerState

__all__ = [
    "GriddedDensity",
    "GridTooNarrow",
    "gbi_posterior_grid",
    "auto_grid_1d",
    "l1_distance",
    "fisher_rao_geodesic_1d",
    "gauss_hermite_expectation",
    "certify_conjugate",
    "ConjugateCertificate",
    "InfluenceSetup",
    "pif_curve",
]

BOUNDARY_MASS_TOL = 1e-6


class GridTooNarrow(RobustFedError, ValueError):
    """Too much posterior mass sits at the grid boundary."""


@dataclass(frozen=True)
class GriddedDensity:
    """A 1D or 2D density tabulated on a tensor grid, trapezoid-normalised."""

    axes: tuple[np.ndarray, ...]
    log_density: np.ndarray

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=np.float64) for a in self.axes)
        if len(axes) not in (1, 2):
            raise ValueError("only 1D and 2D grids are supported")
        ld = np.asarray(self.log_density, dtype=np.float64)
        if ld.shape != tuple(a.shape[0] for a in axes):
            raise DimensionMismatch("log_density shape does not match the axes")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "log_density", ld)

    @property
    def ndim(self) -> int:
        return len(self.axes)

    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    def _integrate(self, values: np.ndarray) -> float:
        if self.ndim == 1:
            return float(np.trapezoid(values, self.axes[0]))
        inner = np.trapezoid(values, self.axes[1], axis=1)
        return float(np.trapezoid(inner, self.axes[0]))

    def mass(self) -> float:
        return self._integrate(self.density())

    def normalised(self) -> "GriddedDensity":
        shift = self.log_density.max()
        z = self._integrate(np.exp(self.log_density - shift))
        return GriddedDensity(self.axes, self.log_density - shift - np.log(z))

    def boundary_mass(self) -> float:
        """Mass inside the outermost grid cell ring."""
        f = self.density()
        if self.ndim == 1:
            x = self.axes[0]
            lo = 0.5 * (f[0] + f[1]) * (x[1] - x[0])
            hi = 0.5 * (f[-2] + f[-1]) * (x[-1] - x[-2])
            return float(lo + hi)
        total = self.mass()
        interior = GriddedDensity(
            (self.axes[0][1:-1], self.axes[1][1:-1]), self.log_density[1:-1, 1:-1]
        ).mass()
        return float(total - interior)

    def check_coverage(self):
        if self.boundary_mass() > BOUNDARY_MASS_TOL:
            raise GridTooNarrow(
                f"boundary mass {self.boundary_mass():.2e} exceeds {BOUNDARY_MASS_TOL:.0e}"
            )
        return self

    def mean(self) -> np.ndarray:
        f = self.density()
        if self.ndim == 1:
            return np.array([self._integrate(f * self.axes[0])])
        gx, gy = np.meshgrid(self.axes[0], self.axes[1], indexing="ij")
        return np.array([self._integrate(f * gx), self._integrate(f * gy)])

    def std(self) -> np.ndarray:
        mu = self.mean()
        f = self.density()
        if self.ndim == 1:
            return np.sqrt(np.array([self._integrate(f * (self.axes[0] - mu[0]) ** 2)]))
        gx, gy = np.meshgrid(self.axes[0], self.axes[1], indexing="ij")
        return np.sqrt(
            np.array(
                [self._integrate(f * (gx - mu[0]) ** 2), self._integrate(f * (gy - mu[1]) ** 2)]
            )
        )


def auto_grid_1d(prior: NatGaussian, data=None, sigma: float = 1.0, n: int = 8192) -> np.ndarray:
    """An axis covering the prior ball and the data span with wide margins."""
    m = to_moment(prior)
    lo = float(m.mean[0] - 10.0 * m.std[0])
    hi = float(m.mean[0] + 10.0 * m.std[0])
    if data is not None:
        x = np.asarray(data, dtype=np.float64).reshape(-1)
        if x.size:
            lo = min(lo, float(x.min()) - 10.0 * sigma)
            hi = max(hi, float(x.max()) + 10.0 * sigma)
    return np.linspace(lo, hi, n)


def _grid_points(axes):
    if len(axes) == 1:
        return axes[0].reshape(-1, 1), axes[0].shape
    gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()]), gx.shape


def gbi_posterior_grid(
    prior: NatGaussian,
    loss_spec: LossSpec,
    data,
    beta: float,
    grid=None,
    centre=None,
) -> GriddedDensity:
    """Tabulate prior * exp{-beta * total loss} / Z on a grid.

    ``grid`` is an axis array (1D), a pair of axis arrays (2D), or None for
    an automatic 1D axis.  Raises GridTooNarrow when boundary mass exceeds
    1e-6 after normalisation.
    """
    if grid is None:
        sigma = getattr(loss_spec.model, "sigma", 1.0)
        grid = auto_grid_1d(prior, data if loss_spec.model.kind == "gaussian_location" else None,
                            sigma=sigma)
    axes = (grid,) if isinstance(grid, np.ndarray) else tuple(grid)
    points, shape = _grid_points(axes)
    log_prior = log_pdf(prior, points)
    losses = total_loss(loss_spec, points, data, centre=centre)
    dens = GriddedDensity(axes, (log_prior - beta * losses).reshape(shape)).normalised()
    return dens.check_coverage()


def l1_distance(a: GriddedDensity, b) -> float:
    """Trapezoid integral of |a - b| over a's grid; b may be a Gaussian."""
    if isinstance(b, GriddedDensity):
        if len(a.axes) != len(b.axes) or any(
            x.shape != y.shape or not np.array_equal(x, y) for x, y in zip(a.axes, b.axes)
        ):
            raise DimensionMismatch("grids must coincide for an L1 distance")
        other = b.density()
    elif isinstance(b, NatGaussian):
        points, shape = _grid_points(a.axes)
        other = np.exp(log_pdf(b, points)).reshape(shape)
    else:
        raise TypeError("second argument must be a GriddedDensity or NatGaussian")
    return a._integrate(np.abs(a.density() - other))


def fisher_rao_geodesic_1d(q: MomentGaussian, p: MomentGaussian) -> float:
    """Fisher-Rao distance by numeric arc-length integration.

    Works in the (mu / sqrt(2), sd) upper half-plane, where the information
    metric diag(1/sd^2, 2/sd^2) becomes twice the hyperbolic metric and
    geodesics are vertical lines or semicircles centred on the boundary.
    """
    u1, s1 = float(q.mean[0]) / np.sqrt(2.0), float(q.std[0])
    u2, s2 = float(p.mean[0]) / np.sqrt(2.0), float(p.std[0])
    if np.isclose(u1, u2, rtol=0, atol=1e-14):
        val, _ = integrate.quad(lambda s: 1.0 / s, min(s1, s2), max(s1, s2), epsabs=1e-13)
        return float(np.sqrt(2.0) * val)
    c = (u2**2 + s2**2 - u1**2 - s1**2) / (2.0 * (u2 - u1))
    r = float(np.hypot(u1 - c, s1))
    phi1 = float(np.arctan2(s1, u1 - c))
    phi2 = float(np.arctan2(s2, u2 - c))
    lo, hi = min(phi1, phi2), max(phi1, phi2)
    val, _ = integrate.quad(lambda ph: 1.0 / np.sin(ph), lo, hi, epsabs=1e-13, limit=200)
    return float(np.sqrt(2.0) * val)


@lru_cache(maxsize=8)
def _hermgauss_cached(degree: int):
    return hermgauss(degree)


def gauss_hermite_expectation(f, mean: float, sd: float, degree: int = 96) -> float:
    """E[f(th)] for th ~ N(mean, sd^2) by Gauss-Hermite quadrature."""
    nodes, weights = _hermgauss_cached(degree)
    th = mean + np.sqrt(2.0) * sd * nodes
    return float(np.sum(weights * f(th)) / np.sqrt(np.pi))


@dataclass(frozen=True)
class ConjugateCertificate:
    closed_mean: float
    closed_sd: float
    numeric_mean: float
    numeric_sd: float
    max_diff: float
    tolerance: float
    passed: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def certify_conjugate(
    loss_spec: LossSpec,
    cavity: NatGaussian,
    data,
    beta: float,
    tolerance: float = 1e-6,
    precision_perturbation: float = 0.0,
) -> ConjugateCertificate:
    """Certify a closed-form conjugate update against a numeric argmin.

    The closed form assembles natural parameters exactly as the client
    does; the reference is a scipy minimisation over (mu, log sd) of
    E_q[L] + (1/beta) KL(q : cavity), with both expectations evaluated by
    Gauss-Hermite quadrature -- no shared code with the closed form.
    ``precision_perturbation`` shifts the closed form's quadratic
    coefficient, which is how the negative control is exercised.
    """
    if cavity.dim != 1:
        raise DimensionMismatch("conjugate certification is univariate")
    from .client import _conjugate_update  # local import to avoid cycles at import time

    state = ClientState(
        client_id=0,
        data=data,
        loss_spec=loss_spec,
        divergence_spec=DivergenceSpec.weighted_kl(beta),
        tau=1.0,
        site=SiteFactor.zero(1, diagonal=cavity.diagonal),
    )
    closed = _conjugate_update(cavity, state)
    if precision_perturbation != 0.0:
        prec = closed.precision + (
            precision_perturbation
            if closed.diagonal
            else precision_perturbation * np.eye(1)
        )
        closed = NatGaussian(prec, closed.shift)
    closed_m = to_moment(closed)

    cav_m = to_moment(cavity)
    cav_mu, cav_sd = float(cav_m.mean[0]), float(cav_m.std[0])
    centre = cav_mu

    def objective(xv):
        mu, sd = float(xv[0]), float(np.exp(xv[1]))
        exp_loss = gauss_hermite_expectation(
            lambda th: total_loss(loss_spec, th.reshape(-1, 1), data, centre=centre),
            mu,
            sd,
        )
        # KL(q : cavity) for univariate Gaussians, evaluated from moments
        kl = (
            np.log(cav_sd / sd)
            + (sd**2 + (mu - cav_mu) ** 2) / (2.0 * cav_sd**2)
            - 0.5
        )
        return exp_loss + kl / beta

    x0 = np.array([cav_mu, np.log(cav_sd)])
    res = optimize.minimize(objective, x0, method="BFGS", options={"gtol": 1e-12, "maxiter": 500})
    res = optimize.minimize(
        objective, res.x, method="Nelder-Mead",
        options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 2000},
    )
    num_mu, num_sd = float(res.x[0]), float(np.exp(res.x[1]))
    max_diff = max(abs(num_mu - float(closed_m.mean[0])), abs(num_sd - float(closed_m.std[0])))
    return ConjugateCertificate(
        closed_mean=float(closed_m.mean[0]),
        closed_sd=float(closed_m.std[0]),
        numeric_mean=num_mu,
        numeric_sd=num_sd,
        max_diff=max_diff,
        tolerance=tolerance,
        passed=max_diff < tolerance,
    )


@dataclass(frozen=True)
class InfluenceSetup:
    """A univariate federation run with one designated contaminated client."""

    prior: NatGaussian
    loss_spec: LossSpec
    divergence_spec: DivergenceSpec
    base_data: np.ndarray
    n_clients: int
    tau: float
    rounds: int = 400
    tolerance: float = 1e-8
    contaminated_client: int = 0
    optimizer: OptimSettings = field(default_factory=lambda: OptimSettings(tol=1e-9))

    def partitions(self):
        idx = np.arange(self.base_data.shape[0])
        return np.array_split(idx, self.n_clients)


def _influence_posterior(setup: InfluenceSetup, z: float) -> NatGaussian:
    parts = setup.partitions()
    clients = []
    for cid in range(setup.n_clients):
        x = setup.base_data[parts[cid]]
        if cid == setup.contaminated_client:
            x = np.concatenate([x, [z]])
        clients.append(
            ClientState(
                client_id=cid,
                data=x,
                loss_spec=setup.loss_spec,
                divergence_spec=setup.divergence_spec,
                tau=setup.tau,
                site=SiteFactor.zero(setup.prior.dim, diagonal=setup.prior.diagonal),
                optimizer=setup.optimizer,
            )
        )
    server = ServerState.initial(setup.prior, tolerance=setup.tolerance)
    result = run_federation(server, clients, rounds=setup.rounds)
    return result.server.posterior


def pif_curve(setup: InfluenceSetup, z_grid, reference_z: float = 0.0):
    """Fisher-Rao distance of the converged posterior from the reference run.

    For each z the designated client receives one extra datum at z; the
    curve point is FR(posterior(reference_z) : posterior(z)).
    """
    reference = to_moment(_influence_posterior(setup, reference_z))
    out = []
    for z in np.asarray(z_grid, dtype=np.float64):
        posterior = to_moment(_influence_posterior(setup, float(z)))
        out.append((float(z), fisher_rao_1d(reference, posterior)))
    return out
