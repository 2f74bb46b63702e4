"""Client half of a federation round.

Each round a client (1) divides its own accumulated site out of the server
posterior to obtain the cavity, its effective local prior, (2) fits a local
variational posterior against the cavity, (3) emits the damped natural-
parameter difference tau * (q_m - q_s) as its update, and (4) folds that
update into its site.  Everything is pure: a round maps (server posterior,
state) to (message, new state).

The local fit is conjugate (exact natural-parameter arithmetic) for the
negative log-likelihood and for score matching on the Gaussian location
model under KL-family divergences; any other pairing runs the deterministic
iterative optimiser over mean-field (mu, log sd) coordinates.

Cavities may come out indefinite when another client's site overshoots.
They are returned flagged rather than rejected; the round-level repair
shrinks this client's most recent delta by halves (at most 10 times,
logged) until the cavity is proper, or hard-fails if so configured.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .divergences import AlphaBlendNotPD, DivergenceSpec, divergence, divergence_grad
from .errors import DimensionMismatch, NotPositiveDefinite
from .gaussians import MomentGaussian, NatGaussian, divide, from_moment, to_moment
from .losses import (
    LossSpec,
    MCConfig,
    as_location_data,
    data_count,
    expected_loss,
    location_kl_objective,
    loss_grad,
    score_matching_coeffs,
)
from .optim import OptimSettings, minimize
from . import wire

log = logging.getLogger(__name__)

__all__ = [
    "SiteFactor",
    "ClientState",
    "compute_cavity",
    "local_optimize",
    "make_update",
    "client_round",
]

CAVITY_EIG_FLOOR = 1e-8
MAX_REPAIR_HALVINGS = 10


@dataclass(frozen=True)
class SiteFactor:
    """A client's accumulated quadratic loss approximation.

    Encodes lam(th) = 1/2 th' dP th - ds' th (constant dropped), stored as
    the natural-parameter delta (dP, ds).  May be indefinite; starts at zero.
    """

    delta_precision: np.ndarray
    delta_shift: np.ndarray
    round_updated: int = 0

    def __post_init__(self):
        dp = np.asarray(self.delta_precision, dtype=np.float64)
        ds = np.asarray(self.delta_shift, dtype=np.float64)
        if dp.ndim == 2:
            dp = 0.5 * (dp + dp.T)
        elif dp.ndim != 1:
            raise ValueError("delta_precision must be a vector or square matrix")
        dp.flags.writeable = False
        ds.flags.writeable = False
        object.__setattr__(self, "delta_precision", dp)
        object.__setattr__(self, "delta_shift", ds)

    @classmethod
    def zero(cls, dim: int, diagonal: bool = False) -> "SiteFactor":
        prec = np.zeros(dim) if diagonal else np.zeros((dim, dim))
        return cls(prec, np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.delta_shift.shape[0]

    def as_factor(self) -> NatGaussian:
        """The factor exp{-lam} this site multiplies into the posterior."""
        return NatGaussian(self.delta_precision, self.delta_shift)

    def add(self, other: "SiteFactor", round_no: int | None = None) -> "SiteFactor":
        if self.dim != other.dim:
            raise DimensionMismatch("site dims differ")
        if self.delta_precision.ndim == other.delta_precision.ndim:
            dp = self.delta_precision + other.delta_precision
        else:
            dp = _densify(self.delta_precision) + _densify(other.delta_precision)
        return SiteFactor(
            dp,
            self.delta_shift + other.delta_shift,
            self.round_updated if round_no is None else round_no,
        )

    def scaled(self, factor: float) -> "SiteFactor":
        return SiteFactor(factor * self.delta_precision, factor * self.delta_shift,
                          self.round_updated)

    def sup_norm(self) -> float:
        a = float(np.abs(self.delta_precision).max()) if self.delta_precision.size else 0.0
        b = float(np.abs(self.delta_shift).max()) if self.delta_shift.size else 0.0
        return max(a, b)


def _densify(arr: np.ndarray) -> np.ndarray:
    return np.diag(arr) if arr.ndim == 1 else arr


@dataclass(frozen=True)
class ClientState:
    """Everything a client needs across rounds; replaced, never mutated."""

    client_id: int
    data: object
    loss_spec: LossSpec
    divergence_spec: DivergenceSpec
    tau: float
    site: SiteFactor
    optimizer: OptimSettings = field(default_factory=OptimSettings)
    last_delta: SiteFactor | None = None
    hard_fail_improper_cavity: bool = False

    def __post_init__(self):
        if not (0.0 < self.tau <= 1.0):
            raise ValueError("damping tau must lie in (0, 1]")

    @property
    def n_data(self) -> int:
        return data_count(self.loss_spec, self.data)


def compute_cavity(q_s: NatGaussian, site: SiteFactor) -> NatGaussian:
    """Divide the site out of the server posterior.  May be improper."""
    if q_s.dim != site.dim:
        raise DimensionMismatch("posterior and site dims differ")
    return divide(q_s, site.as_factor())


def _kl_weight(spec: DivergenceSpec) -> float | None:
    if spec.kind == "kl":
        return 1.0
    if spec.kind == "weighted_kl":
        return spec.w
    return None


def _conjugate_update(cavity: NatGaussian, state: ClientState) -> NatGaussian:
    """Exact argmin of E_q[L] + (1/w) KL(q : cavity) in natural parameters.

    q ~ cavity * exp{-w L}: nll adds (w n / s^2) I and (w / s^2) sum x_i;
    score matching adds 2 w n B to the precision and subtracts w n b from
    the shift, with (B, b) the empirical-mean quadratic coefficients.
    """
    spec = state.loss_spec
    w = _kl_weight(state.divergence_spec)
    sigma = spec.model.sigma
    n = state.n_data
    x = as_location_data(state.data)
    if spec.kind == "nll":
        add_prec = w * n / sigma**2
        add_shift = w * np.sum(x, axis=0) / sigma**2
        if cavity.diagonal:
            prec = cavity.precision + add_prec
        else:
            prec = cavity.precision + add_prec * np.eye(cavity.dim)
        return NatGaussian(prec, cavity.shift + add_shift, cavity.log_offset)
    # score matching
    b_mat, b_vec = score_matching_coeffs(spec, state.data, to_moment(cavity).mean)
    if cavity.diagonal:
        prec = cavity.precision + 2.0 * w * n * np.diag(b_mat)
    else:
        prec = cavity.precision + 2.0 * w * n * b_mat
    return NatGaussian(prec, cavity.shift - w * n * b_vec, cavity.log_offset)


def _mean_field_cavity_precision(cavity: NatGaussian) -> np.ndarray | None:
    """Diagonal of the cavity precision, or None when truly dense."""
    if cavity.diagonal:
        return cavity.precision
    off = cavity.precision - np.diag(np.diag(cavity.precision))
    if np.abs(off).max() == 0.0:
        return np.diag(cavity.precision)
    return None


def _iterative_update(cavity: NatGaussian, state: ClientState) -> NatGaussian:
    """Mean-field fit of E_q[L] + D(q : cavity) by deterministic descent."""
    spec = state.loss_spec
    mc = MCConfig(seed=state.optimizer.seed, n_samples=state.optimizer.n_samples)
    cav_m = to_moment(cavity)
    centre = cav_m.mean
    x0 = np.concatenate([cav_m.mean, np.log(cav_m.std)])
    d = cavity.dim

    cav_diag = _mean_field_cavity_precision(cavity)
    kl_w = _kl_weight(state.divergence_spec)
    if spec.model.kind == "gaussian_location" and kl_w is not None and cav_diag is not None:
        # single-pass closed forms for the hot path
        objective = location_kl_objective(
            spec, state.data, centre, cav_diag, cav_m.mean, w=kl_w
        )
    else:

        def objective(xv):
            mu, log_sd = xv[:d], xv[d:]
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                var = np.exp(2.0 * log_sd)
                if not np.all(np.isfinite(var)) or np.any(var <= 0.0):
                    return np.inf, np.zeros(2 * d)
                try:
                    q = from_moment(MomentGaussian(mu, var))
                    val = expected_loss(spec, q, state.data, mc=mc, centre=centre)
                    val += divergence(state.divergence_spec, q, cavity)
                    grad = loss_grad(spec, mu, log_sd, state.data, mc=mc, centre=centre)
                    grad = grad + divergence_grad(state.divergence_spec, mu, log_sd, cavity)
                except (AlphaBlendNotPD, NotPositiveDefinite):
                    # outside the closed forms' validity: repel the line search
                    return np.inf, np.zeros(2 * d)
            return val, grad

    res = minimize(
        objective,
        x0,
        tol=state.optimizer.tol,
        max_iter=state.optimizer.max_iter,
        step0=state.optimizer.step0,
    )
    mu, log_sd = res.x[:d], res.x[d:]
    return from_moment(MomentGaussian(mu, np.exp(2.0 * log_sd)))


def local_optimize(cavity: NatGaussian, state: ClientState) -> NatGaussian:
    """The round's local posterior q_m given a proper cavity."""
    if not cavity.is_proper():
        raise NotPositiveDefinite(
            "local_optimize needs a proper cavity; repair or hard-fail upstream"
        )
    if state.n_data == 0:
        return cavity  # divergence minimum: nothing to learn
    if state.loss_spec.conjugate_eligible and _kl_weight(state.divergence_spec) is not None:
        return _conjugate_update(cavity, state)
    return _iterative_update(cavity, state)


def make_update(q_m: NatGaussian, q_s_prev: NatGaussian, tau: float) -> SiteFactor:
    """Damped log-ratio update tau * (q_m - q_s) as a site delta."""
    if q_m.dim != q_s_prev.dim:
        raise DimensionMismatch("posterior dims differ")
    if not (0.0 < tau <= 1.0):
        raise ValueError("tau must lie in (0, 1]")
    if q_m.diagonal == q_s_prev.diagonal:
        dp = tau * (q_m.precision - q_s_prev.precision)
    else:
        dp = tau * (q_m.precision_matrix - q_s_prev.precision_matrix)
    return SiteFactor(dp, tau * (q_m.shift - q_s_prev.shift))


def _repair_cavity(q_s: NatGaussian, state: ClientState) -> tuple[NatGaussian, ClientState]:
    cavity = compute_cavity(q_s, state.site)
    if _min_eig(cavity) >= CAVITY_EIG_FLOOR:
        return cavity, state
    if state.hard_fail_improper_cavity or state.last_delta is None:
        raise NotPositiveDefinite(
            f"client {state.client_id}: improper cavity and repair unavailable"
        )
    site = state.site
    delta = state.last_delta
    for halving in range(1, MAX_REPAIR_HALVINGS + 1):
        site = site.add(delta.scaled(-(0.5**halving)))
        delta_kept = delta.scaled(0.5**halving)
        cavity = compute_cavity(q_s, site)
        if _min_eig(cavity) >= CAVITY_EIG_FLOOR:
            log.warning(
                "client %d: improper cavity repaired after %d halving(s) of the last delta",
                state.client_id,
                halving,
            )
            return cavity, replace(state, site=site, last_delta=delta_kept)
        delta = delta_kept
    raise NotPositiveDefinite(
        f"client {state.client_id}: cavity still improper after {MAX_REPAIR_HALVINGS} halvings"
    )


def _min_eig(factor: NatGaussian) -> float:
    if factor.diagonal:
        return float(factor.precision.min())
    return float(np.linalg.eigvalsh(factor.precision)[0])


def client_round(
    q_s: NatGaussian,
    state: ClientState,
    round_no: int,
    regularizer: str = "cavity",
) -> tuple[wire.Update, ClientState]:
    """One full client step: cavity -> optimise -> damped update -> accumulate.

    ``regularizer`` selects what anchors the local fit: the cavity (the
    protocol), or ``previous_posterior`` which regularises against q_s
    itself -- deliberately wrong, kept for falsification experiments.
    """
    if regularizer not in ("cavity", "previous_posterior"):
        raise ValueError(f"unknown regularizer {regularizer!r}")
    if regularizer == "cavity":
        cavity, state = _repair_cavity(q_s, state)
    else:
        cavity = q_s
    q_m = local_optimize(cavity, state)
    delta = make_update(q_m, q_s, state.tau)
    new_site = state.site.add(delta, round_no=round_no)
    new_state = replace(state, site=new_site, last_delta=delta)
    msg = wire.Update(
        client_id=state.client_id,
        round_no=round_no,
        delta_precision=delta.delta_precision,
        delta_shift=delta.delta_shift,
    )
    return msg, new_state
