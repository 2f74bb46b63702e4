"""Server half of a federation round: aggregation and the global fit.

The server keeps a running sum of client site deltas (its own loss
approximation) and refits the global posterior each round.  Under a KL
server divergence the refit is exact: posterior = prior * exp{-loss sum}
in natural parameters.  Under alpha-Renyi it is an iterative mean-field
fit of  E_q[loss sum] + D_AR(q : prior), offered for experimentation but
outside what the fixed-point theory guarantees.

A KL-path refit whose precision comes out indefinite aborts the round;
aggregation is pure, so the caller simply keeps the previous state, and
the error names the client deltas that drove the precision down.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .divergences import AlphaBlendNotPD, DivergenceSpec, divergence, divergence_grad
from .errors import DimensionMismatch, NotPositiveDefinite, RobustFedError
from .gaussians import MomentGaussian, NatGaussian, from_moment, multiply, to_moment
from .client import SiteFactor
from .optim import OptimSettings, minimize
from . import wire

__all__ = [
    "ServerState",
    "RoundMismatchError",
    "DuplicateClientError",
    "aggregate",
    "server_optimize",
    "check_convergence",
    "pooled_posterior",
]


class RoundMismatchError(RobustFedError, ValueError):
    pass


class DuplicateClientError(RobustFedError, ValueError):
    pass


@dataclass(frozen=True)
class ServerState:
    """Prior, accumulated loss, current posterior and round bookkeeping."""

    prior: NatGaussian
    loss: SiteFactor
    posterior: NatGaussian
    round_no: int = 0
    divergence_spec: DivergenceSpec = field(default_factory=DivergenceSpec.kl)
    tolerance: float = 1e-8
    optimizer: OptimSettings = field(default_factory=OptimSettings)
    update_norms: tuple[float, ...] = ()

    @classmethod
    def initial(
        cls,
        prior: NatGaussian,
        divergence_spec: DivergenceSpec | None = None,
        tolerance: float = 1e-8,
        optimizer: OptimSettings | None = None,
    ) -> "ServerState":
        """Round zero: loss approximation 0, posterior = prior."""
        prior.require_proper("server prior")
        return cls(
            prior=prior,
            loss=SiteFactor.zero(prior.dim, diagonal=prior.diagonal),
            posterior=prior,
            round_no=0,
            divergence_spec=divergence_spec or DivergenceSpec.kl(),
            tolerance=tolerance,
            optimizer=optimizer or OptimSettings(),
        )


def aggregate(state: ServerState, messages: list[wire.Update]) -> ServerState:
    """Fold one round of client updates into the server loss approximation.

    Requires one message per participating client for round state.round_no+1;
    clients that sat the round out simply contribute nothing.
    """
    expected = state.round_no + 1
    seen = set()
    total = SiteFactor.zero(state.prior.dim, diagonal=state.prior.diagonal)
    # canonical client order: float sums then come out bit-identical no
    # matter how the transport happened to deliver the messages
    for m in sorted(messages, key=lambda m: m.client_id):
        if m.round_no != expected:
            raise RoundMismatchError(
                f"update from client {m.client_id} is for round {m.round_no}, expected {expected}"
            )
        if m.client_id in seen:
            raise DuplicateClientError(f"two updates from client {m.client_id}")
        seen.add(m.client_id)
        if m.dim != state.prior.dim:
            raise DimensionMismatch("update dimension does not match the prior")
        total = total.add(SiteFactor(m.delta_precision, m.delta_shift))
    max_norm = max((su.sup_norm() for su in map(_as_site, messages)), default=0.0)
    return replace(
        state,
        loss=state.loss.add(total, round_no=expected),
        round_no=expected,
        update_norms=state.update_norms + (max_norm,),
    )


def _as_site(m: wire.Update) -> SiteFactor:
    return SiteFactor(m.delta_precision, m.delta_shift)


def server_optimize(state: ServerState) -> NatGaussian:
    """Refit the global posterior against the accumulated loss.

    KL: exact, posterior = prior * exp{-loss}; must come out proper.
    alpha-Renyi: deterministic mean-field minimisation of
    E_q[loss] + D_AR(q : prior), warm-started at the KL solution.
    """
    spec = state.divergence_spec
    kl_solution = multiply(state.prior, state.loss.as_factor())
    if spec.kind in ("kl", "weighted_kl"):
        if not kl_solution.is_proper():
            raise NotPositiveDefinite(
                "prior * exp{-loss} is improper; "
                + _blame_clients(state)
            )
        return kl_solution
    if spec.kind != "alpha_renyi":
        raise ValueError(f"server divergence {spec.kind} is not supported")
    prior = state.prior
    d = prior.dim
    start = kl_solution if kl_solution.is_proper() else prior
    m0 = to_moment(start)
    x0 = np.concatenate([m0.mean, np.log(m0.std)])
    dp = state.loss.delta_precision
    dp_diag = dp if dp.ndim == 1 else np.diag(dp)
    ds = state.loss.delta_shift

    def objective(xv):
        mu, log_sd = xv[:d], xv[d:]
        var = np.exp(2.0 * log_sd)
        if dp.ndim == 1:
            quad = float(np.sum(dp * (var + mu**2)))
        else:
            quad = float(np.sum(np.diag(dp) * var) + mu @ dp @ mu)
        val = 0.5 * quad - float(ds @ mu)
        g_mu = (dp * mu if dp.ndim == 1 else dp @ mu) - ds
        g_ls = dp_diag * var
        q = from_moment(MomentGaussian(mu, var))
        try:
            val += divergence(spec, q, prior)
            grad = np.concatenate([g_mu, g_ls]) + divergence_grad(spec, mu, log_sd, prior)
        except AlphaBlendNotPD:
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


def _blame_clients(state: ServerState) -> str:
    return (
        f"aggregation at round {state.round_no} drove the precision indefinite; "
        "inspect the update norms per client and roll back"
    )


def check_convergence(state: ServerState, messages: list[wire.Update]) -> bool:
    """True iff every client's update is below tolerance in sup-norm."""
    worst = max((_as_site(m).sup_norm() for m in messages), default=0.0)
    return worst < state.tolerance


def pooled_posterior(client_posteriors: list[NatGaussian], taus) -> NatGaussian:
    """Normalised weighted geometric mean prod q_m^tau_m in natural parameters."""
    taus = np.asarray(taus, dtype=np.float64)
    if len(client_posteriors) != taus.shape[0]:
        raise ValueError("one weight per posterior required")
    if np.any(taus < 0):
        raise ValueError("pool weights must be non-negative")
    if abs(float(taus.sum()) - 1.0) > 1e-12:
        raise ValueError(f"pool weights must sum to 1, got {taus.sum()!r}")
    dim = client_posteriors[0].dim
    diagonal = all(q.diagonal for q in client_posteriors)
    prec = np.zeros(dim) if diagonal else np.zeros((dim, dim))
    shift = np.zeros(dim)
    for tau, q in zip(taus, client_posteriors):
        if q.dim != dim:
            raise DimensionMismatch("pooled posteriors must share a dimension")
        prec = prec + tau * (q.precision if diagonal else q.precision_matrix)
        shift = shift + tau * q.shift
    return NatGaussian(prec, shift)
