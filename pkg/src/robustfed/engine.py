"""Synchronous round scheduling over interchangeable transports.

One round is: broadcast the posterior, run every client in parallel,
collect their updates, aggregate, refit.  Both transports speak the wire
codec, so an in-process run and a socket run of the same configuration
produce identical bytes and identical posteriors.

Aggregation failures (an indefinite KL-path refit) roll the round back:
states are immutable, so the previous server state simply remains current,
and the raised error names the suspect client deltas.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import wire
from .client import ClientState, SiteFactor, client_round
from .errors import NotPositiveDefinite, RobustFedError
from .gaussians import NatGaussian, natural_distance, to_moment
from .server import ServerState, aggregate, check_convergence, server_optimize

log = logging.getLogger(__name__)

__all__ = ["RoundResult", "RunResult", "AggregationAbort", "run_round", "run_federation"]


class AggregationAbort(RobustFedError, RuntimeError):
    """The server refit failed; the round was rolled back."""

    def __init__(self, message, suspects=None):
        super().__init__(message)
        self.suspects = suspects or []


@dataclass(frozen=True)
class RoundResult:
    server: ServerState
    clients: tuple[ClientState, ...]
    messages: tuple[wire.Update, ...]
    client_posteriors: tuple[NatGaussian, ...]
    max_update_norm: float
    converged: bool


@dataclass(frozen=True)
class RunResult:
    server: ServerState
    clients: tuple[ClientState, ...]
    rounds: int
    converged: bool
    telemetry: tuple[dict, ...]
    round_posteriors: tuple[NatGaussian, ...] = ()
    round_client_posteriors: tuple[tuple[NatGaussian, ...], ...] = ()


def _run_clients(q_s, clients, round_no, regularizer, max_workers):
    """Evaluate all clients for a round; results ordered by client index."""

    def work(state):
        # run through the codec so in-process rounds exercise the same bytes
        bcast = wire.decode(wire.encode(wire.Broadcast.from_factor(round_no, q_s)))
        return client_round(bcast.factor(), state, round_no, regularizer=regularizer)

    if max_workers and max_workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(work, clients))
    else:
        results = [work(state) for state in clients]
    messages = [wire.decode(wire.encode(m)) for m, _ in results]
    new_states = [s for _, s in results]
    return messages, new_states


def run_round(
    server: ServerState,
    clients: list[ClientState],
    regularizer: str = "cavity",
    max_workers: int | None = None,
) -> RoundResult:
    """One synchronous round; a no-op when there are no clients."""
    round_no = server.round_no + 1
    messages, new_clients = _run_clients(
        server.posterior, clients, round_no, regularizer, max_workers
    )
    new_server = aggregate(server, messages)
    try:
        posterior = server_optimize(new_server)
    except NotPositiveDefinite as err:
        suspects = _suspect_clients(messages)
        raise AggregationAbort(
            f"round {round_no} rolled back: {err}; suspect client deltas {suspects}",
            suspects=suspects,
        ) from err
    new_server = replace(new_server, posterior=posterior)
    client_posteriors = tuple(
        _reconstruct_local(server.posterior, m, c) for m, c in zip(messages, clients)
    )
    converged = check_convergence(new_server, messages)
    norm = new_server.update_norms[-1] if new_server.update_norms else 0.0
    return RoundResult(
        server=new_server,
        clients=tuple(new_clients),
        messages=tuple(messages),
        client_posteriors=client_posteriors,
        max_update_norm=norm,
        converged=converged,
    )


def _reconstruct_local(q_s_prev: NatGaussian, msg: wire.Update, state: ClientState):
    """Invert the damped update: q_m = q_s + delta / tau in natural parameters."""
    site = SiteFactor(msg.delta_precision, msg.delta_shift).scaled(1.0 / state.tau)
    prec = (
        q_s_prev.precision + site.delta_precision
        if q_s_prev.diagonal == (site.delta_precision.ndim == 1)
        else q_s_prev.precision_matrix + _dense(site.delta_precision)
    )
    return NatGaussian(prec, q_s_prev.shift + site.delta_shift)


def _dense(a):
    return np.diag(a) if a.ndim == 1 else a


def _suspect_clients(messages):
    out = []
    for m in messages:
        dp = m.delta_precision
        min_eig = float(dp.min()) if dp.ndim == 1 else float(np.linalg.eigvalsh(dp)[0])
        if min_eig < 0:
            out.append((m.client_id, min_eig))
    return out


def run_federation(
    server: ServerState,
    clients: list[ClientState],
    rounds: int,
    regularizer: str = "cavity",
    max_workers: int | None = None,
    keep_posteriors: bool = False,
) -> RunResult:
    """Iterate rounds until convergence or the round budget is exhausted."""
    telemetry = []
    round_posteriors = []
    round_client_posteriors = []
    converged = False
    t = 0
    for t in range(1, rounds + 1):
        result = run_round(server, clients, regularizer=regularizer, max_workers=max_workers)
        server, clients = result.server, list(result.clients)
        m = to_moment(server.posterior)
        telemetry.append(
            {
                "round": t,
                "max_update_norm": result.max_update_norm,
                "posterior_mean": m.mean.tolist(),
                "posterior_std": m.std.tolist(),
            }
        )
        if keep_posteriors:
            round_posteriors.append(server.posterior)
            round_client_posteriors.append(result.client_posteriors)
        if result.converged:
            converged = True
            break
    return RunResult(
        server=server,
        clients=tuple(clients),
        rounds=t,
        converged=converged,
        telemetry=tuple(telemetry),
        round_posteriors=tuple(round_posteriors),
        round_client_posteriors=tuple(round_client_posteriors),
    )
