"""In-process and socket transports speaking the same round protocol.

Both expose ``round_trip(broadcast) -> list[Update]``: deliver the
broadcast to every client, wait for one update each.  The in-process
transport holds the client states itself and evaluates them (optionally on
a thread pool); the socket transport serves one blocking connection per
remote client and a timeout on any of them aborts the round for everyone.

``drive`` then runs the full synchronous loop on top of either transport,
so a federation run is transport-agnostic by construction.
"""

from __future__ import annotations

import logging
import socket
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import wire
from .client import ClientState, client_round
from .engine import AggregationAbort, RunResult, _suspect_clients
from .errors import NotPositiveDefinite, RobustFedError
from .gaussians import to_moment
from .server import ServerState, aggregate, check_convergence, server_optimize

log = logging.getLogger(__name__)

__all__ = [
    "InProcessTransport",
    "SocketServerTransport",
    "RoundTimeout",
    "drive",
    "serve_client",
    "run_client_loop",
]

DEFAULT_TIMEOUT = 30.0


class RoundTimeout(RobustFedError, RuntimeError):
    """A client failed to answer within the timeout; the round was aborted."""


class InProcessTransport:
    """Clients evaluated in this process, through the wire codec."""

    def __init__(self, clients: list[ClientState], max_workers: int | None = None,
                 regularizer: str = "cavity"):
        self.clients = list(clients)
        self.max_workers = max_workers
        self.regularizer = regularizer

    def round_trip(self, broadcast: wire.Broadcast) -> list[wire.Update]:
        bcast = wire.decode(wire.encode(broadcast))

        def work(state):
            return client_round(
                bcast.factor(), state, bcast.round_no, regularizer=self.regularizer
            )

        if self.max_workers and self.max_workers > 1 and len(self.clients) > 1:
            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                results = list(pool.map(work, self.clients))
        else:
            results = [work(c) for c in self.clients]
        self.clients = [s for _, s in results]
        return [wire.decode(wire.encode(m)) for m, _ in results]

    def close(self):
        pass


def _recv_exact(conn: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = conn.recv(n - len(buf))
        if not chunk:
            return buf
        buf += chunk
    return buf


def _send(conn: socket.socket, msg) -> None:
    conn.sendall(wire.frame(msg))


class SocketServerTransport:
    """One blocking connection per remote client; aggregation stays serial."""

    def __init__(self, host: str, port: int, n_clients: int, timeout: float = DEFAULT_TIMEOUT):
        self.timeout = timeout
        self.n_clients = n_clients
        self.listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.listener.bind((host, port))
        self.listener.listen(n_clients)
        self.port = self.listener.getsockname()[1]
        self.connections: list[socket.socket] = []

    def accept_clients(self):
        """Block until every expected client has connected."""
        self.listener.settimeout(self.timeout)
        while len(self.connections) < self.n_clients:
            conn, _addr = self.listener.accept()
            conn.settimeout(self.timeout)
            self.connections.append(conn)
        return self

    def round_trip(self, broadcast: wire.Broadcast) -> list[wire.Update]:
        data = wire.frame(broadcast)
        for conn in self.connections:
            conn.sendall(data)
        updates = []
        try:
            for conn in self.connections:
                msg = wire.read_frame(lambda n, c=conn: _recv_exact(c, n))
                if isinstance(msg, wire.Abort):
                    raise RoundTimeout(f"client aborted: {msg.reason}")
                if not isinstance(msg, wire.Update):
                    raise RoundTimeout(f"unexpected {type(msg).__name__} instead of an update")
                updates.append(msg)
        except (socket.timeout, TimeoutError) as err:
            self.abort(f"round {broadcast.round_no} timed out")
            raise RoundTimeout(f"round {broadcast.round_no} timed out waiting for a client") from err
        return updates

    def abort(self, reason: str):
        for conn in self.connections:
            try:
                _send(conn, wire.Abort(reason))
            except OSError:
                pass

    def close(self, reason: str = "run complete"):
        self.abort(reason)
        for conn in self.connections:
            try:
                conn.close()
            except OSError:
                pass
        self.listener.close()


def drive(transport, server: ServerState, rounds: int) -> RunResult:
    """Run the synchronous loop over any transport; rollback on failures."""
    telemetry = []
    converged = False
    t = 0
    for t in range(1, rounds + 1):
        broadcast = wire.Broadcast.from_factor(t, server.posterior)
        messages = transport.round_trip(broadcast)
        new_server = aggregate(server, messages)
        try:
            posterior = server_optimize(new_server)
        except NotPositiveDefinite as err:
            raise AggregationAbort(
                f"round {t} rolled back: {err}; suspect client deltas "
                f"{_suspect_clients(messages)}",
                suspects=_suspect_clients(messages),
            ) from err
        server = replace(new_server, posterior=posterior)
        m = to_moment(server.posterior)
        telemetry.append(
            {
                "round": t,
                "max_update_norm": server.update_norms[-1],
                "posterior_mean": m.mean.tolist(),
                "posterior_std": m.std.tolist(),
            }
        )
        if check_convergence(server, messages):
            converged = True
            break
    return RunResult(
        server=server,
        clients=tuple(getattr(transport, "clients", ())),
        rounds=t,
        converged=converged,
        telemetry=tuple(telemetry),
    )


def serve_client(conn: socket.socket, state: ClientState, regularizer: str = "cavity"):
    """Answer broadcasts on one connection until an abort or EOF arrives."""
    while True:
        try:
            msg = wire.read_frame(lambda n: _recv_exact(conn, n))
        except wire.TruncatedFrame:
            return state  # peer closed
        if isinstance(msg, wire.Abort):
            log.info("client %d leaving: %s", state.client_id, msg.reason)
            return state
        if isinstance(msg, wire.Broadcast):
            update, state = client_round(
                msg.factor(), state, msg.round_no, regularizer=regularizer
            )
            _send(conn, update)
        # Acks are ignorable keep-alives


def run_client_loop(host: str, port: int, state: ClientState,
                    timeout: float = DEFAULT_TIMEOUT, regularizer: str = "cavity"):
    """Connect to a serving host and participate until told to stop."""
    with socket.create_connection((host, port), timeout=timeout) as conn:
        conn.settimeout(timeout)
        return serve_client(conn, state, regularizer=regularizer)
