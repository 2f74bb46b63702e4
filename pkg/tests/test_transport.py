import socket
import threading
import time

import numpy as np
import pytest

from robustfed import wire
from robustfed.client import ClientState, SiteFactor
from robustfed.divergences import DivergenceSpec
from robustfed.engine import run_federation, run_round
from robustfed.gaussians import MomentGaussian, from_moment, natural_distance
from robustfed.losses import LossSpec, ModelSpec
from robustfed.server import ServerState
from robustfed.transport import (
    InProcessTransport,
    RoundTimeout,
    SocketServerTransport,
    drive,
    run_client_loop,
)

LOC = ModelSpec.gaussian_location(sigma=1.0)


def gauss1(mean, var):
    return from_moment(MomentGaussian(np.array([mean]), np.array([var])))


def make_clients(rng, n_clients=3, tau=None, loss=None):
    tau = tau or 1.0 / n_clients
    data = rng.normal(1.0, 1.5, size=30)
    parts = np.array_split(data, n_clients)
    return [
        ClientState(
            client_id=i,
            data=parts[i],
            loss_spec=loss or LossSpec.nll(LOC),
            divergence_spec=DivergenceSpec.kl(),
            tau=tau,
            site=SiteFactor.zero(1, diagonal=True),
        )
        for i in range(n_clients)
    ]


class TestInProcess:
    def test_transport_drive_matches_engine_run(self, rng):
        clients = make_clients(rng)
        server = ServerState.initial(gauss1(0.0, 1.0))
        direct = run_federation(server, clients, rounds=8)
        via_transport = drive(InProcessTransport(list(clients)), server, rounds=8)
        assert natural_distance(direct.server.posterior, via_transport.server.posterior) == 0.0
        assert direct.telemetry == via_transport.telemetry

    def test_zero_clients_round_is_noop(self):
        server = ServerState.initial(gauss1(0.0, 1.0))
        result = run_round(server, [])
        assert result.server.posterior.same_distribution(server.posterior)
        assert result.converged  # nothing outstanding

    def test_parallel_equals_sequential(self, rng):
        clients = make_clients(rng, n_clients=4, tau=0.25)
        server = ServerState.initial(gauss1(0.0, 1.0))
        seq = run_federation(server, list(clients), rounds=5)
        par = run_federation(server, list(clients), rounds=5, max_workers=4)
        assert natural_distance(seq.server.posterior, par.server.posterior) == 0.0


class TestSocket:
    def run_both(self, rng, rounds=10):
        clients = make_clients(rng)
        server = ServerState.initial(gauss1(0.0, 1.0))
        inproc = drive(InProcessTransport([c for c in clients]), server, rounds=rounds)

        transport = SocketServerTransport("127.0.0.1", 0, n_clients=len(clients), timeout=15.0)
        threads = [
            threading.Thread(target=run_client_loop, args=("127.0.0.1", transport.port, c))
            for c in clients
        ]
        for t in threads:
            t.start()
        transport.accept_clients()
        try:
            remote = drive(transport, server, rounds=rounds)
        finally:
            transport.close()
        for t in threads:
            t.join(timeout=10.0)
        return inproc, remote

    def test_socket_posterior_identical_to_inprocess(self, rng):
        inproc, remote = self.run_both(rng)
        assert natural_distance(inproc.server.posterior, remote.server.posterior) <= 1e-12
        assert inproc.telemetry == remote.telemetry

    def test_timeout_aborts_cleanly(self):
        transport = SocketServerTransport("127.0.0.1", 0, n_clients=1, timeout=0.5)
        got_abort = threading.Event()

        def sleepy_client():
            with socket.create_connection(("127.0.0.1", transport.port), timeout=5.0) as conn:
                conn.settimeout(5.0)
                # read the broadcast but never answer; wait for the abort
                from robustfed.transport import _recv_exact

                wire.read_frame(lambda n: _recv_exact(conn, n))
                msg = wire.read_frame(lambda n: _recv_exact(conn, n))
                if isinstance(msg, wire.Abort):
                    got_abort.set()

        thread = threading.Thread(target=sleepy_client)
        thread.start()
        transport.accept_clients()
        server = ServerState.initial(gauss1(0.0, 1.0))
        try:
            with pytest.raises(RoundTimeout):
                drive(transport, server, rounds=1)
        finally:
            transport.close()
        thread.join(timeout=5.0)
        assert got_abort.wait(timeout=5.0)


class TestRollback:
    def test_aggregation_abort_preserves_previous_state(self):
        # a client sending a precision-destroying delta must not corrupt state
        from robustfed.engine import AggregationAbort
        from robustfed.server import aggregate, server_optimize

        server = ServerState.initial(gauss1(0.0, 1.0))
        bad = wire.Update(0, 1, np.array([-5.0]), np.array([0.0]))

        class BadTransport:
            def round_trip(self, broadcast):
                return [bad]

        with pytest.raises(AggregationAbort) as err:
            drive(BadTransport(), server, rounds=1)
        assert err.value.suspects == [(0, -5.0)]
        # the original state object is untouched (pure-functional rollback)
        assert server.round_no == 0
        assert server.posterior.same_distribution(server.prior)
