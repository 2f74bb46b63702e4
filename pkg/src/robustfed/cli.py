"""Command-line entry points.

    robustfed clutter|influence|logreg|theorems [--config F] [--seed N]
              [--out DIR] [--transport inproc|socket[:PORT]] [--no-plots]
    robustfed serve  [--config F] [--host H] [--transport socket:PORT] [--out DIR]
    robustfed client --client-id N [--config F] [--host H] [--transport socket:PORT]

Experiment commands exit 0 iff every configured assertion passed.  `serve`
runs the aggregation side of one federation over real sockets; `client`
joins it, deriving its data shard deterministically from the shared config
so that no observation ever travels over the wire.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .client import ClientState, SiteFactor
from .config import RunConfig, load_config, parse_divergence, parse_loss
from .datagen import gen_clutter, gen_logreg_2d, partition_homogeneous
from .engine import RunResult
from .errors import RobustFedError
from .experiments import (
    TELEMETRY_HEADER,
    _optimizer_from,
    _prior_from,
    _telemetry_rows,
    _write_csv,
    _write_manifest,
    run_experiment,
)
from .gaussians import to_moment
from .losses import ModelSpec
from .server import ServerState
from .transport import SocketServerTransport, drive, run_client_loop


def _add_common(parser):
    parser.add_argument("--config", help="TOML run configuration", default=None)
    parser.add_argument("--seed", type=int, help="override the data seed", default=None)
    parser.add_argument("--out", help="output directory", default=None)
    parser.add_argument("--transport", help="inproc or socket[:PORT]", default=None)
    parser.add_argument("--no-plots", action="store_true", help="skip figure rendering")


def _load(args, experiment=None) -> RunConfig:
    overrides = {}
    if experiment is not None:
        overrides["run.experiment"] = experiment
    if args.seed is not None:
        overrides["run.seed"] = args.seed
        overrides["data.seed"] = args.seed
    if args.out is not None:
        overrides["run.out"] = args.out
    if args.transport is not None:
        overrides["run.transport"] = args.transport
    if getattr(args, "no_plots", False):
        overrides["run.plots"] = False
    return load_config(args.config, overrides)


def _single_run_setup(cfg: RunConfig):
    """The one federation the serve/client pair executes.

    Location models train on the contaminated location data, the logistic
    model on the mislabelled two-blob data; every participant regenerates
    the same shards from the shared seeds.
    """
    kind = cfg["model"]["kind"]
    n = cfg["data"]["n"]
    m = cfg["partition"]["clients"]
    parts = partition_homogeneous(n, m, seed=cfg["partition"]["seed"])
    if kind == "gaussian_location":
        model = ModelSpec.gaussian_location(sigma=cfg["model"]["sigma"])
        data = gen_clutter(n, cfg["data"]["epsilon"], seed=cfg["data"]["seed"])
        shards = [data.x[p] for p in parts]
    elif kind == "bernoulli_logit":
        model = ModelSpec.bernoulli_logit(n_features=cfg["model"]["n_features"])
        data = gen_logreg_2d(n, cfg["data"]["outliers"], seed=cfg["data"]["seed"])
        parts = partition_homogeneous(data.x.shape[0], m, seed=cfg["partition"]["seed"])
        shards = [(data.x[p], data.y[p]) for p in parts]
    else:
        raise RobustFedError(f"serve/client does not support model kind {kind!r}")
    loss = parse_loss(cfg["client"]["loss"], model)
    div = parse_divergence(cfg["client"]["divergence"])
    prior = _prior_from(cfg, model.theta_dim)
    tau = cfg["client"]["tau"] or 1.0 / m
    return prior, shards, loss, div, tau


def _client_state(cfg: RunConfig, client_id: int) -> ClientState:
    prior, shards, loss, div, tau = _single_run_setup(cfg)
    return ClientState(
        client_id=client_id,
        data=shards[client_id],
        loss_spec=loss,
        divergence_spec=div,
        tau=tau,
        site=SiteFactor.zero(prior.dim, diagonal=True),
        optimizer=_optimizer_from(cfg, seed=client_id),
        hard_fail_improper_cavity=cfg["client"]["hard_fail_improper_cavity"],
    )


def cmd_serve(args) -> int:
    cfg = _load(args)
    if not cfg.transport.startswith("socket"):
        print("serve requires a socket transport, e.g. --transport socket:7721",
              file=sys.stderr)
        return 2
    prior, shards, _, _, _ = _single_run_setup(cfg)
    server = ServerState.initial(prior, tolerance=cfg["run"]["tolerance"])
    transport = SocketServerTransport(args.host, cfg.socket_port, n_clients=len(shards),
                                      timeout=cfg["run"]["timeout"])
    print(f"listening on {args.host}:{transport.port}, waiting for {len(shards)} client(s)")
    transport.accept_clients()
    try:
        result: RunResult = drive(transport, server, cfg["run"]["rounds"])
    finally:
        transport.close()
    outdir = Path(cfg["run"]["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    _write_csv(outdir / "telemetry.csv", TELEMETRY_HEADER, _telemetry_rows("serve", result))
    mom = to_moment(result.server.posterior)
    _write_manifest(outdir, cfg, {
        "converged": result.converged,
        "rounds": result.rounds,
        "posterior_mean": mom.mean.tolist(),
        "posterior_std": mom.std.tolist(),
    })
    print(f"finished after {result.rounds} round(s); converged={result.converged}")
    print(f"posterior mean {np.array2string(mom.mean, precision=6)}")
    return 0


def cmd_client(args) -> int:
    cfg = _load(args)
    if not cfg.transport.startswith("socket"):
        print("client requires a socket transport, e.g. --transport socket:7721",
              file=sys.stderr)
        return 2
    state = _client_state(cfg, args.client_id)
    run_client_loop(args.host, cfg.socket_port, state, timeout=cfg["run"]["timeout"])
    return 0


def cmd_experiment(args, name: str) -> int:
    cfg = _load(args, experiment=name)
    try:
        outcome = run_experiment(cfg)
    except RobustFedError as err:
        json.dump({"error": type(err).__name__, "message": str(err)}, sys.stderr, indent=2)
        sys.stderr.write("\n")
        return 2
    print(f"{outcome.name}: {'PASS' if outcome.passed else 'FAIL'}")
    for path in outcome.files:
        print(f"  wrote {path}")
    return 0 if outcome.passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="robustfed",
                                     description="robust federated variational inference")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("clutter", "influence", "logreg", "theorems"):
        p = sub.add_parser(name, help=f"run the {name} experiment")
        _add_common(p)
    p_serve = sub.add_parser("serve", help="run the aggregation server over sockets")
    _add_common(p_serve)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_client = sub.add_parser("client", help="join a served federation")
    _add_common(p_client)
    p_client.add_argument("--host", default="127.0.0.1")
    p_client.add_argument("--client-id", type=int, required=True)
    args = parser.parse_args(argv)
    if args.command == "serve":
        return cmd_serve(args)
    if args.command == "client":
        return cmd_client(args)
    return cmd_experiment(args, args.command)


if __name__ == "__main__":
    sys.exit(main())
