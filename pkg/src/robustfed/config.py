"""Run configuration: one TOML file of nested tables, schema-checked.

Every knob has a default, the merged result is echoed verbatim into the
output manifest, and CLI flags override individual fields.  Losses and
divergences are written either as bare kind strings ("nll", "kl") or as
tables carrying their hyperparameters:

    [client]
    loss = { kind = "beta", beta = 0.5 }
    divergence = { kind = "alpha_renyi", alpha = 1.5 }
    loss = { kind = "score_matching", kernel = { kind = "se", beta_w = 1.0, c = 1.0 } }
"""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .divergences import DivergenceSpec
from .losses import LossSpec, ModelSpec, WeightKernel

__all__ = [
    "RunConfig",
    "ConfigError",
    "load_config",
    "parse_loss",
    "parse_divergence",
    "parse_model",
]


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "run": {
        "experiment": "clutter",
        "seed": 0,
        "rounds": 60,
        "tolerance": 1e-8,
        "transport": "inproc",
        "out": "results",
        "plots": True,
        "timeout": 30.0,
    },
    "model": {
        "kind": "gaussian_location",
        "sigma": 1.0,
        "n_features": 1,
        "classes": 2,
    },
    "prior": {
        "mean": [0.0],
        "variance": [1.0],
    },
    "data": {
        "n": 100,
        "epsilon": 0.25,
        "seed": 7,
        "outliers": 20,
        "df": 4.0,
    },
    "partition": {
        "clients": 5,
        "policy": "homogeneous",
        "seed": 3,
    },
    "client": {
        "loss": "nll",
        "divergence": "kl",
        "tau": 0.0,  # 0 means the 1/M default
        "max_iter": 5000,
        "opt_tol": 1e-8,
        "step0": 1.0,
        "mc_samples": 256,
        "hard_fail_improper_cavity": False,
    },
    "server": {
        "divergence": "kl",
    },
    "predict": {
        "kappa": "pi",
    },
    "influence": {
        "z_max": 20.0,
        "z_steps": 21,
        "clients": 7,
        "n": 99,
        "losses": ["nll", "beta", "gamma", "sm_se", "sm_imq"],
        "rounds": 300,
    },
    "clutter": {
        "losses": ["nll", "beta", "gamma", "sm_constant", "sm_se", "sm_imq"],
        "seeds": 20,
        "rounds": 150,
    },
    "logreg": {
        "seeds": 10,
        "grid_lo": -6.0,
        "grid_hi": 6.0,
        "grid_steps": 20,
        "beta": 0.7,
        "alpha": 1.5,
        "rounds": 15,
        "opt_tol": 1e-6,
        "tolerance": 1e-5,
        "prior_variance": 10.0,
    },
    "theorems": {
        "which": ["gbi", "geometric", "pool", "fixed_point", "conjugate", "cavity"],
    },
}

# Shorthand loss names accepted anywhere a loss list appears.
LOSS_SHORTHAND = {
    "nll": {"kind": "nll"},
    "beta": {"kind": "beta", "beta": 0.5},
    "gamma": {"kind": "gamma", "gamma": 1.5},
    "gce": {"kind": "gce", "delta": 0.5},
    "sm_constant": {"kind": "score_matching", "kernel": {"kind": "constant", "beta_w": 1.0}},
    "sm_se": {"kind": "score_matching", "kernel": {"kind": "se", "beta_w": 1.0, "c": 1.0}},
    "sm_imq": {
        "kind": "score_matching",
        "kernel": {"kind": "imq", "beta_w": 1.0, "c": 1.0, "a": 1.0},
    },
}


def _merge(defaults, override, path=""):
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    """The merged configuration tree; sections are plain dicts."""

    tree: dict

    def __getitem__(self, section: str) -> dict:
        return self.tree[section]

    def manifest(self) -> dict:
        return copy.deepcopy(self.tree)

    def override(self, section: str, key: str, value) -> "RunConfig":
        patch = {section: {key: value}}
        return RunConfig(_merge(self.tree, patch))

    @property
    def transport(self) -> str:
        return self.tree["run"]["transport"]

    @property
    def socket_port(self) -> int:
        t = self.transport
        if t.startswith("socket"):
            _, _, port = t.partition(":")
            return int(port) if port else 0
        raise ConfigError("not a socket transport")


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Read TOML (or start from defaults) and apply CLI-style overrides."""
    user = {}
    if path is not None:
        with open(path, "rb") as fh:
            user = tomllib.load(fh)
    tree = _merge(DEFAULTS, user)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        tree = _merge(tree, {section: {key: value}})
    return RunConfig(tree)


def parse_model(table: dict) -> ModelSpec:
    kind = table["kind"]
    if kind == "gaussian_location":
        return ModelSpec.gaussian_location(sigma=table["sigma"], dim=table["n_features"])
    if kind == "bernoulli_logit":
        return ModelSpec.bernoulli_logit(n_features=table["n_features"])
    if kind == "softmax_linear":
        return ModelSpec.softmax_linear(classes=table["classes"], n_features=table["n_features"])
    raise ConfigError(f"unknown model kind {kind!r}")


def _kernel_from(table: dict) -> WeightKernel:
    kind = table.get("kind", "constant")
    if kind == "constant":
        return WeightKernel.constant(beta_w=table.get("beta_w", 1.0))
    if kind == "se":
        return WeightKernel.se(beta_w=table.get("beta_w", 1.0), c=table.get("c", 1.0))
    if kind == "imq":
        return WeightKernel.imq(
            beta_w=table.get("beta_w", 1.0), c=table.get("c", 1.0), a=table.get("a", 1.0)
        )
    raise ConfigError(f"unknown kernel kind {kind!r}")


def parse_loss(obj, model: ModelSpec) -> LossSpec:
    """A loss from a shorthand string or a {kind=..., ...} table."""
    if isinstance(obj, str):
        if obj not in LOSS_SHORTHAND:
            raise ConfigError(f"unknown loss shorthand {obj!r}")
        obj = LOSS_SHORTHAND[obj]
    kind = obj.get("kind")
    if kind == "nll":
        return LossSpec.nll(model)
    if kind == "beta":
        return LossSpec.beta_loss(model, beta=obj.get("beta", 0.5))
    if kind == "gamma":
        return LossSpec.gamma_loss(model, gamma=obj.get("gamma", 1.5))
    if kind == "gce":
        return LossSpec.gce(model, delta=obj.get("delta", 0.5))
    if kind == "score_matching":
        return LossSpec.score_matching(model, kernel=_kernel_from(obj.get("kernel", {})))
    raise ConfigError(f"unknown loss kind {kind!r}")


def parse_divergence(obj) -> DivergenceSpec:
    if isinstance(obj, str):
        table = {"kind": obj}
    else:
        table = obj
    kind = table.get("kind")
    if kind == "kl":
        return DivergenceSpec.kl()
    if kind == "weighted_kl":
        return DivergenceSpec.weighted_kl(w=table.get("w", 1.0))
    if kind == "reverse_kl":
        return DivergenceSpec.reverse_kl()
    if kind == "alpha_renyi":
        return DivergenceSpec.alpha_renyi(alpha=table.get("alpha", 1.5))
    if kind == "fisher_rao":
        return DivergenceSpec.fisher_rao()
    raise ConfigError(f"unknown divergence kind {kind!r}")
