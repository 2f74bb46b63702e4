import pytest

from robustfed.config import (
    ConfigError,
    load_config,
    parse_divergence,
    parse_loss,
    parse_model,
)
from robustfed.losses import ModelSpec

LOC = ModelSpec.gaussian_location(sigma=1.0)


class TestLoadConfig:
    def test_defaults_complete_and_echoed(self):
        cfg = load_config(None)
        manifest = cfg.manifest()
        for section in ("run", "model", "prior", "data", "partition", "client",
                        "server", "predict", "influence", "clutter", "logreg", "theorems"):
            assert section in manifest
        assert manifest["run"]["transport"] == "inproc"
        assert manifest["client"]["mc_samples"] == 256

    def test_toml_round_trip(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text(
            """
[run]
experiment = "influence"
seed = 5

[client]
loss = { kind = "beta", beta = 0.7 }
divergence = { kind = "alpha_renyi", alpha = 1.5 }

[influence]
z_steps = 5
"""
        )
        cfg = load_config(str(path))
        assert cfg["run"]["experiment"] == "influence"
        assert cfg["run"]["seed"] == 5
        assert cfg["influence"]["z_steps"] == 5
        assert cfg["influence"]["z_max"] == 20.0  # default kept
        loss = parse_loss(cfg["client"]["loss"], LOC)
        assert loss.kind == "beta" and loss.beta == 0.7
        div = parse_divergence(cfg["client"]["divergence"])
        assert div.kind == "alpha_renyi" and div.alpha == 1.5

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[run]\nexperimnt = 'typo'\n")
        with pytest.raises(ConfigError, match="run.experimnt"):
            load_config(str(path))

    def test_cli_overrides(self):
        cfg = load_config(None, {"run.seed": 9, "data.seed": 9, "run.transport": "socket:7710"})
        assert cfg["run"]["seed"] == 9
        assert cfg["data"]["seed"] == 9
        assert cfg.socket_port == 7710

    def test_socket_port_parsing(self):
        assert load_config(None, {"run.transport": "socket"}).socket_port == 0
        with pytest.raises(ConfigError):
            load_config(None).socket_port


class TestSpecParsing:
    def test_every_loss_shorthand_parses(self):
        for name in ("nll", "beta", "gamma", "sm_constant", "sm_se", "sm_imq"):
            assert parse_loss(name, LOC) is not None
        logit = ModelSpec.bernoulli_logit(2)
        assert parse_loss("gce", logit).delta == 0.5

    def test_kernel_tables(self):
        spec = parse_loss(
            {"kind": "score_matching", "kernel": {"kind": "imq", "beta_w": 2.0, "c": 1.5, "a": 0.7}},
            LOC,
        )
        k = spec.kernel
        assert (k.kind, k.beta_w, k.c, k.a) == ("imq", 2.0, 1.5, 0.7)

    def test_divergence_strings_and_tables(self):
        assert parse_divergence("kl").kind == "kl"
        assert parse_divergence({"kind": "weighted_kl", "w": 2.0}).w == 2.0
        assert parse_divergence("reverse_kl").kind == "reverse_kl"
        with pytest.raises(ConfigError):
            parse_divergence("mystery")

    def test_models(self):
        m = parse_model({"kind": "bernoulli_logit", "sigma": 1.0, "n_features": 3, "classes": 2})
        assert m.theta_dim == 4
        with pytest.raises(ConfigError):
            parse_model({"kind": "nope"})
