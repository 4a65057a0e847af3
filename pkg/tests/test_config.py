import pytest

from llmsynergy.config import Config, ConfigError, RunConfig, default_config_path

MINIMAL = """
[model.a]
total_params = 1e3
num_layers = 2
hidden_dim = 16
bytes_per_param = 2
lora_targets = 16x16x1
"""


class TestLoad:
    def test_default_file_ships(self):
        assert default_config_path().is_file()
        cfg = Config.load(env={})
        assert cfg.get_int("workload", "n_requests") == 10_000

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError) as err:
            Config.load(tmp_path / "nope.conf")
        assert "not found" in str(err.value)

    def test_env_override(self):
        cfg = Config.load(env={"LLMSYNERGY_SIMULATION__N_REQUESTS": "7"})
        assert cfg.sim_params().n_requests == 7

    def test_env_override_dotted_section(self):
        cfg = Config.load(env={"LLMSYNERGY_SIMULATION__LINKS__EDGE_CLOUD__RATE_BITS_PER_S": "2e9"})
        assert cfg.sim_params().edge_cloud.rate_bits_per_s == 2e9

    def test_unknown_env_ignored(self):
        cfg = Config.load(env={"LLMSYNERGY_NOPE__X": "1"})
        assert not cfg.has("nope")


class TestTypedViews:
    def test_scientific_int(self):
        cfg = Config.from_string(MINIMAL)
        assert cfg.model("a").total_params == 1000

    def test_missing_key_named(self):
        cfg = Config.from_string("[simulation]\nn_requests = 3\n")
        with pytest.raises(ConfigError) as err:
            cfg.get("simulation", "max_batch")
        assert err.value.key == "simulation.max_batch"

    def test_bad_type_named(self):
        cfg = Config.from_string("[a]\nx = many\n")
        with pytest.raises(ConfigError, match="a.x"):
            cfg.get_int("a", "x")

    def test_bool(self):
        cfg = Config.from_string("[a]\nx = yes\ny = 0\n")
        assert cfg.get_bool("a", "x") is True
        assert cfg.get_bool("a", "y") is False

    def test_deployments_missing_section(self):
        with pytest.raises(ConfigError):
            Config.from_string(MINIMAL).deployments()


class TestRunConfig:
    def test_creates_out_dir(self, tmp_path):
        run = RunConfig(Config.from_string(""), tmp_path / "a" / "b")
        assert run.out_dir.is_dir()

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(ConfigError):
            RunConfig(Config.from_string(""), blocker / "sub")
