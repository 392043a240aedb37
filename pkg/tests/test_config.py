import json

import pytest

from apcsim.config import Config, ExperimentConfig, config_hash, load_environment, materialize
from apcsim.errors import ConfigError, DataError
from apcsim.noise import ShotNoise

ENV_KEYS = ("APCSIM_LOG_LEVEL", "APCSIM_THREADS", "APCSIM_OUTPUT_DIR", "APCSIM_BATCH_SIZE", "APCSIM_MNIST_DIR")


@pytest.fixture
def clean_env(monkeypatch):
    """Unset the APCSIM_* variables; dotenv values loaded during the test are removed afterwards."""
    for key in ENV_KEYS:
        monkeypatch.setenv(key, "")
        monkeypatch.delenv(key)
    return monkeypatch


class TestEnvironment:
    def test_defaults(self, clean_env):
        config = Config()
        assert (config.LOG_LEVEL, config.THREADS, config.OUTPUT_DIR, config.BATCH_SIZE) == ("INFO", 1, "out", 256)
        assert config.MNIST_DIR is None

    def test_named_env_file(self, tmp_path, clean_env):
        (tmp_path / ".env.lab").write_text("APCSIM_THREADS=3\nAPCSIM_LOG_LEVEL=DEBUG\n")
        assert load_environment("lab", tmp_path) == tmp_path / ".env.lab"
        config = Config()
        assert config.THREADS == 3
        assert config.LOG_LEVEL == "DEBUG"

    def test_development_fallback(self, tmp_path, clean_env):
        (tmp_path / ".env.development").write_text("APCSIM_BATCH_SIZE=64\n")
        assert load_environment(None, tmp_path) == tmp_path / ".env.development"
        assert Config().BATCH_SIZE == 64

    def test_missing_env_file(self, tmp_path, clean_env):
        assert load_environment("absent", tmp_path) is None


class TestMaterialize:
    def test_thermal_defaults(self):
        data = materialize({"noise": {"kind": "thermal"}})
        assert data["noise"] == {"kind": "thermal", "sigma_t": 0.01}
        assert data["optim"]["lam"] == 8.0
        assert data["optim"]["lr"] == 0.01
        assert data["optim"]["train_fraction"] == 0.04
        assert "seed" not in data["optim"]
        assert data["quant"]["range_mode"] == "percentile"
        assert data["quant"]["percentile"] == 99.99
        assert data["calibration"] == {"examples": 120, "batch_size": 120}
        assert data["search"]["bracket"] == [1e-4, 1e4]

    def test_shot_defaults(self):
        data = materialize({"noise": {"kind": "shot"}})
        assert data["optim"]["lam"] == 2.0
        assert data["quant"]["range_mode"] == "moving_average"
        assert data["calibration"]["examples"] == 3200
        assert ShotNoise(**{k: v for k, v in data["noise"].items() if k != "kind"}) == ShotNoise()

    def test_explicit_values_win(self):
        data = materialize({"noise": {"kind": "weight", "sigma_w": 0.2}, "optim": {"lam": 1.0},
                            "quant": {"range_mode": "minmax"}})
        assert data["noise"]["sigma_w"] == 0.2
        assert data["optim"]["lam"] == 1.0
        assert data["quant"]["range_mode"] == "minmax"

    def test_idempotent(self):
        once = materialize({"noise": {"kind": "thermal"}, "seed": 3})
        assert materialize(once) == once

    @pytest.mark.parametrize("data", [
        {"colour": "blue"},
        {"noise": {"kind": "flicker"}},
        {"optim": {"lr": 0.0}},
        {"optim": {"momentum": 0.9}},
        {"quant": {"percentile": 40.0}},
        {"granularity": "per_pixel"},
        {"search": {"bracket": [1.0, 0.1]}},
        {"seed": "zero"},
    ])
    def test_invalid(self, data):
        with pytest.raises(ConfigError):
            materialize(data)


class TestHash:
    def test_sixteen_hex_characters(self):
        digest = config_hash(materialize({}))
        assert len(digest) == 16
        int(digest, 16)

    def test_stable_and_sensitive(self):
        assert config_hash(materialize({})) == config_hash(materialize({}))
        assert config_hash(materialize({"seed": 1})) != config_hash(materialize({"seed": 2}))

    def test_key_order_does_not_matter(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})


class TestExperimentConfig:
    def test_load_writes_back_defaults(self, tmp_path):
        path = tmp_path / "exp.json"
        path.write_text(json.dumps({"noise": {"kind": "thermal"}}))
        config = ExperimentConfig.load(path)
        written = json.loads(path.read_text())
        assert written == config.data
        before = path.read_bytes()
        assert ExperimentConfig.load(path).hash == config.hash
        assert path.read_bytes() == before

    def test_load_without_write_back(self, tmp_path):
        path = tmp_path / "exp.json"
        path.write_text("{}")
        ExperimentConfig.load(path, write_back=False)
        assert path.read_text() == "{}"

    def test_missing_or_invalid_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            ExperimentConfig.load(tmp_path / "absent.json")
        (tmp_path / "bad.json").write_text("[1, 2]")
        with pytest.raises(ConfigError, match="JSON object"):
            ExperimentConfig.load(tmp_path / "bad.json")

    def test_paths_resolve_against_config_directory(self, tmp_path):
        config = ExperimentConfig({"model": "models/m.json", "train_data": {"path": "train.csv"}},
                                  tmp_path / "exp.json")
        assert config.model_path == tmp_path / "models" / "m.json"
        assert config.dataset_settings("train")["path"] == tmp_path / "train.csv"
        assert config.output_dir == tmp_path / "out"

    def test_check_paths(self, tmp_path):
        config = ExperimentConfig({"model": "m.json"}, tmp_path / "exp.json")
        with pytest.raises(DataError, match="m.json"):
            config.check_paths()
        with pytest.raises(ConfigError):
            config.dataset_settings("test")

    def test_builders(self):
        config = ExperimentConfig({"noise": {"kind": "thermal", "sigma_t": 0.02}, "seed": 5})
        assert config.noise_spec().sigma_t == 0.02
        assert config.optim_config().seed == 5
        assert config.quant_spec().range_mode == "percentile"

    def test_overrides_change_hash(self):
        config = ExperimentConfig({})
        changed = config.with_overrides(seed=9, output_dir="elsewhere")
        assert changed.seed == 9
        assert changed.data["output_dir"] == "elsewhere"
        assert changed.hash != config.hash
