"""
Configuration: process environment from dotenv files plus the JSON experiment file.
"""

import copy
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from .energy import GRANULARITIES, OptimConfig
from .errors import ApcsimError, ConfigError, DataError
from .noise import NOISE_KINDS, noise_spec_from_dict
from .quantization import QuantSpec

logger = logging.getLogger(__name__)

HASH_LENGTH = 16


def load_environment(env_name: Optional[str] = None, directory=".") -> Optional[Path]:
    """
    Load environment variables from a dotenv file.

    `--env NAME` selects `.env.NAME`; otherwise `.env` is used, falling back to
    `.env.development` when `.env` does not exist.

    Returns:
        Path of the loaded file, or None if it does not exist
    """
    directory = Path(directory)
    env_file = directory / (f".env.{env_name}" if env_name else ".env")
    if env_name is None and not env_file.exists() and (directory / ".env.development").exists():
        env_file = directory / ".env.development"
    if not env_file.exists():
        if env_name:
            logger.warning("environment file %s not found", env_file)
        return None
    load_dotenv(env_file)
    logger.debug("loaded environment from %s", env_file)
    return env_file


class Config:
    """Environment-driven defaults for the command line"""

    def __init__(self):
        self.LOG_LEVEL = os.getenv("APCSIM_LOG_LEVEL", "INFO")
        self.THREADS = int(os.getenv("APCSIM_THREADS", "1"))
        self.OUTPUT_DIR = os.getenv("APCSIM_OUTPUT_DIR", "out")
        self.BATCH_SIZE = int(os.getenv("APCSIM_BATCH_SIZE", "256"))
        # Directory of the MNIST IDX files used by the slow acceptance tests
        self.MNIST_DIR = os.getenv("APCSIM_MNIST_DIR")


def _dataset_defaults():
    return {"path": None, "labels": None, "format": "idx", "scale": 1.0 / 255.0, "sample_shape": None}


# Defaults that do not depend on the noise kind
DEFAULTS = {
    "model": None,
    "train_data": _dataset_defaults(),
    "test_data": _dataset_defaults(),
    "noise": {"kind": "thermal"},
    "quant": {},
    "optim": {},
    "granularity": "per_layer",
    "degradation_budget": 2.0,
    "quantization_tolerance": 1.0,
    "seed": 0,
    "output_dir": "out",
    "calibration": {},
    "eval": {"passes": 1, "average_logits": False, "batch_size": 256, "limit": None,
             "energy_per_mac": None, "alloc": None},
    "search": {"rel_tol": 1e-3, "arms": ["uniform", "per_layer", "per_channel"]},
    "sweep": {"variable": "sigma_t", "grid": []},
}

# lambda, activation range mode and search bracket follow the noise kind
NOISE_DEFAULTS = {
    "thermal": {"lam": 8.0, "range_mode": "percentile", "bracket": [1e-4, 1e4]},
    "weight": {"lam": 8.0, "range_mode": "moving_average", "bracket": [1e-4, 1e4]},
    "shot": {"lam": 2.0, "range_mode": "moving_average", "bracket": [1e-21, 1e-15]},
}


def _merge(defaults: dict, data: dict) -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in data.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def materialize(data: dict) -> dict:
    """
    Fill every missing key with its explicit default.

    Raises:
        ConfigError: Unknown keys, an unknown noise kind or invalid values
    """
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = _merge(DEFAULTS, data)

    kind = merged["noise"].get("kind")
    if kind not in NOISE_KINDS:
        raise ConfigError(f"unknown noise kind {kind!r}, expected one of {sorted(NOISE_KINDS)}")
    noise_defaults = NOISE_DEFAULTS[kind]
    try:
        merged["noise"] = noise_spec_from_dict(merged["noise"]).to_dict()

        quant = {"range_mode": noise_defaults["range_mode"], **merged["quant"]}
        merged["quant"] = QuantSpec.from_dict(quant).to_dict()

        optim = {"lam": noise_defaults["lam"], **merged["optim"]}
        optim.pop("seed", None)
        merged["optim"] = OptimConfig.from_dict({**optim, "seed": merged["seed"]}).to_dict()
        del merged["optim"]["seed"]
    except (TypeError, ValueError, ApcsimError) as e:
        raise ConfigError(f"invalid config: {e}")

    range_mode = merged["quant"]["range_mode"]
    calibration = {
        "examples": 120 if range_mode == "percentile" else 32 * merged["quant"]["max_batches"],
        "batch_size": 120 if range_mode == "percentile" else 32,
    }
    merged["calibration"] = {**calibration, **merged["calibration"]}
    merged["search"].setdefault("bracket", noise_defaults["bracket"])

    if merged["granularity"] not in GRANULARITIES:
        raise ConfigError(f"granularity must be one of {GRANULARITIES}")
    lo, hi = merged["search"]["bracket"]
    if not 0 < lo < hi:
        raise ConfigError(f"search bracket must satisfy 0 < lo < hi, got {merged['search']['bracket']}")
    if not isinstance(merged["seed"], int):
        raise ConfigError("seed must be an integer")
    return merged


def config_hash(data: dict) -> str:
    """SHA-256 of the canonical JSON form, truncated to 16 hex characters."""
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:HASH_LENGTH]


class ExperimentConfig:
    """
    One experiment: model, data, noise, quantization, optimizer and search settings.

    Relative paths resolve against the directory of the config file.
    """

    def __init__(self, data: dict, path: Optional[Path] = None):
        self.data = materialize(data)
        self.path = Path(path) if path is not None else None

    @classmethod
    def load(cls, path, write_back: bool = True) -> "ExperimentConfig":
        """
        Read a config file and materialize its defaults.

        With write_back, the materialized form is written back when it differs,
        so every default in use is visible in the file.

        Raises:
            ConfigError: Missing or unreadable file, or invalid content
        """
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})")
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        config = cls(raw, path)
        if write_back and raw != config.data:
            path.write_text(config.dumps())
            logger.info("wrote materialized defaults to %s", path)
        return config

    def dumps(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    @property
    def hash(self) -> str:
        return config_hash(self.data)

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None) -> "ExperimentConfig":
        data = self.to_dict()
        if seed is not None:
            data["seed"] = seed
        if output_dir is not None:
            data["output_dir"] = str(output_dir)
        return ExperimentConfig(data, self.path)

    # -- accessors --------------------------------------------------------------

    def resolve(self, value) -> Optional[Path]:
        if value is None:
            return None
        value = Path(value)
        if not value.is_absolute() and self.path is not None:
            value = self.path.parent / value
        return value

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.data["output_dir"])

    @property
    def model_path(self) -> Path:
        if self.data["model"] is None:
            raise ConfigError("config has no model path")
        return self.resolve(self.data["model"])

    def noise_spec(self):
        return noise_spec_from_dict(self.data["noise"])

    def quant_spec(self) -> QuantSpec:
        return QuantSpec.from_dict(self.data["quant"])

    def optim_config(self) -> OptimConfig:
        return OptimConfig.from_dict({**self.data["optim"], "seed": self.seed})

    def dataset_settings(self, split: str) -> dict:
        settings = dict(self.data[f"{split}_data"])
        if settings["path"] is None:
            raise ConfigError(f"config has no {split}_data path")
        settings["path"] = self.resolve(settings["path"])
        settings["labels"] = self.resolve(settings["labels"])
        return settings

    def check_paths(self, *splits: str, model: bool = True) -> None:
        """
        Raises:
            DataError: If a referenced model or dataset file does not exist
        """
        paths = [self.model_path] if model else []
        for split in splits:
            settings = self.dataset_settings(split)
            paths += [p for p in (settings["path"], settings["labels"]) if p is not None]
        for p in paths:
            if not p.exists():
                raise DataError(f"missing file {p}")
