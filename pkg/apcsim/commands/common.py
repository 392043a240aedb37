"""
Shared command helpers: experiment loading, error to exit-code mapping and
the data and baseline plumbing every command needs.
"""

import logging
from functools import wraps
from typing import Optional

import click

from ..config import Config, ExperimentConfig
from ..datasets import Dataset, load_dataset
from ..energy import EnergyAlloc
from ..errors import ApcsimError, ConfigError, DataError
from ..extensions import configure_logging
from ..reports import read_json
from ..simulator import evaluate
from ..storage import load_model

logger = logging.getLogger(__name__)


class Experiment:
    """Everything a command needs: the config, runtime settings and lazily loaded data."""

    def __init__(self, config: ExperimentConfig, threads: int, env: Config):
        self.config = config
        self.threads = threads
        self.env = env
        self._splits = {}

    @property
    def hash(self) -> str:
        return self.config.hash

    @property
    def out(self):
        out = self.config.output_dir
        out.mkdir(parents=True, exist_ok=True)
        return out

    @property
    def batch_size(self) -> int:
        return self.config.data["eval"]["batch_size"] or self.env.BATCH_SIZE

    def split(self, name: str) -> Dataset:
        if name not in self._splits:
            settings = self.config.dataset_settings(name)
            dataset = load_dataset(settings["path"], settings["format"], settings["labels"], settings["scale"],
                                   settings["sample_shape"], split=name)
            limit = self.config.data["eval"]["limit"] if name == "test" else None
            self._splits[name] = dataset.take(limit) if limit else dataset
        return self._splits[name]

    def model(self):
        model = load_model(self.config.model_path)
        for name in ("train", "test"):
            if self.config.data[f"{name}_data"]["path"] is not None:
                self.split(name).check_model(model)
        return model

    def calibration_features(self):
        settings = self.config.data["calibration"]
        train = self.split("train")
        return list(train.feature_batches(settings["batch_size"], limit=settings["examples"]))

    def evaluate(self, model, **kwargs) -> float:
        eval_settings = self.config.data["eval"]
        kwargs.setdefault("passes", eval_settings["passes"])
        kwargs.setdefault("average_logits", eval_settings["average_logits"])
        return evaluate(model, self.split("test"), seed=self.config.seed, batch_size=self.batch_size,
                        threads=self.threads, **kwargs)

    def baselines(self, model):
        """Clean float accuracy and calibrated 8-bit accuracy on the test split."""
        clean = self.evaluate(model, passes=1, average_logits=False)
        quantized = self.evaluate(model, quantize=True, passes=1, average_logits=False)
        logger.info("baselines: float %.2f%%, 8-bit %.2f%%", clean, quantized)
        return clean, quantized

    def allocation(self, model, alloc_path=None, energy_per_mac: Optional[float] = None) -> EnergyAlloc:
        """
        The allocation to evaluate: a checkpoint, a uniform energy per MAC,
        or the same two settings from the eval section of the config.

        Raises:
            ConfigError: If neither is given
            DataError: If the checkpoint is missing or malformed
        """
        eval_settings = self.config.data["eval"]
        alloc_path = alloc_path or self.config.resolve(eval_settings["alloc"])
        energy_per_mac = energy_per_mac if energy_per_mac is not None else eval_settings["energy_per_mac"]
        if alloc_path is not None:
            try:
                data = read_json(alloc_path)
            except FileNotFoundError:
                raise DataError(f"missing allocation checkpoint {alloc_path}")
            except ValueError as e:
                raise DataError(f"{alloc_path}: invalid JSON ({e})")
            return EnergyAlloc.from_dict(data, model)
        if energy_per_mac is not None:
            return EnergyAlloc.uniform(model, float(energy_per_mac), "per_layer")
        raise ConfigError("no energy given: pass --alloc or --energy, or set eval.alloc / eval.energy_per_mac")


def experiment_options(f=None, *, splits=("train", "test"), model: bool = True):
    """
    Decorator adding --config, --seed, --threads and --out, and running the command as an experiment.

    Before the command body runs, the model file (unless `model` is False), the
    dataset files of `splits` and of every other configured split must exist.
    Use bare or as experiment_options(splits=...).
    """
    if f is None:
        return lambda g: experiment_options(g, splits=splits, model=model)

    @click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                  help="Experiment JSON file")
    @click.option("--seed", type=int, default=None, help="Override the config seed")
    @click.option("--threads", type=int, default=None, help="Evaluation threads (results do not depend on it)")
    @click.option("--out", type=click.Path(file_okay=False), default=None, help="Override the output directory")
    @wraps(f)
    def decorated_function(config_path, seed, threads, out, **kwargs):
        env = Config()
        try:
            config = ExperimentConfig.load(config_path).with_overrides(seed=seed, output_dir=out)
            configure_logging(env.LOG_LEVEL, config.output_dir)
            configured = [s for s in ("train", "test") if config.data[f"{s}_data"]["path"] is not None]
            config.check_paths(*dict.fromkeys([*splits, *configured]), model=model)
            experiment = Experiment(config, threads or env.THREADS, env)
            logger.info("running %s with config %s", f.__name__, experiment.hash)
            return f(experiment, **kwargs)
        except ApcsimError as e:
            logger.error("%s: %s", type(e).__name__, e)
            click.echo(f"error: {e}", err=True)
            raise click.exceptions.Exit(e.exit_code)

    return decorated_function
