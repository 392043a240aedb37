"""
Grid sweep command over noise strength, percentile clipping or uniform energy.
"""

import dataclasses
import logging

import click

from ..energy import EnergyAlloc
from ..errors import ConfigError
from ..noise import ThermalNoise, WeightNoise
from ..quantization import calibrate
from ..reports import write_csv
from .common import experiment_options

logger = logging.getLogger(__name__)

VARIABLES = ("sigma_t", "sigma_w", "percentile", "E_uniform")
# Older configs name the uniform energy sweep "energy"
ALIASES = {"energy": "E_uniform"}
SWEEP_COLUMNS = ("variable", "value", "noisy_accuracy", "quantized_accuracy")


def parse_grid(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"sweep grid must be comma-separated numbers, got {text!r}")


@click.command("sweep")
@experiment_options(splits=("test",))
@click.option("--variable", type=click.Choice(VARIABLES + tuple(ALIASES)), default=None, help="Defaults to sweep.variable")
@click.option("--grid", "grid_text", default=None, help="Comma-separated values; defaults to sweep.grid")
def sweep_cmd(experiment, variable, grid_text):
    """Evaluate accuracy over a grid of one variable."""
    settings = experiment.config.data["sweep"]
    variable = variable or settings["variable"]
    variable = ALIASES.get(variable, variable)
    if variable not in VARIABLES:
        raise ConfigError(f"sweep variable must be one of {VARIABLES}, got {variable!r}")
    grid = parse_grid(grid_text) if grid_text is not None else [float(v) for v in settings["grid"]]
    if not grid:
        raise ConfigError("sweep grid is empty")

    model = experiment.model()
    spec = experiment.config.noise_spec()
    if variable == "sigma_t" and not isinstance(spec, ThermalNoise):
        raise ConfigError("sigma_t sweeps need thermal noise")
    if variable == "sigma_w" and not isinstance(spec, WeightNoise):
        raise ConfigError("sigma_w sweeps need weight noise")

    features = experiment.calibration_features() if variable == "percentile" else None
    rows = []
    for value in grid:
        swept_model, swept_spec = model, spec
        if variable == "E_uniform":
            alloc = EnergyAlloc.uniform(model, value, "per_layer")
        else:
            alloc = experiment.allocation(model)
        if variable in ("sigma_t", "sigma_w"):
            swept_spec = dataclasses.replace(spec, **{variable: value})
        elif variable == "percentile":
            swept_model = model.copy()
            quant = dataclasses.replace(experiment.config.quant_spec(), range_mode="percentile", percentile=value)
            calibrate(swept_model, features, quant)

        noisy = experiment.evaluate(swept_model, noise=swept_spec, quantize=swept_spec.quantized,
                                    energies=alloc.energies())
        quantized = experiment.evaluate(swept_model, quantize=True, passes=1, average_logits=False)
        logger.info("%s=%g: noisy %.2f%%, 8-bit %.2f%%", variable, value, noisy, quantized)
        rows.append({"variable": variable, "value": value, "noisy_accuracy": noisy, "quantized_accuracy": quantized})

    write_csv(experiment.out / f"sweep_{variable}.csv", rows, SWEEP_COLUMNS, experiment.hash)
    click.echo(f"swept {variable} over {len(grid)} values")
