"""
Calibration command.
"""

import click

from ..quantization import calibrate
from ..reports import write_json
from ..storage import save_model
from .common import experiment_options


@click.command("calibrate")
@experiment_options(splits=("train",))
def calibrate_cmd(experiment):
    """Record quantization ranges on the training split and write them into the model manifest."""
    model = experiment.model()
    spec = experiment.config.quant_spec()
    calibration = calibrate(model, experiment.calibration_features(), spec)
    save_model(model, experiment.config.model_path)

    write_json(experiment.out / "calibration.json", {
        "range_mode": spec.range_mode,
        "layers": {str(i): entry.to_dict() for i, entry in sorted(calibration.items())},
    }, experiment.hash)
    click.echo(f"calibrated {len(calibration)} layers ({spec.range_mode})")
