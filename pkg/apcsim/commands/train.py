"""
Reference model training command.
"""

import click

from ..reports import write_json
from ..trainer import train_reference_model
from .common import experiment_options


@click.command("train")
@experiment_options(model=False)
@click.option("--preset", type=click.Choice(["mlp", "cnn", "rescnn"]), default="cnn", show_default=True)
@click.option("--epochs", type=int, default=3, show_default=True)
@click.option("--min-accuracy", type=float, default=None, help="Required clean accuracy (percent)")
def train_cmd(experiment, preset, epochs, min_accuracy):
    """Train a preset model and save it to the config's model path."""
    model = train_reference_model(
        preset, experiment.split("train"), experiment.split("test"), seed=experiment.config.seed,
        epochs=epochs, min_accuracy=min_accuracy, out_path=experiment.config.model_path,
        threads=experiment.threads,
    )
    write_json(experiment.out / "train.json", {
        "preset": preset,
        "epochs": epochs,
        "clean_accuracy": model.metadata["clean_accuracy"],
        "total_macs": model.total_macs,
        "mac_counts": {str(i): n for i, n in model.mac_counts().items()},
    }, experiment.hash)
    click.echo(f"{preset}: {model.metadata['clean_accuracy']:.2f}% clean accuracy")
