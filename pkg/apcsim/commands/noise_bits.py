"""
Noise bits command: per-layer equivalent bits and the noise versus
quantization accuracy comparison.
"""

import click
import numpy as np

from ..noise_bits import CSV_COLUMNS, equivalence_experiment
from ..reports import write_csv, write_json
from .common import experiment_options


@click.command("noise-bits")
@experiment_options
@click.option("--alloc", "alloc_path", type=click.Path(dir_okay=False), default=None)
@click.option("--energy", type=float, default=None, help="Uniform energy per MAC")
def noise_bits_cmd(experiment, alloc_path, energy):
    """Measure per-layer noise bits and compare noisy with low-bit accuracy."""
    model = experiment.model()
    spec = experiment.config.noise_spec()
    alloc = experiment.allocation(model, alloc_path, energy)
    features = np.concatenate(experiment.calibration_features())

    result = equivalence_experiment(
        model, experiment.split("test"), spec, alloc.energies(), features, seed=experiment.config.seed,
        batch_size=experiment.batch_size, threads=experiment.threads,
        passes=experiment.config.data["eval"]["passes"],
    )
    write_csv(experiment.out / "noise_bits.csv", result.report.rows(), CSV_COLUMNS, experiment.hash)
    write_json(experiment.out / "noise_bits.json", result.to_dict(), experiment.hash)
    click.echo(
        f"noisy {result.noisy_accuracy:.2f}%  low-bit {result.lowbit_accuracy:.2f}%  "
        f"average {result.report.average_bits:.2f} bits"
    )
