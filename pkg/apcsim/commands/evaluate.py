"""
Evaluation command: clean, quantized and noisy accuracy of one allocation.
"""

import click

from ..energy import photons_report, total_energy
from ..noise import ShotNoise, photons_per_mac
from ..reports import write_json
from .common import experiment_options


@click.command("eval")
@experiment_options(splits=("test",))
@click.option("--alloc", "alloc_path", type=click.Path(dir_okay=False), default=None,
              help="Allocation checkpoint to evaluate")
@click.option("--energy", type=float, default=None, help="Uniform energy per MAC")
def eval_cmd(experiment, alloc_path, energy):
    """Report clean, quantized and noisy accuracy with total energy."""
    model = experiment.model()
    spec = experiment.config.noise_spec()
    alloc = experiment.allocation(model, alloc_path, energy)

    clean, quantized = experiment.baselines(model)
    noisy = experiment.evaluate(model, noise=spec, quantize=spec.quantized, energies=alloc.energies())

    metrics = {
        "clean_accuracy": clean,
        "quantized_accuracy": quantized,
        "noisy_accuracy": noisy,
        "noise": spec.to_dict(),
        "granularity": alloc.granularity,
        "total_energy": total_energy(alloc),
        "energy_per_mac": alloc.energy_per_mac(),
        "passes": experiment.config.data["eval"]["passes"],
    }
    if isinstance(spec, ShotNoise):
        metrics["photons_per_mac"] = float(photons_per_mac(alloc.energy_per_mac(), spec))
        metrics["layer_photons_per_mac"] = {str(i): p for i, p in photons_report(alloc, spec).items()}
    write_json(experiment.out / "eval.json", metrics, experiment.hash)
    click.echo(f"clean {clean:.2f}%  8-bit {quantized:.2f}%  noisy {noisy:.2f}%")
