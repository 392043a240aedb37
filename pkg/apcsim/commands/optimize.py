"""
Allocation training command.
"""

import logging

import click
import numpy as np

from ..energy import train_alloc
from ..errors import DivergenceError
from ..noise import ShotNoise, photons_per_mac
from ..noise_bits import CSV_COLUMNS, measure_noise_bits
from ..reports import write_csv, write_json
from .common import experiment_options

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("step", "nll", "penalty", "total_energy")
LAYER_COLUMNS = ("layer", "n_mac", "energy_per_mac", "photons_per_mac")


@click.command("optimize")
@experiment_options(splits=("train",))
@click.option("--budget", type=float, default=None,
              help="Budget as average energy per MAC (E_max = budget * total MACs)")
def optimize_cmd(experiment, budget):
    """Train an energy allocation and write the checkpoint, trace and per-layer reports."""
    model = experiment.model()
    spec = experiment.config.noise_spec()
    cfg = experiment.config.optim_config()
    if budget is not None:
        cfg = cfg.with_budget(budget * model.total_macs)
    granularity = experiment.config.data["granularity"]

    try:
        alloc = train_alloc(model, experiment.split("train"), spec, cfg, granularity)
    except DivergenceError as e:
        if e.last_good is not None:
            write_json(experiment.out / "alloc_last_good.json",
                       e.last_good.to_dict(seed=cfg.seed), experiment.hash)
        raise

    write_json(experiment.out / "alloc.json", alloc.to_dict(seed=cfg.seed), experiment.hash)
    write_csv(experiment.out / "trace.csv", alloc.trace, TRACE_COLUMNS, experiment.hash)

    layer_rows = []
    for index, energy in alloc.layer_energy_per_mac().items():
        layer_rows.append({
            "layer": index,
            "n_mac": model.n_mac(index),
            "energy_per_mac": energy,
            "photons_per_mac": float(photons_per_mac(energy, spec)) if isinstance(spec, ShotNoise) else None,
        })
    write_csv(experiment.out / "layer_energy.csv", layer_rows, LAYER_COLUMNS, experiment.hash)

    features = np.concatenate(experiment.calibration_features())
    report = measure_noise_bits(model, features, spec, alloc.energies(), seed=cfg.seed)
    write_csv(experiment.out / "noise_bits_optimized.csv", report.rows(), CSV_COLUMNS, experiment.hash)

    click.echo(f"{granularity} allocation: total energy {alloc.to_dict()['total_energy']:.4g} "
               f"(budget {cfg.e_max:.4g}), {report.average_bits:.2f} average noise bits")
