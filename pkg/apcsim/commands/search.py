"""
Minimum energy search command.
"""

import logging

import click

from ..energy import accuracy_floor, improvement, search_arms
from ..errors import ContractError, InfeasibleError
from ..reports import write_csv, write_json
from .common import experiment_options

logger = logging.getLogger(__name__)

SEARCH_COLUMNS = ("noise", "arm", "feasible", "energy_per_mac", "accuracy", "improvement_pct")


def check_dominance(results) -> None:
    """Finer arms must never need more energy than coarser ones."""
    feasible = [r for r in results.values() if r.feasible]
    for coarse, fine in zip(feasible, feasible[1:]):
        if fine.energy_per_mac > coarse.energy_per_mac:
            raise ContractError(
                f"{fine.granularity} E* {fine.energy_per_mac:.4g} exceeds {coarse.granularity} E* {coarse.energy_per_mac:.4g}"
            )


@click.command("search")
@experiment_options
def search_cmd(experiment):
    """Binary search the minimum energy per MAC of every arm; exits 2 if an arm is infeasible."""
    config = experiment.config
    model = experiment.model()
    spec = config.noise_spec()
    settings = config.data["search"]

    clean, quantized = experiment.baselines(model)
    floor, reference = accuracy_floor(clean, quantized, config.data["degradation_budget"],
                                      config.data["quantization_tolerance"])
    logger.info("accuracy floor %.2f%% (%s baseline)", floor, reference)

    eval_settings = config.data["eval"]
    results = search_arms(
        model, experiment.split("train"), experiment.split("test"), spec, config.optim_config(), floor,
        tuple(settings["bracket"]), arms=settings["arms"], rel_tol=settings["rel_tol"],
        batch_size=experiment.batch_size, threads=experiment.threads,
        passes=eval_settings["passes"], average_logits=eval_settings["average_logits"],
    )
    check_dominance(results)

    uniform = results.get("uniform")
    rows, gains = [], {}
    for arm, result in results.items():
        gain = improvement(result, uniform) if uniform is not None and arm != "uniform" else None
        gains[arm] = gain
        rows.append({
            "noise": spec.kind,
            "arm": arm,
            "feasible": result.feasible,
            "energy_per_mac": result.energy_per_mac,
            "accuracy": result.accuracy,
            "improvement_pct": None if gain is None else 100.0 * gain,
        })

    write_json(experiment.out / "search.json", {
        "noise": spec.to_dict(),
        "clean_accuracy": clean,
        "quantized_accuracy": quantized,
        "accuracy_floor": floor,
        "reference": reference,
        "arms": {arm: result.to_dict() for arm, result in results.items()},
        "improvement": gains,
    }, experiment.hash)
    write_csv(experiment.out / "search.csv", rows, SEARCH_COLUMNS, experiment.hash)

    for row in rows:
        click.echo(f"{row['arm']}: " + (f"{row['energy_per_mac']:.4g} per MAC" if row["feasible"] else "infeasible"))
    if not all(r.feasible for r in results.values()):
        infeasible = [a for a, r in results.items() if not r.feasible]
        raise InfeasibleError(f"no energy in the bracket reaches {floor:.2f}% for {infeasible}")
