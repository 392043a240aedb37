"""
Noise bits: the precision of a uniform quantizer whose rounding noise matches
the variance of the analog noise on a layer output.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .errors import ContractError, DomainError
from .noise import NoiseContext, NoiseSpec, NoiseStream, ShotNoise, ThermalNoise, WeightNoise, photons_per_mac
from .tensor import Tensor

logger = logging.getLogger(__name__)

# Reports clamp infinite precision (noiseless layers) to this many bits
MAX_REPORTED_BITS = 32.0

CSV_COLUMNS = ("layer_id", "noise_kind", "range_lo", "range_hi", "var_a", "noise_bits", "n_mac", "snr")


def noise_bits(range_width: float, var_a: float) -> float:
    """
    Equivalent bits of a layer output, log2(range / sqrt(12 var_a) + 1).

    Returns inf when var_a is 0.

    Raises:
        DomainError: If range_width <= 0 or var_a < 0
    """
    if not range_width > 0:
        raise DomainError(f"range width must be > 0, got {range_width}")
    if not var_a >= 0:
        raise DomainError(f"noise variance must be >= 0, got {var_a}")
    if var_a == 0:
        return math.inf
    return math.log2(range_width / math.sqrt(12.0 * var_a) + 1.0)


def analog_noise_variance(spec: NoiseSpec, ctx: NoiseContext, rows: Optional[np.ndarray] = None,
                          weight: Optional[np.ndarray] = None) -> float:
    """
    Variance of the analog noise on one layer output, averaged over channels.

    Thermal noise needs only the context. Weight and shot noise depend on the
    signal, so they also need the dot-product rows (R, N) seen by the layer and,
    for shot noise, the weight rows (O, N); the variance is averaged over the batch.
    """
    energy = np.atleast_1d(ctx.energy_values())
    if isinstance(spec, ThermalNoise):
        var = ctx.n * (ctx.weight_span() * ctx.input_span() * spec.sigma_t) ** 2 / energy
        return float(np.mean(var))
    if rows is None:
        raise ContractError(f"{spec.kind} noise variance depends on the layer input rows")
    x_sq = np.sum(np.asarray(rows, dtype=np.float64) ** 2, axis=1)[:, None]
    if isinstance(spec, WeightNoise):
        return float(np.mean(x_sq * (ctx.weight_span() * spec.sigma_w) ** 2 / energy[None, :]))
    if isinstance(spec, ShotNoise):
        if weight is None:
            raise ContractError("shot noise variance needs the weight rows")
        w_sq = np.sum(np.asarray(weight, dtype=np.float64) ** 2, axis=1)[None, :]
        photons = photons_per_mac(energy, spec)[None, :]
        return float(np.mean(x_sq * w_sq * spec.sigma_s ** 2 / (ctx.n * photons)))
    raise ContractError(f"unsupported noise spec {spec!r}")


def thermal_noise_bits(ctx: NoiseContext, out_range: Tuple[float, float],
                       spec: ThermalNoise = ThermalNoise()) -> float:
    """
    Noise bits of a layer under thermal noise.

    This is the dynamic range compression form: output range over
    sqrt(12 N) * weight range * input range * sigma_t / sqrt(E).
    """
    return noise_bits(out_range[1] - out_range[0], analog_noise_variance(spec, ctx))


@dataclass
class LayerNoiseBits:
    layer_id: int
    range_lo: float
    range_hi: float
    var_a: float
    noise_bits: float
    n_mac: int = 0
    snr: Optional[float] = None

    @property
    def reported_bits(self) -> float:
        return min(self.noise_bits, MAX_REPORTED_BITS)


@dataclass
class NoiseBitsReport:
    """
    Per-layer noise bits of one model under one noise setting.

    Shot-noise reports use the batch-averaged variance; they are labeled
    `extension` because noise bits are defined for signal-independent noise.
    """

    noise_kind: str
    entries: List[LayerNoiseBits] = field(default_factory=list)
    config_hash: Optional[str] = None

    @property
    def extension(self) -> bool:
        return self.noise_kind != "thermal"

    @property
    def average_bits(self) -> float:
        """Unweighted mean of the per-layer bits."""
        if not self.entries:
            return 0.0
        return float(np.mean([e.reported_bits for e in self.entries]))

    @property
    def weighted_average_bits(self) -> float:
        """Mean of the per-layer bits weighted by MAC count."""
        macs = np.array([e.n_mac for e in self.entries], dtype=np.float64)
        if not self.entries or macs.sum() == 0:
            return self.average_bits
        bits = np.array([e.reported_bits for e in self.entries])
        return float(np.sum(bits * macs) / macs.sum())

    def bits_by_layer(self) -> Dict[int, float]:
        return {e.layer_id: e.reported_bits for e in self.entries}

    def rows(self) -> List[dict]:
        rows = []
        for e in self.entries:
            row = asdict(e)
            row["noise_bits"] = e.reported_bits
            row["noise_kind"] = self.noise_kind + (" (extension)" if self.extension else "")
            rows.append({key: row[key] for key in CSV_COLUMNS})
        return rows

    def summary(self) -> dict:
        return {
            "noise_kind": self.noise_kind,
            "average_bits": self.average_bits,
            "weighted_average_bits": self.weighted_average_bits,
            "layers": len(self.entries),
        }


def measure_noise_bits(model, features: np.ndarray, spec: NoiseSpec, energies: Mapping[int, object],
                       quantize: Optional[bool] = None, seed: int = 0) -> NoiseBitsReport:
    """
    Per-layer noise bits measured on one batch.

    Output ranges come from the model calibration, so they use the same range
    mode as activation calibration. Signal-dependent variances are averaged over
    the rows the layer sees on a clean pass over `features`. The SNR column is
    the variance of the clean layer output over the noise variance.

    Raises:
        ContractError: If a noisy layer has no calibration entry
    """
    from .simulator import Simulator

    quantize = spec.quantized if quantize is None else quantize
    rows, outputs = {}, {}

    def observe(index, event, values):
        if event == "rows":
            rows.setdefault(index, []).append(values)
        elif event == "output" and model.layers[index].noisy:
            outputs[index] = values

    simulator = Simulator(model, quantize=quantize, seed=seed)
    simulator.forward(Tensor(features), observer=observe)

    report = NoiseBitsReport(noise_kind=spec.kind)
    for index in model.noisy_layers():
        entry = model.calibration.get(index)
        if entry is None:
            raise ContractError(f"layer {index} has no calibration; run calibrate first")
        weight = simulator.layer_weight(index).data.reshape(model.output_channels(index), -1)
        ctx = NoiseContext(
            n=model.contraction(index),
            energy=energies[index],
            weight_range=entry.weight_range() if entry.weight is not None else None,
            input_range=entry.input_range() if entry.input is not None else None,
            stream=NoiseStream(seed, index),
        )
        layer_rows = np.concatenate(rows[index]) if index in rows else None
        var_a = analog_noise_variance(spec, ctx, layer_rows, weight)
        lo, hi = entry.output.bounds
        bits = noise_bits(hi - lo, var_a)
        snr = float(np.var(outputs[index]) / var_a) if var_a > 0 else math.inf
        report.entries.append(LayerNoiseBits(index, lo, hi, var_a, bits, model.n_mac(index), snr))
        logger.debug("layer %d: var_a=%.3e noise bits=%.3f", index, var_a, bits)
    return report


@dataclass
class EquivalenceResult:
    noisy_accuracy: float
    lowbit_accuracy: float
    report: NoiseBitsReport

    @property
    def gap(self) -> float:
        return abs(self.noisy_accuracy - self.lowbit_accuracy)

    def to_dict(self) -> dict:
        return {
            "noisy_accuracy": self.noisy_accuracy,
            "lowbit_accuracy": self.lowbit_accuracy,
            "gap": self.gap,
            **self.report.summary(),
        }


def equivalence_experiment(model, dataset, spec: NoiseSpec, energies: Mapping[int, object],
                           calibration_features: np.ndarray, seed: int = 0, batch_size: int = 256,
                           threads: int = 1, passes: int = 1) -> EquivalenceResult:
    """
    Compare accuracy under analog noise with accuracy under matching quantization.

    1. Evaluate accuracy with analog noise at the given energies.
    2. Measure per-layer noise bits from calibrated output ranges and the
       analytic noise variance.
    3. Remove the noise and evaluate again with every dot-product output
       fake-quantized at its fractional noise bits.

    Args:
        model: Calibrated model
        dataset: Evaluation dataset
        spec: Noise model
        energies: Energy per MAC per noisy layer
        calibration_features: Batch on which signal-dependent variances are measured

    Returns:
        EquivalenceResult with both accuracies and the report
    """
    from .simulator import evaluate

    quantize = spec.quantized
    noisy = evaluate(model, dataset, noise=spec, quantize=quantize, energies=energies, seed=seed,
                     batch_size=batch_size, threads=threads, passes=passes)
    report = measure_noise_bits(model, calibration_features, spec, energies, quantize=quantize, seed=seed)
    lowbit = evaluate(model, dataset, quantize=quantize, output_bits=report.bits_by_layer(),
                      batch_size=batch_size, threads=threads)
    logger.info("equivalence: noisy %.2f%%, low-bit %.2f%% at %.2f average bits",
                noisy, lowbit, report.average_bits)
    return EquivalenceResult(noisy, lowbit, report)
