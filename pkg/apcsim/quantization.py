"""
Affine quantization: range calibration, fake quantization and the uniform
quantization-noise model.

Weights are calibrated per output channel (per row for dense layers) on their
exact min/max. Activations are calibrated per tensor with min/max, a percentile
clip, or a moving average of batch min/max.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np

from .errors import CalibrationError, ContractError, DomainError
from .tensor import Tensor, add, as_tensor, clamp, div, mul, ste_round, sub

logger = logging.getLogger(__name__)

# Relative slack when turning bits into a level count, so 4.644 bits means 25 levels
BITS_TOLERANCE = 1e-3

RANGE_MODES = ("minmax", "percentile", "moving_average")
GRANULARITIES = ("per_tensor", "per_channel")


def levels_for_bits(bits: float) -> int:
    """
    Number of quantization levels, ceil(2^bits), at least 2.

    Fractional bit counts round the number of bins up.
    """
    if not bits > 0:
        raise DomainError(f"bits must be > 0, got {bits}")
    return max(2, math.ceil(2.0 ** bits / (1.0 + BITS_TOLERANCE)))


@dataclass(frozen=True)
class QuantSpec:
    """How to quantize and calibrate a tensor."""

    bits: float = 8.0
    granularity: str = "per_tensor"
    axis: int = 0
    range_mode: str = "minmax"
    percentile: float = 99.99
    decay: Optional[float] = None
    max_batches: int = 100
    symmetric: bool = False

    def __post_init__(self):
        if not self.bits > 0:
            raise DomainError(f"bits must be > 0, got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise ContractError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")
        if self.range_mode not in RANGE_MODES:
            raise ContractError(f"range_mode must be one of {RANGE_MODES}, got {self.range_mode!r}")
        if not 50.0 < self.percentile <= 100.0:
            raise DomainError(f"percentile must lie in (50, 100], got {self.percentile}")
        if self.decay is not None and not 0.0 <= self.decay < 1.0:
            raise DomainError(f"decay must lie in [0, 1), got {self.decay}")
        if self.max_batches < 1:
            raise DomainError(f"max_batches must be >= 1, got {self.max_batches}")

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def _as_values(value):
    array = np.asarray(value, dtype=np.float64)
    return float(array) if array.ndim == 0 else array


@dataclass
class CalibratedRange:
    """
    A calibrated [x_min, x_max] range with its quantizer parameters.

    x_min and x_max are floats (per tensor) or vectors along `axis`
    (per channel). A degenerate range is widened symmetrically by
    eps = max(1e-8, 1e-6 * |x_max|).
    """

    x_min: Union[float, np.ndarray]
    x_max: Union[float, np.ndarray]
    bits: float = 8.0
    axis: Optional[int] = None

    def __post_init__(self):
        x_min = np.asarray(self.x_min, dtype=np.float64)
        x_max = np.asarray(self.x_max, dtype=np.float64)
        if x_min.shape != x_max.shape:
            raise CalibrationError(f"x_min shape {x_min.shape} differs from x_max shape {x_max.shape}")
        if np.any(x_max < x_min) or not (np.all(np.isfinite(x_min)) and np.all(np.isfinite(x_max))):
            raise CalibrationError(f"invalid range [{x_min}, {x_max}]")
        degenerate = x_max == x_min
        if np.any(degenerate):
            eps = np.maximum(1e-8, 1e-6 * np.abs(x_max))
            x_min = np.where(degenerate, x_min - eps, x_min)
            x_max = np.where(degenerate, x_max + eps, x_max)
            logger.debug("widened %d degenerate range(s)", int(np.sum(degenerate)))
        self.x_min, self.x_max = _as_values(x_min), _as_values(x_max)
        if not self.bits > 0:
            raise DomainError(f"bits must be > 0, got {self.bits}")

    @property
    def levels(self) -> int:
        return levels_for_bits(self.bits)

    @property
    def width(self):
        return _as_values(np.asarray(self.x_max) - np.asarray(self.x_min))

    @property
    def delta(self):
        return _as_values(np.asarray(self.width) / (self.levels - 1))

    @property
    def zero_point(self):
        z = np.clip(np.round(-np.asarray(self.x_min) / np.asarray(self.delta)), 0, self.levels - 1)
        return int(z) if z.ndim == 0 else z.astype(np.int64)

    @property
    def bounds(self) -> Tuple[float, float]:
        """Tensor-wide (min, max), collapsing per-channel vectors."""
        return float(np.min(self.x_min)), float(np.max(self.x_max))

    def with_bits(self, bits: float) -> "CalibratedRange":
        return replace(self, bits=bits)

    def to_dict(self):
        return {
            "x_min": np.asarray(self.x_min).tolist(),
            "x_max": np.asarray(self.x_max).tolist(),
            "bits": self.bits,
            "axis": self.axis,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(x_min=data["x_min"], x_max=data["x_max"], bits=data.get("bits", 8.0), axis=data.get("axis"))


def _broadcast_bounds(r: CalibratedRange, ndim: int):
    lo, hi = np.asarray(r.x_min), np.asarray(r.x_max)
    if lo.ndim == 0:
        return lo, hi
    if r.axis is None or not -ndim <= r.axis < ndim:
        raise ContractError(f"per-channel range needs a valid axis for a {ndim}-d tensor, got {r.axis}")
    shape = [1] * ndim
    shape[r.axis] = lo.size
    return lo.reshape(shape), hi.reshape(shape)


def fake_quantize(x, r: CalibratedRange, bits: Optional[float] = None) -> Tensor:
    """
    Quantize then dequantize x on the uniform grid of range r.

    Values map to x_min + delta * clamp(round((x - x_min) / delta), 0, levels - 1)
    with levels = ceil(2^bits). In-range values move by at most delta / 2;
    out-of-range values clip to the ends. Rounding uses the straight-through
    estimator, so the gradient is 1 inside the range and 0 outside.

    Args:
        x: Tensor to quantize
        r: Calibrated range (per tensor, or per channel along r.axis)
        bits: Precision, defaults to r.bits; fractional values allowed

    Returns:
        Tensor with the same shape as x
    """
    bits = r.bits if bits is None else bits
    levels = levels_for_bits(bits)
    x = as_tensor(x)
    lo, hi = _broadcast_bounds(r, x.ndim)
    delta = (hi - lo) / (levels - 1)
    steps = clamp(ste_round(div(sub(x, lo), delta)), 0.0, float(levels - 1))
    return add(mul(steps, delta), lo)


def quantization_noise_var(r: CalibratedRange, bits: Optional[float] = None, realized: bool = False):
    """
    Variance of uniform quantization noise, delta^2 / 12.

    By default delta = width / (2^bits - 1), the continuous form that noise bits
    invert exactly. With realized=True the realized level count ceil(2^bits) is
    used instead; both agree for integer bits.
    """
    bits = r.bits if bits is None else bits
    if not bits > 0:
        raise DomainError(f"bits must be > 0, got {bits}")
    steps = (levels_for_bits(bits) - 1) if realized else (2.0 ** bits - 1.0)
    return _as_values((np.asarray(r.width) / steps) ** 2 / 12.0)


# -- range observers ------------------------------------------------------------

class MinMaxObserver:
    def __init__(self):
        self.lo, self.hi = np.inf, -np.inf

    def update(self, values: np.ndarray):
        self.lo = min(self.lo, float(values.min()))
        self.hi = max(self.hi, float(values.max()))

    def result(self):
        return self.lo, self.hi


class PercentileObserver:
    """Pools every observed value and clips both tails at p and 100 - p."""

    def __init__(self, percentile: float):
        self.percentile = percentile
        self.samples = []

    def update(self, values: np.ndarray):
        self.samples.append(np.asarray(values, dtype=np.float64).ravel())

    def result(self):
        pooled = np.concatenate(self.samples)
        lo = float(np.percentile(pooled, 100.0 - self.percentile))
        hi = float(np.percentile(pooled, self.percentile))
        return lo, hi


class MovingAverageObserver:
    """
    Running average of batch min/max over at most `max_batches` batches.

    decay=None weights every batch equally (arithmetic mean); otherwise
    new = decay * old + (1 - decay) * batch.
    """

    def __init__(self, decay: Optional[float] = None, max_batches: int = 100):
        self.decay = decay
        self.max_batches = max_batches
        self.count = 0
        self.lo = self.hi = None

    def update(self, values: np.ndarray):
        if self.count >= self.max_batches:
            return
        lo, hi = float(values.min()), float(values.max())
        self.count += 1
        if self.lo is None:
            self.lo, self.hi = lo, hi
            return
        decay = (self.count - 1) / self.count if self.decay is None else self.decay
        self.lo = decay * self.lo + (1.0 - decay) * lo
        self.hi = decay * self.hi + (1.0 - decay) * hi

    def result(self):
        return self.lo, self.hi


def make_observer(spec: QuantSpec):
    if spec.range_mode == "percentile":
        return PercentileObserver(spec.percentile)
    if spec.range_mode == "moving_average":
        return MovingAverageObserver(spec.decay, spec.max_batches)
    return MinMaxObserver()


def _range_from(lo, hi, spec: QuantSpec, axis=None) -> CalibratedRange:
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    if spec.symmetric:
        hi = np.maximum(np.abs(lo), np.abs(hi))
        lo = -hi
    return CalibratedRange(x_min=_as_values(lo), x_max=_as_values(hi), bits=spec.bits, axis=axis)


@dataclass
class LayerCalibration:
    """Calibrated ranges of one layer: weights, dot-product input and output."""

    output: CalibratedRange
    weight: Optional[CalibratedRange] = None
    input: Optional[CalibratedRange] = None
    range_mode: str = "minmax"

    def weight_range(self) -> Tuple[float, float]:
        if self.weight is None:
            raise ContractError("layer has no weight range")
        return self.weight.bounds

    def input_range(self) -> Tuple[float, float]:
        if self.input is None:
            raise ContractError("layer has no input range")
        return self.input.bounds

    def to_dict(self):
        return {
            "output": self.output.to_dict(),
            "weight": self.weight.to_dict() if self.weight else None,
            "input": self.input.to_dict() if self.input else None,
            "range_mode": self.range_mode,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            output=CalibratedRange.from_dict(data["output"]),
            weight=CalibratedRange.from_dict(data["weight"]) if data.get("weight") else None,
            input=CalibratedRange.from_dict(data["input"]) if data.get("input") else None,
            range_mode=data.get("range_mode", "minmax"),
        )


def weight_ranges(weight: np.ndarray, spec: Optional[QuantSpec] = None) -> CalibratedRange:
    """
    Exact min/max of a weight tensor, per output channel by default.

    Per-channel ranges run along `spec.axis`, which is the output channel
    (axis 0) for both dense rows and conv kernels.
    """
    spec = spec or QuantSpec(granularity="per_channel")
    weight = np.asarray(weight, dtype=np.float64)
    if spec.granularity == "per_tensor":
        return _range_from(weight.min(), weight.max(), spec)
    if not -weight.ndim <= spec.axis < weight.ndim:
        raise ContractError(f"axis {spec.axis} is not valid for a {weight.ndim}-d weight")
    rows = np.moveaxis(weight, spec.axis, 0).reshape(weight.shape[spec.axis], -1)
    return _range_from(rows.min(axis=1), rows.max(axis=1), spec, axis=spec.axis)


def calibrate(model, data: Iterable, spec: QuantSpec,
              weight_spec: Optional[QuantSpec] = None) -> Dict[int, LayerCalibration]:
    """
    Record quantization ranges for every noisy layer and residual add.

    Weights get exact min/max (per output channel unless weight_spec says
    otherwise; never percentile). Activations entering and leaving each dot
    product, and residual outputs, get per-tensor ranges in `spec.range_mode`,
    observed on clean floating-point forward passes.

    Args:
        model: ModelGraph whose calibration state is replaced
        data: Iterable of feature batches (arrays shaped like the model input)
        spec: Activation quantization spec
        weight_spec: Weight quantization spec, defaults to per-channel at spec.bits

    Returns:
        The new calibration mapping (also stored on the model)

    Raises:
        CalibrationError: If no batch is supplied
    """
    from .simulator import Simulator

    weight_spec = weight_spec or QuantSpec(bits=spec.bits, granularity="per_channel", symmetric=spec.symmetric)
    observers = {}

    def observe(index, event, values):
        if event in ("input", "output"):
            key = (index, event)
            if key not in observers:
                observers[key] = make_observer(spec)
            observers[key].update(values)

    simulator = Simulator(model)
    batches = 0
    for features in data:
        simulator.forward(Tensor(features), observer=observe)
        batches += 1
    if batches == 0:
        raise CalibrationError("calibration needs at least one batch")

    calibration = {}
    for index, layer in enumerate(model.layers):
        if (index, "output") not in observers:
            continue
        entry = LayerCalibration(
            output=_range_from(*observers[(index, "output")].result(), spec),
            range_mode=spec.range_mode,
        )
        if (index, "input") in observers:
            entry.input = _range_from(*observers[(index, "input")].result(), spec)
        if layer.noisy:
            entry.weight = weight_ranges(model.weights[index]["weight"], weight_spec)
        calibration[index] = entry

    model.calibration = calibration
    logger.info("calibrated %d layers over %d batches (%s)", len(calibration), batches, spec.range_mode)
    return calibration
