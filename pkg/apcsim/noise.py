"""
Stochastic dot-product engines for thermal, weight and shot noise.

Every model scales its noise standard deviation with 1/sqrt(E), where E is the
energy per MAC spent on the dot product. The noise draws are plain inputs to
the computation, so outputs stay differentiable in E, W and x.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, ClassVar, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError, ContractError, DomainError
from .functional import l2_norm, matmul
from .tensor import Function, Tensor, as_tensor, reshape, round_half_away, sqrt, transpose

logger = logging.getLogger(__name__)

# Photon energy at 1.55 um, in joules
PHOTON_ENERGY_J = 1.28e-19

# Stream key reserved for draws that persist across calls
_PERSISTENT_KEY = 0xFFFFFFFF


def _check_positive(name, value):
    if not value > 0:
        raise DomainError(f"{name} must be > 0, got {value}")


@dataclass(frozen=True)
class ThermalNoise:
    """Signal independent receiver noise, scaled by operand ranges and sqrt(N)."""

    sigma_t: float = 0.01

    kind: ClassVar[str] = "thermal"
    quantized: ClassVar[bool] = True

    def __post_init__(self):
        _check_positive("sigma_t", self.sigma_t)

    def to_dict(self):
        return {"kind": self.kind, **asdict(self)}


@dataclass(frozen=True)
class WeightNoise:
    """Gaussian read noise on every stored weight."""

    sigma_w: float = 0.1
    persistent: bool = False

    kind: ClassVar[str] = "weight"
    quantized: ClassVar[bool] = True

    def __post_init__(self):
        _check_positive("sigma_w", self.sigma_w)

    def to_dict(self):
        return {"kind": self.kind, **asdict(self)}


@dataclass(frozen=True)
class ShotNoise:
    """Photon shot noise of a homodyne multiplier; energies are in joules per MAC."""

    photon_energy_j: float = PHOTON_ENERGY_J
    responsivity: float = 1.0
    sigma_s: float = 1.0

    kind: ClassVar[str] = "shot"
    quantized: ClassVar[bool] = False

    def __post_init__(self):
        _check_positive("photon_energy_j", self.photon_energy_j)
        _check_positive("responsivity", self.responsivity)
        _check_positive("sigma_s", self.sigma_s)

    def to_dict(self):
        return {"kind": self.kind, **asdict(self)}


NoiseSpec = Union[ThermalNoise, WeightNoise, ShotNoise]

NOISE_KINDS = {cls.kind: cls for cls in (ThermalNoise, WeightNoise, ShotNoise)}


def noise_spec_from_dict(data: dict) -> NoiseSpec:
    """Build a noise spec from its config-file form."""
    data = dict(data)
    kind = data.pop("kind", None)
    if kind not in NOISE_KINDS:
        raise ConfigError(f"unknown noise kind {kind!r}, expected one of {sorted(NOISE_KINDS)}")
    try:
        return NOISE_KINDS[kind](**data)
    except TypeError as e:
        raise ConfigError(f"bad {kind} noise parameters: {e}")


class NoiseStream:
    """
    Reproducible standard-normal draws keyed by (seed, layer, shard, counter).

    Each call to `normal` uses the next counter value, so the n-th draw of a
    stream is the same on every run and in every thread. `reset` rewinds the
    counter, which replays the same draws (common random numbers).
    """

    def __init__(self, seed: int = 0, layer: int = 0, shard: int = 0):
        self.seed, self.layer, self.shard = int(seed), int(layer), int(shard)
        self.counter = 0

    def normal(self, shape) -> np.ndarray:
        rng = np.random.default_rng([self.seed, self.layer, self.shard, self.counter])
        self.counter += 1
        return rng.standard_normal(shape)

    def persistent_normal(self, shape) -> np.ndarray:
        # same draw for every call and shard: programmed-once weights
        rng = np.random.default_rng([self.seed, self.layer, _PERSISTENT_KEY, 0])
        return rng.standard_normal(shape)

    def reset(self) -> None:
        self.counter = 0


@dataclass
class NoiseContext:
    """
    Per-layer quantities a noise model needs besides W and x.

    Attributes:
        n: MACs per dot product (contraction length; C*kh*kw for conv)
        energy: Energy per MAC, scalar or one value per output channel
        weight_range: (w_min, w_max) of the layer weights
        input_range: (x_min, x_max) of the layer input
        stream: Source of the standard-normal draws
    """

    n: int
    energy: Any = 1.0
    weight_range: Optional[Tuple[float, float]] = None
    input_range: Optional[Tuple[float, float]] = None
    stream: NoiseStream = field(default_factory=NoiseStream)

    def __post_init__(self):
        if int(self.n) <= 0:
            raise DomainError(f"N must be a positive integer, got {self.n}")

    def energy_tensor(self) -> Tensor:
        energy = as_tensor(self.energy)
        if np.any(energy.data <= 0) or not np.all(np.isfinite(energy.data)):
            raise DomainError(f"energy per MAC must be finite and > 0, got {energy.data}")
        return energy

    def energy_values(self) -> np.ndarray:
        return self.energy_tensor().data

    def weight_span(self) -> float:
        if self.weight_range is None:
            raise ContractError("noise context has no weight range; calibrate the model first")
        return float(self.weight_range[1] - self.weight_range[0])

    def input_span(self) -> float:
        if self.input_range is None:
            raise ContractError("noise context has no input range; calibrate the model first")
        return float(self.input_range[1] - self.input_range[0])


def photons_per_mac(energy, spec: ShotNoise):
    """Mean photon count per MAC, E * responsivity / photon energy."""
    return np.asarray(energy, dtype=np.float64) * spec.responsivity / spec.photon_energy_j


def noise_std(spec: NoiseSpec, ctx: NoiseContext, norms=None):
    """
    Closed-form standard deviation of the noise added by `noisy_matmul`.

    Thermal returns the per-output std. Weight returns the per-weight std, or
    the per-output std when norms are given (only the input norm is used).
    Shot needs norms (||W_i||, ||x||) and returns the per-output std.

    Args:
        spec: Noise model
        ctx: Layer context
        norms: Optional (weight row norm, input norm), scalars or arrays

    Returns:
        float or ndarray
    """
    energy = ctx.energy_values()
    if isinstance(spec, ThermalNoise):
        std = np.sqrt(ctx.n) * ctx.weight_span() * ctx.input_span() * spec.sigma_t / np.sqrt(energy)
    elif isinstance(spec, WeightNoise):
        std = ctx.weight_span() * spec.sigma_w / np.sqrt(energy)
        if norms is not None:
            std = std * np.asarray(norms[1], dtype=np.float64)
    elif isinstance(spec, ShotNoise):
        if norms is None:
            raise ContractError("shot noise std needs the norms (||W_i||, ||x||)")
        w_norm, x_norm = (np.asarray(v, dtype=np.float64) for v in norms)
        std = w_norm * x_norm * spec.sigma_s / np.sqrt(ctx.n * photons_per_mac(energy, spec))
    else:
        raise ContractError(f"unsupported noise spec {spec!r}")
    return float(std) if np.ndim(std) == 0 else std


def noisy_matmul(W, x, spec: NoiseSpec, ctx: NoiseContext) -> Tensor:
    """
    Compute y = x W^T with analog noise.

    W is (O, N) with one row per output channel, x is (R, N) with one row per
    dot product (batch rows, or im2col patches). Per-channel energies have
    shape (O,).

    Returns:
        Tensor (R, O)

    Raises:
        ContractError: Missing ranges, or N differs from the contraction length
        DomainError: Non-positive energy
    """
    W, x = as_tensor(W), as_tensor(x)
    if W.ndim != 2 or x.ndim != 2:
        raise ContractError(f"noisy_matmul needs 2-d operands, got {W.shape} and {x.shape}")
    if W.shape[1] != ctx.n:
        raise ContractError(f"context N={ctx.n} differs from contraction length {W.shape[1]}")
    energy = ctx.energy_tensor()
    rows, outputs = x.shape[0], W.shape[0]

    if isinstance(spec, ThermalNoise):
        scale = np.sqrt(ctx.n) * ctx.weight_span() * ctx.input_span() * spec.sigma_t
        xi = ctx.stream.normal((rows, outputs))
        return matmul(x, transpose(W)) + Tensor(xi * scale) / sqrt(energy)

    if isinstance(spec, WeightNoise):
        shape = W.shape
        xi = ctx.stream.persistent_normal(shape) if spec.persistent else ctx.stream.normal(shape)
        column_energy = reshape(energy, (outputs, 1)) if energy.size > 1 else energy
        noisy_w = W + Tensor(xi * ctx.weight_span() * spec.sigma_w) / sqrt(column_energy)
        return matmul(x, transpose(noisy_w))

    if isinstance(spec, ShotNoise):
        xi = ctx.stream.normal((rows, outputs))
        photons = energy * (spec.responsivity / spec.photon_energy_j)
        x_norm = reshape(l2_norm(x, axis=1), (rows, 1))
        w_norm = reshape(l2_norm(W, axis=1), (1, outputs))
        std = x_norm * w_norm * spec.sigma_s / sqrt(photons * float(ctx.n))
        return matmul(x, transpose(W)) + Tensor(xi) * std

    raise ContractError(f"unsupported noise spec {spec!r}")


def simulate_redundant(W, x, spec: NoiseSpec, ctx: NoiseContext, K: int) -> Tensor:
    """
    Average K independent noisy evaluations at energy ctx.energy.

    The result has the distribution of a single evaluation at K times the energy.
    """
    if int(K) != K or K < 1:
        raise DomainError(f"redundancy K must be a positive integer, got {K}")
    total = noisy_matmul(W, x, spec, ctx)
    for _ in range(int(K) - 1):
        total = total + noisy_matmul(W, x, spec, ctx)
    return total / float(K)


def redundancy_for_energy(e_target, e_unit: float):
    """
    Number of repetitions K = max(1, round(E_target / E_unit)).

    Works elementwise on arrays of targets; a scalar target gives an int.
    """
    _check_positive("E_unit", e_unit)
    target = np.asarray(e_target, dtype=np.float64)
    if not np.all(np.isfinite(target)):
        raise DomainError(f"energy per MAC must be finite, got {target}")
    k = np.maximum(1.0, round_half_away(target / e_unit)).astype(np.int64)
    return int(k) if k.ndim == 0 else k


class SnapToGrid(Function):
    def forward(self, energy, unit=1.0):
        return unit * np.asarray(redundancy_for_energy(energy, unit), dtype=np.float64)

    def backward(self, grad):
        return (grad,)


def snap_energy(energy, e_unit: float) -> Tensor:
    """Snap energies to whole multiples of e_unit (at least one) with a straight-through gradient."""
    _check_positive("E_unit", e_unit)
    return SnapToGrid.apply(energy, unit=float(e_unit))
