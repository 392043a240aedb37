"""
Energy allocation: learn energy per MAC for every layer (or output channel)
by minimizing the noisy negative log-likelihood plus a hinge penalty on the
log of total energy, and search for the smallest budget that keeps accuracy
above a floor.
"""

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DataError, DivergenceError, DomainError
from .functional import softmax_cross_entropy
from .noise import NoiseSpec, ShotNoise, photons_per_mac, snap_energy
from .optim import Adam
from .simulator import Simulator, evaluate
from .tensor import Tensor, exp, log, parameter, relu, tsum

logger = logging.getLogger(__name__)

GRANULARITIES = ("uniform", "per_layer", "per_channel")

# Coarse to fine; every arm's space contains the previous one
SEARCH_ARMS = GRANULARITIES

LossFn = Callable[[Tensor, Tuple[np.ndarray, np.ndarray]], Tensor]


@dataclass
class OptimConfig:
    """
    Settings of one allocation training run.

    Attributes:
        lam: Penalty weight on log total energy above the budget
        e_max: Total energy budget per inference (sum of E * n_mac)
        lr: Adam step size
        steps: Number of steps; None means `epochs` passes over the training subset
        epochs: Passes over the training subset when steps is None
        batch_size: Images per step
        seed: Seed for the subset, the batch order and the noise
        betas: Adam moment decay rates
        eps: Adam denominator offset
        grid_unit: Snap energies to multiples of this unit (None disables the grid)
        train_fraction: Fraction of the training split used for allocation training
        warm_start: Start search probes from the previous probe's allocation
        quantize_in_training: Apply calibrated fake quantization during training
        log_every: Steps between progress log lines
    """

    lam: float = 8.0
    e_max: float = 1.0
    lr: float = 0.01
    steps: Optional[int] = None
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grid_unit: Optional[float] = None
    train_fraction: float = 0.04
    warm_start: bool = False
    quantize_in_training: bool = True
    log_every: int = 50

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.lam >= 0:
            raise DomainError(f"lambda must be >= 0, got {self.lam}")
        if not self.e_max > 0:
            raise DomainError(f"E_max must be > 0, got {self.e_max}")
        if not self.lr > 0:
            raise DomainError(f"learning rate must be > 0, got {self.lr}")
        if not 0 < self.train_fraction <= 1:
            raise DomainError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")
        if self.grid_unit is not None and not self.grid_unit > 0:
            raise DomainError(f"grid unit must be > 0, got {self.grid_unit}")
        if self.batch_size < 1 or self.epochs < 1 or (self.steps is not None and self.steps < 1):
            raise DomainError("batch_size, epochs and steps must be positive")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "OptimConfig":
        return cls(**data)

    def with_budget(self, e_max: float) -> "OptimConfig":
        data = self.to_dict()
        data["e_max"] = e_max
        return OptimConfig.from_dict(data)


class EnergyAlloc:
    """
    Learnable energy per MAC, stored as log energies so E stays positive.

    `uniform` shares one value across the model, `per_layer` has one value per
    noisy layer and `per_channel` one per output channel (conv output channels,
    dense rows). Each entry carries the MACs it pays for, so total energy is
    sum(E * n_mac) at every granularity.
    """

    def __init__(self, granularity: str, layers: Sequence[int], log_energies: Dict[int, np.ndarray],
                 n_mac: Dict[int, np.ndarray], grid_unit: Optional[float] = None):
        if granularity not in GRANULARITIES:
            raise ContractError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
        self.granularity = granularity
        self.layers = list(layers)
        self.n_mac = {i: np.asarray(n_mac[i], dtype=np.float64) for i in self.layers}
        self.grid_unit = grid_unit
        self.trace: List[dict] = []
        if granularity == "uniform":
            shared = parameter(np.asarray(log_energies[self.layers[0]], dtype=np.float64).reshape(()))
            self.log_energies = {i: shared for i in self.layers}
        else:
            self.log_energies = {i: parameter(np.asarray(log_energies[i], dtype=np.float64)) for i in self.layers}

    # -- construction -----------------------------------------------------------

    @staticmethod
    def entry_macs(model, granularity: str) -> Dict[int, np.ndarray]:
        """MACs per entry; per-channel entries split a layer's MACs evenly across channels."""
        macs = {}
        for index in model.noisy_layers():
            n = float(model.n_mac(index))
            if granularity == "per_channel":
                channels = model.output_channels(index)
                macs[index] = np.full(channels, n / channels)
            else:
                macs[index] = np.asarray(n)
        return macs

    @classmethod
    def uniform(cls, model, energy_per_mac: float, granularity: str = "uniform",
                grid_unit: Optional[float] = None) -> "EnergyAlloc":
        """Every entry at the same energy per MAC."""
        if not energy_per_mac > 0:
            raise DomainError(f"energy per MAC must be > 0, got {energy_per_mac}")
        macs = cls.entry_macs(model, granularity)
        logs = {i: np.full(np.shape(m), math.log(energy_per_mac)) for i, m in macs.items()}
        return cls(granularity, model.noisy_layers(), logs, macs, grid_unit)

    @classmethod
    def initial(cls, model, granularity: str, e_max: float, grid_unit: Optional[float] = None) -> "EnergyAlloc":
        """Split the budget evenly: every entry starts at E_max / total MACs."""
        return cls.uniform(model, e_max / model.total_macs, granularity, grid_unit)

    def refine(self, model, granularity: str) -> "EnergyAlloc":
        """The same energies expressed at an equal or finer granularity."""
        if GRANULARITIES.index(granularity) < GRANULARITIES.index(self.granularity):
            raise ContractError(f"cannot coarsen a {self.granularity} allocation to {granularity}")
        macs = self.entry_macs(model, granularity)
        logs = {}
        for i in self.layers:
            value = self.log_energies[i].data
            logs[i] = np.broadcast_to(value, np.shape(macs[i])).copy() if np.ndim(value) == 0 else value.copy()
        return EnergyAlloc(granularity, self.layers, logs, macs, self.grid_unit)

    def copy(self) -> "EnergyAlloc":
        alloc = EnergyAlloc(self.granularity, self.layers,
                            {i: t.data.copy() for i, t in self.log_energies.items()},
                            self.n_mac, self.grid_unit)
        alloc.trace = copy.deepcopy(self.trace)
        return alloc

    # -- values -----------------------------------------------------------------

    def parameters(self) -> List[Tensor]:
        unique = {}
        for t in self.log_energies.values():
            unique[id(t)] = t
        return list(unique.values())

    def energy_tensors(self) -> Dict[int, Tensor]:
        """Differentiable energies; snapped to the grid with a straight-through gradient when enabled."""
        out = {}
        for i in self.layers:
            energy = exp(self.log_energies[i])
            out[i] = snap_energy(energy, self.grid_unit) if self.grid_unit else energy
        return out

    def energies(self) -> Dict[int, np.ndarray]:
        return {i: t.data for i, t in self.energy_tensors().items()}

    def total_energy_tensor(self, energies: Optional[Dict[int, Tensor]] = None) -> Tensor:
        energies = energies if energies is not None else self.energy_tensors()
        total = None
        for i in self.layers:
            term = tsum(energies[i] * self.n_mac[i])
            total = term if total is None else total + term
        return total

    @property
    def total_macs(self) -> float:
        return float(sum(np.sum(m) for m in self.n_mac.values()))

    def energy_per_mac(self) -> float:
        return total_energy(self) / self.total_macs

    def layer_energy_per_mac(self) -> Dict[int, float]:
        """MAC-weighted mean energy per MAC of each layer."""
        energies = self.energies()
        return {i: float(np.sum(energies[i] * self.n_mac[i]) / np.sum(self.n_mac[i])) for i in self.layers}

    # -- checkpoint -------------------------------------------------------------

    def to_dict(self, seed: Optional[int] = None, config_hash: Optional[str] = None) -> dict:
        energies = self.energies()
        return {
            "granularity": self.granularity,
            "layers": list(self.layers),
            "energies": [np.asarray(energies[i]).tolist() for i in self.layers],
            "n_mac": [np.asarray(self.n_mac[i]).tolist() for i in self.layers],
            "grid": {"unit": self.grid_unit} if self.grid_unit else None,
            "total_energy": total_energy(self),
            "seed": seed,
            "config_hash": config_hash,
        }

    @classmethod
    def from_dict(cls, data: dict, model=None) -> "EnergyAlloc":
        """
        Rebuild an allocation from its checkpoint form.

        Raises:
            DataError: If the checkpoint is malformed or does not fit the model
        """
        try:
            layers = [int(i) for i in data["layers"]]
            energies = [np.asarray(e, dtype=np.float64) for e in data["energies"]]
            macs = [np.asarray(n, dtype=np.float64) for n in data["n_mac"]]
            granularity = data["granularity"]
            grid = data.get("grid") or {}
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"malformed allocation checkpoint: {e}")
        if not (len(layers) == len(energies) == len(macs)):
            raise DataError("allocation checkpoint lists differ in length")
        if any(e.shape != n.shape or np.any(e <= 0) or not np.all(np.isfinite(e)) for e, n in zip(energies, macs)):
            raise DataError("allocation energies must be finite, positive and shaped like n_mac")
        if model is not None and layers != model.noisy_layers():
            raise DataError(f"allocation layers {layers} do not match model layers {model.noisy_layers()}")
        try:
            return cls(granularity, layers, {i: np.log(e) for i, e in zip(layers, energies)},
                       dict(zip(layers, macs)), grid.get("unit"))
        except ContractError as e:
            raise DataError(f"malformed allocation checkpoint: {e}")


def total_energy(alloc: EnergyAlloc) -> float:
    """Total energy per inference, sum over entries of E * n_mac."""
    energies = alloc.energies()
    return float(sum(np.sum(energies[i] * alloc.n_mac[i]) for i in alloc.layers))


def photons_report(alloc: EnergyAlloc, spec: ShotNoise) -> Dict[int, float]:
    """Mean photons per MAC of every layer."""
    return {i: float(photons_per_mac(e, spec)) for i, e in alloc.layer_energy_per_mac().items()}


def default_loss(outputs: Tensor, batch) -> Tensor:
    return softmax_cross_entropy(outputs, batch[1])


def _objective_terms(model, batch, alloc, spec, cfg, simulator=None, loss_fn=None):
    simulator = simulator or Simulator(model, noise=spec, quantize=spec.quantized and cfg.quantize_in_training,
                                       seed=cfg.seed)
    energies = alloc.energy_tensors()
    outputs = simulator.forward(Tensor(batch[0]), energies=energies)
    nll = (loss_fn or default_loss)(outputs, batch)
    total = alloc.total_energy_tensor(energies)
    penalty = cfg.lam * relu(log(total) - math.log(cfg.e_max))
    return nll, penalty, total


def objective(model, batch, alloc: EnergyAlloc, spec: NoiseSpec, cfg: OptimConfig,
              simulator: Optional[Simulator] = None, loss_fn: Optional[LossFn] = None) -> Tensor:
    """
    Mean NLL under noise plus lam * max(log(sum E * n_mac) - log(E_max), 0).

    The noise draws come from the simulator's streams; pass a simulator and call
    its `reset` between evaluations to hold them fixed.

    Args:
        model: Calibrated model with frozen weights
        batch: (features, labels)
        alloc: Allocation whose log energies receive gradients
        spec: Noise model
        cfg: Training settings (lam, e_max)
        simulator: Optional simulator owning the noise streams
        loss_fn: Optional loss_fn(outputs, batch), softmax cross-entropy by default

    Returns:
        Scalar Tensor
    """
    nll, penalty, _ = _objective_terms(model, batch, alloc, spec, cfg, simulator, loss_fn)
    return nll + penalty


def _training_batches(dataset, cfg: OptimConfig):
    subset = dataset.subset(cfg.train_fraction, seed=cfg.seed)
    per_epoch = max(1, math.ceil(len(subset) / cfg.batch_size))
    steps = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    step, epoch = 0, 0
    while step < steps:
        for batch in subset.batches(cfg.batch_size, shuffle=True, seed=cfg.seed + epoch):
            if step >= steps:
                return
            yield step, batch
            step += 1
        epoch += 1


def _divergence(message: str, last_good: EnergyAlloc) -> DivergenceError:
    diagnostics = {i: np.asarray(e).tolist() for i, e in last_good.energies().items()}
    return DivergenceError(message, last_good=last_good, diagnostics=diagnostics)


def train_alloc(model, dataset, spec: NoiseSpec, cfg: OptimConfig, granularity: str = "per_layer",
                alloc: Optional[EnergyAlloc] = None, loss_fn: Optional[LossFn] = None) -> EnergyAlloc:
    """
    Learn an energy allocation with Adam on the log energies; weights stay frozen.

    Training uses a seeded `train_fraction` subset of the dataset. Every step
    draws fresh noise keyed by (seed, layer, step). The returned allocation
    carries a trace with one row per step: step, nll, penalty, total_energy
    (the total energy used in that step's forward pass).

    Args:
        model: Calibrated model
        dataset: Training split
        spec: Noise model
        cfg: Training settings
        granularity: uniform, per_layer or per_channel (ignored when alloc is given)
        alloc: Starting allocation; defaults to the even split of cfg.e_max
        loss_fn: Optional loss_fn(outputs, batch)

    Returns:
        The trained allocation

    Raises:
        DivergenceError: If the loss, a gradient or a log energy becomes non-finite; carries the
            allocation from before the failing step
    """
    alloc = alloc.copy() if alloc is not None else EnergyAlloc.initial(model, granularity, cfg.e_max, cfg.grid_unit)
    alloc.grid_unit = cfg.grid_unit if cfg.grid_unit is not None else alloc.grid_unit
    optimizer = Adam(alloc.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    quantize = spec.quantized and cfg.quantize_in_training
    alloc.trace = []

    for step, batch in _training_batches(dataset, cfg):
        simulator = Simulator(model, noise=spec, quantize=quantize, seed=cfg.seed, shard=step)
        nll, penalty, total = _objective_terms(model, batch, alloc, spec, cfg, simulator, loss_fn)
        loss = nll + penalty
        snapshot = alloc.copy()
        if not np.isfinite(loss.item()):
            raise _divergence(f"non-finite loss at step {step}", snapshot)
        optimizer.zero_grad()
        loss.backward()
        if not all(np.all(np.isfinite(t.grad)) for t in alloc.parameters() if t.grad is not None):
            raise _divergence(f"non-finite gradient at step {step}", snapshot)
        optimizer.step()
        if not all(np.all(np.isfinite(t.data)) for t in alloc.parameters()):
            raise _divergence(f"non-finite log energies after step {step}", snapshot)
        alloc.trace.append({
            "step": step, "nll": nll.item(), "penalty": penalty.item(), "total_energy": total.item(),
        })
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("step %d: nll=%.4f penalty=%.4f total energy=%.4g", step, nll.item(), penalty.item(), total.item())

    logger.info("trained %s allocation over %d steps, total energy %.4g (budget %.4g)",
                alloc.granularity, len(alloc.trace), total_energy(alloc), cfg.e_max)
    return alloc


# -- budget search --------------------------------------------------------------

def accuracy_floor(float_accuracy: float, quantized_accuracy: float, budget: float = 2.0,
                   quantization_tolerance: float = 1.0) -> Tuple[float, str]:
    """
    Accuracy floor for the energy search and the baseline it refers to.

    The floor sits `budget` points below the float baseline, unless 8-bit
    quantization alone costs more than `quantization_tolerance` points; then it
    is measured from the quantized baseline.
    """
    if float_accuracy - quantized_accuracy > quantization_tolerance:
        return quantized_accuracy - budget, "quantized"
    return float_accuracy - budget, "float"


@dataclass
class Probe:
    energy_per_mac: float
    total_energy: float
    accuracy: float
    feasible: bool


@dataclass
class SearchResult:
    """Outcome of one search arm; energy_per_mac is None when infeasible."""

    granularity: str
    feasible: bool
    energy_per_mac: Optional[float]
    e_max: Optional[float]
    accuracy: Optional[float]
    alloc: Optional[EnergyAlloc] = None
    probes: List[Probe] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "granularity": self.granularity,
            "feasible": self.feasible,
            "energy_per_mac": self.energy_per_mac,
            "e_max": self.e_max,
            "accuracy": self.accuracy,
            "probes": [asdict(p) for p in self.probes],
            "layer_energy_per_mac": (
                {str(k): v for k, v in self.alloc.layer_energy_per_mac().items()} if self.alloc else None
            ),
        }


def improvement(dynamic: SearchResult, uniform: SearchResult) -> Optional[float]:
    """Energy saving of a dynamic arm over the uniform arm, 1 - E*_dynamic / E*_uniform."""
    if not (dynamic.feasible and uniform.feasible):
        return None
    return 1.0 - dynamic.energy_per_mac / uniform.energy_per_mac


def binary_search_min_energy(model, train_set, eval_set, spec: NoiseSpec, cfg: OptimConfig, acc_floor: float,
                             granularity: str = "per_layer", bracket: Tuple[float, float] = (1e-4, 1e4),
                             rel_tol: float = 1e-3, upper: Optional[Tuple[float, EnergyAlloc, float]] = None,
                             batch_size: int = 256, threads: int = 1, passes: int = 1,
                             average_logits: bool = False, loss_fn: Optional[LossFn] = None) -> SearchResult:
    """
    Smallest average energy per MAC whose allocation reaches `acc_floor`.

    The search variable is the budget per MAC e, with E_max = e * total MACs.
    Bisection runs in log space until hi / lo <= 1 + rel_tol. The uniform arm
    evaluates a single shared energy; dynamic arms retrain an allocation at every
    probe (from the even split, or the previous probe with cfg.warm_start).

    Args:
        upper: Known feasible (energy per MAC, allocation, accuracy) from a coarser
            arm; it replaces the top of the bracket, so this arm can only do
            as well or better
        bracket: (lo, hi) energy per MAC

    Returns:
        SearchResult; `feasible` is False when even the top of the bracket misses the floor
    """
    if granularity not in GRANULARITIES:
        raise ContractError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
    lo, hi = bracket
    if not 0 < lo < hi:
        raise DomainError(f"search bracket must satisfy 0 < lo < hi, got {bracket}")
    total_macs = model.total_macs
    probes: List[Probe] = []
    previous: List[EnergyAlloc] = []

    def probe(e):
        e_max = e * total_macs
        if granularity == "uniform":
            alloc = EnergyAlloc.uniform(model, e, "uniform", cfg.grid_unit)
        else:
            start = previous[-1] if cfg.warm_start and previous else None
            if start is not None:
                start = start.copy()
                for t in start.parameters():
                    t.data = t.data + math.log(e_max / total_energy(start))
            alloc = train_alloc(model, train_set, spec, cfg.with_budget(e_max), granularity, start, loss_fn)
            previous.append(alloc)
        accuracy = evaluate(model, eval_set, noise=spec, quantize=spec.quantized, energies=alloc.energies(),
                            seed=cfg.seed, batch_size=batch_size, threads=threads, passes=passes,
                            average_logits=average_logits)
        feasible = accuracy >= acc_floor
        probes.append(Probe(e, total_energy(alloc), accuracy, feasible))
        logger.info("%s probe %.4g J/MAC: accuracy %.2f%% (%s)", granularity, e, accuracy,
                    "feasible" if feasible else "infeasible")
        return alloc, accuracy, feasible

    if upper is not None:
        hi, best_alloc, best_acc = upper[0], upper[1].refine(model, granularity), upper[2]
    else:
        best_alloc, best_acc, feasible = probe(hi)
        if not feasible:
            logger.warning("%s arm infeasible: %.2f%% < floor %.2f%% at %.4g J/MAC",
                           granularity, best_acc, acc_floor, hi)
            return SearchResult(granularity, False, None, None, None, None, probes)

    if lo < hi:
        alloc, accuracy, feasible = probe(lo)
        if feasible:
            return SearchResult(granularity, True, lo, lo * total_macs, accuracy, alloc, probes)

    while hi / lo > 1.0 + rel_tol:
        mid = math.sqrt(lo * hi)
        alloc, accuracy, feasible = probe(mid)
        if feasible:
            hi, best_alloc, best_acc = mid, alloc, accuracy
        else:
            lo = mid
    return SearchResult(granularity, True, hi, hi * total_macs, best_acc, best_alloc, probes)


def search_arms(model, train_set, eval_set, spec: NoiseSpec, cfg: OptimConfig, acc_floor: float,
                bracket: Tuple[float, float], arms: Sequence[str] = SEARCH_ARMS, **kwargs) -> Dict[str, SearchResult]:
    """
    Run the search arms in order from coarse to fine.

    Each finer arm starts from the coarser arm's optimum as a feasible upper
    bracket, so E*_channel <= E*_layer <= E*_uniform on every run.
    """
    results: Dict[str, SearchResult] = {}
    upper = None
    for granularity in arms:
        result = binary_search_min_energy(model, train_set, eval_set, spec, cfg, acc_floor, granularity,
                                          bracket, upper=upper, **kwargs)
        results[granularity] = result
        if result.feasible:
            upper = (result.energy_per_mac, result.alloc, result.accuracy)
    return results
