"""
Runs a ModelGraph forward under a quantization and noise setting.

Dense and conv layers are the only places noise enters: their dot products go
through `noisy_matmul`. Pooling, flatten, ReLU and residual adds are noiseless.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from .errors import ContractError, DataError, DomainError
from .functional import avg_pool2d, conv2d, matmul, max_pool2d
from .models import AvgPool, Conv2d, Dense, Flatten, MaxPool, ModelGraph, ReLU, ResidualAdd, SoftmaxHead
from .noise import NoiseContext, NoiseSpec, NoiseStream, noisy_matmul
from .quantization import fake_quantize
from .tensor import Tensor, as_tensor, relu, reshape, transpose

logger = logging.getLogger(__name__)

# observer(layer_index, event, values); events are "input", "rows" and "output"
Observer = Callable[[int, str, np.ndarray], None]


class Simulator:
    """
    Forward execution of one model under one setting.

    Args:
        model: Model to run
        noise: Noise spec, or None for a noiseless run
        quantize: Fake-quantize weights and dot-product inputs at `bits`
        bits: Weight and activation precision when quantizing
        seed: Noise seed
        shard: Index of the batch shard this simulator serves
        residual_bits: Requantization precision of residual adds
    """

    def __init__(self, model: ModelGraph, noise: Optional[NoiseSpec] = None, quantize: bool = False,
                 bits: float = 8.0, seed: int = 0, shard: int = 0, residual_bits: float = 8.0):
        self.model = model
        self.noise = noise
        self.quantize = quantize
        self.bits = bits
        self.residual_bits = residual_bits
        self.streams = {i: NoiseStream(seed, i, shard) for i in model.noisy_layers()}
        self._quantized_weights: Dict[int, Tensor] = {}

    def reset(self) -> None:
        """Rewind every noise stream so the next forward pass replays the same draws."""
        for stream in self.streams.values():
            stream.reset()

    def _calibration(self, index):
        entry = self.model.calibration.get(index)
        if entry is None:
            raise ContractError(f"layer {index} has no calibration; run calibrate first")
        return entry

    def layer_weight(self, index, weights=None):
        if weights is not None and index in weights:
            weight = as_tensor(weights[index]["weight"])
            if self.quantize:
                weight = fake_quantize(weight, self._calibration(index).weight, self.bits)
            return weight
        if not self.quantize:
            return Tensor(self.model.weights[index]["weight"])
        if index not in self._quantized_weights:
            self._quantized_weights[index] = fake_quantize(
                Tensor(self.model.weights[index]["weight"]), self._calibration(index).weight, self.bits
            )
        return self._quantized_weights[index]

    def _bias(self, index, weights):
        if weights is not None and index in weights:
            return as_tensor(weights[index]["bias"])
        return Tensor(self.model.weights[index]["bias"])

    def _context(self, index, energy) -> NoiseContext:
        needs_ranges = self.noise.kind in ("thermal", "weight")
        entry = self._calibration(index) if needs_ranges else self.model.calibration.get(index)
        return NoiseContext(
            n=self.model.contraction(index),
            energy=energy,
            weight_range=entry.weight_range() if entry is not None and entry.weight is not None else None,
            input_range=entry.input_range() if entry is not None and entry.input is not None else None,
            stream=self.streams[index],
        )

    def _noisy_layer(self, index, layer, x, energies, output_bits, observer, weights):
        if observer:
            observer(index, "input", x.data)
        if self.quantize:
            x = fake_quantize(x, self._calibration(index).input, self.bits)
        weight = self.layer_weight(index, weights)

        ctx = None
        if self.noise is not None:
            if energies is None or index not in energies:
                raise ContractError(f"no energy allocated to layer {index}")
            ctx = self._context(index, energies[index])

        def dot(rows: Tensor, weight_rows: Tensor) -> Tensor:
            if observer:
                observer(index, "rows", rows.data)
            if ctx is None:
                return matmul(rows, transpose(weight_rows))
            return noisy_matmul(weight_rows, rows, self.noise, ctx)

        bias = self._bias(index, weights)
        if isinstance(layer, Dense):
            out = dot(x, weight) + bias
        else:
            out = conv2d(x, weight, layer.stride, layer.padding, dot=dot) + reshape(bias, (1, -1, 1, 1))

        if observer:
            observer(index, "output", out.data)
        if output_bits and index in output_bits:
            out = fake_quantize(out, self._calibration(index).output, output_bits[index])
        return out

    def forward(self, x, energies: Optional[Mapping[int, object]] = None,
                output_bits: Optional[Mapping[int, float]] = None,
                observer: Optional[Observer] = None,
                weights: Optional[Mapping[int, Mapping[str, Tensor]]] = None) -> Tensor:
        """
        Run the model and return the logits.

        Args:
            x: Input batch shaped (B, *model.input_shape)
            energies: Energy per MAC for each noisy layer (scalar or per channel)
            output_bits: Fractional precisions at which to quantize dot-product outputs
            observer: Callback receiving intermediate arrays
            weights: Replacement weight tensors (used by the trainer)

        Returns:
            Tensor (B, classes)
        """
        x = as_tensor(x)
        model_input = x
        outputs = []
        for index, layer in enumerate(self.model.layers):
            if isinstance(layer, (Dense, Conv2d)):
                x = self._noisy_layer(index, layer, x, energies, output_bits, observer, weights)
            elif isinstance(layer, ReLU):
                x = relu(x)
            elif isinstance(layer, AvgPool):
                x = avg_pool2d(x, layer.kernel, layer.stride)
            elif isinstance(layer, MaxPool):
                x = max_pool2d(x, layer.kernel, layer.stride)
            elif isinstance(layer, Flatten):
                x = reshape(x, (x.shape[0], -1))
            elif isinstance(layer, ResidualAdd):
                x = x + (outputs[layer.source] if layer.source >= 0 else model_input)
                if observer:
                    observer(index, "output", x.data)
                if self.quantize:
                    x = fake_quantize(x, self._calibration(index).output, self.residual_bits)
            elif isinstance(layer, SoftmaxHead):
                pass
            else:
                raise ContractError(f"layer {index}: unsupported kind {layer.kind!r}")
            outputs.append(x)
        return x

    __call__ = forward


def predict(model: ModelGraph, features: np.ndarray, **kwargs) -> np.ndarray:
    """Logits of a noiseless, unquantized forward pass."""
    return Simulator(model, **kwargs).forward(Tensor(features)).data


def _energy_arrays(energies):
    if energies is None:
        return None
    return {i: np.asarray(e.data if isinstance(e, Tensor) else e, dtype=np.float64) for i, e in energies.items()}


def evaluate(model: ModelGraph, dataset, noise: Optional[NoiseSpec] = None, quantize: bool = False,
             energies: Optional[Mapping[int, object]] = None, seed: int = 0, batch_size: int = 256,
             threads: int = 1, passes: int = 1, average_logits: bool = False,
             output_bits: Optional[Mapping[int, float]] = None, bits: float = 8.0) -> float:
    """
    Top-1 accuracy in percent.

    Batches are sharded across `threads` workers. Every batch owns noise streams
    keyed by its index, so the result does not depend on the thread count.

    Args:
        passes: Stochastic passes per batch; one fresh noise draw per image and pass
        average_logits: Average logits over passes before taking the argmax
            (otherwise accuracies are averaged over passes)

    Raises:
        DataError: If the dataset is empty
        DomainError: If passes < 1
    """
    if len(dataset) == 0:
        raise DataError(f"cannot evaluate on an empty {dataset.split} split")
    if passes < 1:
        raise DomainError(f"passes must be >= 1, got {passes}")
    energies = _energy_arrays(energies)

    def run(shard):
        start = shard * batch_size
        features = dataset.features[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        simulator = Simulator(model, noise=noise, quantize=quantize, bits=bits, seed=seed, shard=shard)
        logits_sum, correct = None, 0
        for _ in range(passes):
            logits = simulator.forward(Tensor(features), energies=energies, output_bits=output_bits).data
            if average_logits:
                logits_sum = logits if logits_sum is None else logits_sum + logits
            else:
                correct += int(np.sum(logits.argmax(axis=1) == labels))
        if average_logits:
            return int(np.sum(logits_sum.argmax(axis=1) == labels)) * passes
        return correct

    shards = range((len(dataset) + batch_size - 1) // batch_size)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            counts = list(pool.map(run, shards))
    else:
        counts = [run(shard) for shard in shards]
    return 100.0 * sum(counts) / (len(dataset) * passes)
