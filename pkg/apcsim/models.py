"""
Model graph definitions.
A ModelGraph is an ordered list of layers plus their weights and calibration state.
"""

import copy
from dataclasses import asdict, dataclass
from typing import ClassVar, Dict, List, Optional, Tuple

import numpy as np

from .errors import DimensionError
from .functional import conv_output_size

Shape = Tuple[int, ...]


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    kind: ClassVar[str] = "dense"
    noisy: ClassVar[bool] = True

    def output_shape(self, in_shape: Shape) -> Shape:
        if tuple(in_shape) != (self.in_features,):
            raise DimensionError(f"expects input ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def weight_shapes(self) -> Dict[str, Shape]:
        return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}

    def contraction(self, in_shape: Shape) -> int:
        return self.in_features

    def output_channels(self) -> int:
        return self.out_features

    def n_mac(self, in_shape: Shape) -> int:
        return self.in_features * self.out_features


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    in_channels: int
    kh: int
    kw: int
    stride: int = 1
    padding: int = 0

    kind: ClassVar[str] = "conv2d"
    noisy: ClassVar[bool] = True

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise DimensionError(f"expects input ({self.in_channels}, H, W), got {tuple(in_shape)}")
        _, height, width = in_shape
        if self.kh > height + 2 * self.padding or self.kw > width + 2 * self.padding:
            raise DimensionError(f"kernel {self.kh}x{self.kw} larger than padded input {height}x{width}")
        return (
            self.out_channels,
            conv_output_size(height, self.kh, self.stride, self.padding),
            conv_output_size(width, self.kw, self.stride, self.padding),
        )

    def weight_shapes(self) -> Dict[str, Shape]:
        return {"weight": (self.out_channels, self.in_channels, self.kh, self.kw), "bias": (self.out_channels,)}

    def contraction(self, in_shape: Shape) -> int:
        return self.in_channels * self.kh * self.kw

    def output_channels(self) -> int:
        return self.out_channels

    def n_mac(self, in_shape: Shape) -> int:
        _, out_h, out_w = self.output_shape(in_shape)
        return out_h * out_w * self.out_channels * self.contraction(in_shape)


@dataclass(frozen=True)
class _Elementwise:
    noisy: ClassVar[bool] = False

    def output_shape(self, in_shape: Shape) -> Shape:
        return tuple(in_shape)

    def weight_shapes(self) -> Dict[str, Shape]:
        return {}


@dataclass(frozen=True)
class ReLU(_Elementwise):
    kind: ClassVar[str] = "relu"


@dataclass(frozen=True)
class SoftmaxHead(_Elementwise):
    """Marks the logits; softmax itself lives in the loss and in argmax evaluation."""

    kind: ClassVar[str] = "softmax_head"


@dataclass(frozen=True)
class Flatten(_Elementwise):
    kind: ClassVar[str] = "flatten"

    def output_shape(self, in_shape: Shape) -> Shape:
        return (int(np.prod(in_shape)),)


@dataclass(frozen=True)
class MaxPool(_Elementwise):
    kernel: int = 2
    stride: int = 2

    kind: ClassVar[str] = "maxpool"

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3:
            raise DimensionError(f"pooling expects (C, H, W), got {tuple(in_shape)}")
        channels, height, width = in_shape
        if self.kernel > height or self.kernel > width:
            raise DimensionError(f"pool kernel {self.kernel} larger than input {height}x{width}")
        return (channels, (height - self.kernel) // self.stride + 1, (width - self.kernel) // self.stride + 1)


@dataclass(frozen=True)
class AvgPool(MaxPool):
    kind: ClassVar[str] = "avgpool"


@dataclass(frozen=True)
class ResidualAdd(_Elementwise):
    """Adds the output of layer `source` (-1 for the model input) to the running activation."""

    source: int = -1

    kind: ClassVar[str] = "residual_add"


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, SoftmaxHead, Flatten, MaxPool, AvgPool, ResidualAdd)}


def layer_params(layer) -> dict:
    return asdict(layer)


def layer_from_dict(kind: str, params: dict):
    """Build a layer from its manifest kind and parameters."""
    if kind not in LAYER_KINDS:
        raise KeyError(kind)
    return LAYER_KINDS[kind](**params)


class ModelGraph:
    """
    An ordered stack of layers with weights and calibration state.

    Shapes are checked when the graph is built; every layer's output shape and
    MAC count are cached. Weights are float64 arrays keyed by layer index.
    """

    def __init__(self, name: str, input_shape: Shape, classes: int, layers: List,
                 weights: Optional[Dict[int, Dict[str, np.ndarray]]] = None,
                 calibration: Optional[Dict] = None, metadata: Optional[dict] = None):
        self.name = name
        self.input_shape = tuple(int(s) for s in input_shape)
        self.classes = int(classes)
        self.layers = list(layers)
        self.weights = weights if weights is not None else {}
        self.calibration = calibration if calibration is not None else {}
        self.metadata = metadata if metadata is not None else {}
        self.shapes = self.infer_shapes()

    def infer_shapes(self) -> List[Shape]:
        """Propagate shapes from the input through every layer."""
        shapes = []
        current = self.input_shape
        for index, layer in enumerate(self.layers):
            try:
                if isinstance(layer, ResidualAdd):
                    if not -1 <= layer.source < index:
                        raise DimensionError(f"residual source {layer.source} must precede the layer")
                    source_shape = self.input_shape if layer.source == -1 else shapes[layer.source]
                    if tuple(source_shape) != tuple(current):
                        raise DimensionError(f"residual shapes differ: {source_shape} vs {current}")
                current = layer.output_shape(current)
            except DimensionError as e:
                raise DimensionError(f"layer {index} ({layer.kind}): {e}")
            shapes.append(tuple(current))
        if current != (self.classes,):
            raise DimensionError(f"model output {current} does not match {self.classes} classes")
        return shapes

    def check_weights(self) -> None:
        for index, layer in enumerate(self.layers):
            for key, shape in layer.weight_shapes().items():
                array = self.weights.get(index, {}).get(key)
                if array is None:
                    raise DimensionError(f"layer {index} ({layer.kind}): missing {key}")
                if tuple(array.shape) != tuple(shape):
                    raise DimensionError(f"layer {index} ({layer.kind}): {key} has shape {array.shape}, expected {shape}")

    def input_shape_of(self, index: int) -> Shape:
        return self.input_shape if index == 0 else self.shapes[index - 1]

    def noisy_layers(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.noisy]

    def contraction(self, index: int) -> int:
        return self.layers[index].contraction(self.input_shape_of(index))

    def output_channels(self, index: int) -> int:
        return self.layers[index].output_channels()

    def n_mac(self, index: int) -> int:
        layer = self.layers[index]
        return layer.n_mac(self.input_shape_of(index)) if layer.noisy else 0

    def mac_counts(self) -> Dict[int, int]:
        return {i: self.n_mac(i) for i in self.noisy_layers()}

    @property
    def total_macs(self) -> int:
        return sum(self.mac_counts().values())

    def init_weights(self, seed: int = 0) -> None:
        """He-normal weights and zero biases for every noisy layer."""
        rng = np.random.default_rng(seed)
        for index in self.noisy_layers():
            shapes = self.layers[index].weight_shapes()
            fan_in = self.contraction(index)
            self.weights[index] = {
                "weight": rng.standard_normal(shapes["weight"]) * np.sqrt(2.0 / fan_in),
                "bias": np.zeros(shapes["bias"]),
            }

    def copy(self) -> "ModelGraph":
        return ModelGraph(
            self.name, self.input_shape, self.classes, self.layers,
            weights={i: {k: v.copy() for k, v in w.items()} for i, w in self.weights.items()},
            calibration=copy.deepcopy(self.calibration),
            metadata=copy.deepcopy(self.metadata),
        )


def _stack(name, input_shape, classes, layers):
    return ModelGraph(name, input_shape, classes, layers)


def mlp_preset(hidden: int = 128) -> ModelGraph:
    """784-128-10 perceptron on flattened 28x28 images."""
    return _stack("mlp", (1, 28, 28), 10, [
        Flatten(), Dense(784, hidden), ReLU(), Dense(hidden, 10), SoftmaxHead(),
    ])


def cnn_preset() -> ModelGraph:
    """Two convolutions and two dense layers, about 136k MACs per image."""
    return _stack("cnn", (1, 28, 28), 10, [
        Conv2d(8, 1, 3, 3, stride=1, padding=1), ReLU(), MaxPool(2, 2),
        Conv2d(8, 8, 3, 3, stride=2, padding=1), ReLU(),
        Flatten(), Dense(392, 128), ReLU(), Dense(128, 10), SoftmaxHead(),
    ])


def rescnn_preset() -> ModelGraph:
    """The cnn preset with one residual block after the first pooling stage."""
    return _stack("rescnn", (1, 28, 28), 10, [
        Conv2d(8, 1, 3, 3, stride=1, padding=1), ReLU(), MaxPool(2, 2),
        Conv2d(8, 8, 3, 3, stride=1, padding=1), ReLU(), ResidualAdd(source=2),
        Conv2d(8, 8, 3, 3, stride=2, padding=1), ReLU(),
        Flatten(), Dense(392, 128), ReLU(), Dense(128, 10), SoftmaxHead(),
    ])


PRESETS = {"mlp": mlp_preset, "cnn": cnn_preset, "rescnn": rescnn_preset}
