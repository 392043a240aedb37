"""
Trains the small reference models whose frozen weights the energy experiments use.
"""

import logging
from typing import Optional

import numpy as np

from .errors import ContractError, TrainingError
from .functional import softmax_cross_entropy
from .models import PRESETS, ModelGraph
from .optim import Adam
from .simulator import Simulator, evaluate
from .storage import save_model
from .tensor import Tensor, parameter

logger = logging.getLogger(__name__)

# Clean test accuracy (percent) a preset must reach on MNIST
PRESET_MIN_ACCURACY = {"mlp": 97.0, "cnn": 98.5, "rescnn": 98.5}


def train_reference_model(preset: str, train_set, test_set=None, seed: int = 0, epochs: int = 3,
                          lr: float = 1e-3, batch_size: int = 64, min_accuracy: Optional[float] = None,
                          out_path=None, threads: int = 1) -> ModelGraph:
    """
    Train a preset architecture with Adam on softmax cross-entropy.

    Training is deterministic for a given seed. Final weights are rounded to
    float32 so that saving and loading reproduces them exactly.

    Args:
        preset: One of mlp, cnn, rescnn
        train_set: Training split
        test_set: Split used for the recorded clean accuracy (defaults to train_set)
        seed: Seed for initialization and batch order
        epochs: Passes over the training split
        lr: Adam step size
        batch_size: Samples per step
        min_accuracy: Required clean accuracy in percent; defaults per preset, 0 disables
        out_path: Optional manifest path to save to

    Returns:
        ModelGraph with weights and metadata {preset, seed, clean_accuracy}

    Raises:
        ContractError: Unknown preset
        TrainingError: If the clean accuracy stays below min_accuracy
    """
    if preset not in PRESETS:
        raise ContractError(f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
    model = PRESETS[preset]()
    train_set.check_model(model)
    model.init_weights(seed)

    params = {i: {k: parameter(v) for k, v in w.items()} for i, w in model.weights.items()}
    optimizer = Adam([p for w in params.values() for p in w.values()], lr=lr)
    simulator = Simulator(model)

    for epoch in range(epochs):
        losses = []
        for features, labels in train_set.batches(batch_size, shuffle=True, seed=seed + epoch):
            loss = softmax_cross_entropy(simulator.forward(Tensor(features), weights=params), labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        logger.info("epoch %d/%d: mean loss %.4f", epoch + 1, epochs, float(np.mean(losses)))

    model.weights = {
        i: {k: p.data.astype(np.float32).astype(np.float64) for k, p in w.items()} for i, w in params.items()
    }
    accuracy = evaluate(model, test_set if test_set is not None else train_set, threads=threads)
    model.metadata.update({"preset": preset, "seed": seed, "clean_accuracy": accuracy})
    logger.info("%s reference model: clean accuracy %.2f%%", preset, accuracy)

    required = PRESET_MIN_ACCURACY.get(preset, 0.0) if min_accuracy is None else min_accuracy
    if accuracy < required:
        raise TrainingError(f"{preset} reached {accuracy:.2f}% clean accuracy, needs {required:.2f}%")
    if out_path is not None:
        save_model(model, out_path)
    return model
