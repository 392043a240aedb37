"""
Simple model storage module.
A model is a JSON manifest plus a raw little-endian float32 weight blob.
"""

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .errors import CalibrationError, ChecksumError, DimensionError, LoadError
from .models import ModelGraph, layer_from_dict, layer_params
from .quantization import LayerCalibration

logger = logging.getLogger(__name__)

BLOB_DTYPE = np.dtype("<f4")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_json(path, data) -> None:
    """Write JSON with sorted keys so equal content gives identical bytes."""
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def save_model(model: ModelGraph, path) -> Path:
    """
    Save a model as `<path>` (manifest) and `<path stem>.bin` (weights).

    Tensors are written in layer order, weight before bias, as float32.

    Args:
        model: Model with weights for every noisy layer
        path: Manifest path

    Returns:
        Path: The manifest path
    """
    model.check_weights()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path = path.with_suffix(".bin")

    chunks, layers, offset = [], [], 0
    for index, layer in enumerate(model.layers):
        offsets = {}
        for key in layer.weight_shapes():
            array = np.ascontiguousarray(model.weights[index][key], dtype=BLOB_DTYPE)
            offsets[key] = {"offset": offset, "shape": list(array.shape)}
            offset += array.size
            chunks.append(array.tobytes())
        layers.append({"kind": layer.kind, "params": layer_params(layer), "weight_offsets": offsets})
    blob = b"".join(chunks)
    blob_path.write_bytes(blob)

    manifest = {
        "name": model.name,
        "input_shape": list(model.input_shape),
        "classes": model.classes,
        "layers": layers,
        "calibration": {str(i): entry.to_dict() for i, entry in sorted(model.calibration.items())},
        "metadata": model.metadata,
        "blob": blob_path.name,
        "blob_sha256": _sha256(blob),
    }
    write_json(path, manifest)
    logger.info("saved model %s to %s", model.name, path)
    return path


def load_model(path) -> ModelGraph:
    """
    Load a model manifest and its weight blob.

    Weights are upcast to float64. Shapes are checked end to end.

    Args:
        path: Manifest path

    Returns:
        ModelGraph

    Raises:
        LoadError: Missing files, unknown layer kinds or inconsistent shapes (naming the layer)
        ChecksumError: If the blob does not match its recorded SHA-256
    """
    path = Path(path)
    if not path.exists():
        raise LoadError(f"missing model manifest {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise LoadError(f"{path}: invalid JSON ({e})")

    blob_path = path.parent / manifest.get("blob", path.with_suffix(".bin").name)
    if not blob_path.exists():
        raise LoadError(f"missing weight blob {blob_path}")
    blob = blob_path.read_bytes()
    if _sha256(blob) != manifest.get("blob_sha256"):
        raise ChecksumError(f"{blob_path}: checksum mismatch")
    values = np.frombuffer(blob, dtype=BLOB_DTYPE)

    layers, weights = [], {}
    for index, entry in enumerate(manifest.get("layers", [])):
        try:
            layer = layer_from_dict(entry["kind"], entry.get("params", {}))
        except KeyError:
            raise LoadError(f"unknown layer kind {entry.get('kind')!r}", layer_index=index)
        except TypeError as e:
            raise LoadError(f"bad parameters: {e}", layer_index=index)
        layers.append(layer)
        offsets = entry.get("weight_offsets", {})
        tensors = {}
        for key, shape in layer.weight_shapes().items():
            if key not in offsets:
                raise LoadError(f"missing {key}", layer_index=index)
            start, declared = offsets[key]["offset"], tuple(offsets[key]["shape"])
            if declared != tuple(shape):
                raise LoadError(f"{key} declared {declared}, layer needs {shape}", layer_index=index)
            count = int(np.prod(shape))
            if start < 0 or start + count > values.size:
                raise LoadError(f"{key} runs past the end of the blob", layer_index=index)
            tensors[key] = values[start:start + count].astype(np.float64).reshape(shape)
        if tensors:
            weights[index] = tensors

    try:
        model = ModelGraph(manifest["name"], manifest["input_shape"], manifest["classes"], layers, weights,
                           metadata=manifest.get("metadata") or {})
    except DimensionError as e:
        # shape errors already read "layer i (kind): ..."
        error = LoadError(str(e))
        words = str(e).split()
        if words[0] == "layer" and words[1].isdigit():
            error.layer_index = int(words[1])
        raise error
    except KeyError as e:
        raise LoadError(f"{path}: manifest lacks {e}")

    calibration = {}
    for key, entry in manifest.get("calibration", {}).items():
        index = int(key) if str(key).isdigit() else None
        if index is None or index >= len(layers):
            raise LoadError(f"calibration for unknown layer {key!r}")
        try:
            calibration[index] = LayerCalibration.from_dict(entry)
        except (KeyError, TypeError, ValueError, CalibrationError) as e:
            raise LoadError(f"bad calibration entry: {e!r}", layer_index=index)
    model.calibration = calibration
    logger.info("loaded model %s (%d layers, %d MACs)", model.name, len(layers), model.total_macs)
    return model
