"""Read TFJS layers-model directories (model.json + binary weight shards).

The directory holds the same Keras layer configuration under
modelTopology.model_config, plus a weightsManifest describing the packed
float buffers, so the shared config mapper does the rest.  Parsed with plain
numpy; no framework import needed.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .keras_reader import graph_from_config
from .model_ir import ExportError, ExportGraph

_WEIGHT_ORDER = {
    "Conv2D": ("kernel", "bias"),
    "DepthwiseConv2D": ("depthwise_kernel", "bias"),
    "Dense": ("kernel", "bias"),
    "BatchNormalization": ("gamma", "beta", "moving_mean", "moving_variance"),
}

_DTYPES = {"float32": np.dtype("<f4"), "int32": np.dtype("<i4")}


def _read_manifest(root: Path, manifest) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for group in manifest:
        buf = b"".join((root / path).read_bytes() for path in group["paths"])
        offset = 0
        for spec in group["weights"]:
            dtype = _DTYPES.get(spec.get("dtype", "float32"))
            if dtype is None:
                raise ExportError(f"weight {spec['name']}: dtype {spec['dtype']!r}")
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            nbytes = count * dtype.itemsize
            arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
            out[spec["name"]] = arr.reshape(spec["shape"]).copy()
            offset += nbytes
        if offset != len(buf):
            raise ExportError(f"weight shard length mismatch: used {offset} of {len(buf)} bytes")
    return out


def load_tfjs_dir(path) -> ExportGraph:
    root = Path(path)
    model_json = root / "model.json"
    if not model_json.is_file():
        raise ExportError(f"{root} is not a TFJS layers-model directory (no model.json)")
    doc = json.loads(model_json.read_text())
    topology = doc.get("modelTopology", doc)
    model_config = topology.get("model_config", topology)
    weights = _read_manifest(root, doc["weightsManifest"])

    config = model_config.get("config", model_config)
    kinds = {entry["config"]["name"]: entry["class_name"] for entry in config["layers"]}

    def weights_of(layer_name: str) -> list[np.ndarray]:
        order = _WEIGHT_ORDER.get(kinds.get(layer_name), ())
        found = []
        for suffix in order:
            key = f"{layer_name}/{suffix}"
            if key in weights:
                found.append(weights[key])
        if not found:
            raise ExportError(f"no weights found for layer {layer_name!r}")
        return found

    return graph_from_config(model_config, weights_of)
