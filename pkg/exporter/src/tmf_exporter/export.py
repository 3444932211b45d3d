"""Export orchestration: load a checkpoint, write TMF, emit fixtures.

Fixture files carry 8 random inputs and the source framework's outputs for
them, enabling cross-runtime validation of the exported artifact.  TFJS
directory inputs carry weights only (no running framework), so no fixtures
are emitted for them.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model_ir import ExportError, ExportGraph, write_tmf
from .tfjs_reader import load_tfjs_dir

NUM_FIXTURES = 8


def _load_keras(path: Path):
    import keras
    model = keras.models.load_model(path, compile=False)
    cfg = {"class_name": type(model).__name__, "config": model.get_config()}

    def weights_of(name: str):
        return model.get_layer(name).get_weights()

    return model, cfg, weights_of


def make_fixtures(predict, input_shape, n: int = NUM_FIXTURES, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    inputs = rng.random((n, *input_shape), dtype=np.float32)
    outputs = np.asarray(predict(inputs), dtype=np.float32)
    return {
        "seed": seed,
        "input_shape": list(input_shape),
        "inputs": inputs.reshape(n, -1).tolist(),
        "outputs": outputs.tolist(),
    }


def export(input_path, output_path, fixtures_path=None,
           num_fixtures: int = NUM_FIXTURES, seed: int = 0) -> dict:
    """Convert a checkpoint to TMF; returns a summary dict."""
    input_path = Path(input_path)
    model = None
    if input_path.is_dir():
        graph = load_tfjs_dir(input_path)
        source_params = graph.param_count()
    elif input_path.suffix in (".h5", ".keras", ".hdf5"):
        model, cfg, weights_of = _load_keras(input_path)
        from .keras_reader import graph_from_config
        graph = graph_from_config(cfg, weights_of)
        source_params = int(model.count_params())
    else:
        raise ExportError(f"unsupported checkpoint format: {input_path}")

    exported_params = graph.param_count()
    if exported_params != source_params:
        raise ExportError(f"parameter count changed in export: source "
                          f"{source_params}, TMF {exported_params}")
    write_tmf(output_path, graph)

    fixtures_written = None
    if fixtures_path is not None and model is not None:
        fixtures = make_fixtures(
            lambda x: model.predict(x, verbose=0), graph.input_shape,
            n=num_fixtures, seed=seed)
        with open(fixtures_path, "w") as fh:
            json.dump(fixtures, fh)
        fixtures_written = str(fixtures_path)

    return {
        "input": str(input_path),
        "output": str(output_path),
        "fixtures": fixtures_written,
        "params": exported_params,
        "nodes": len(graph.nodes),
        "input_shape": list(graph.input_shape),
    }
