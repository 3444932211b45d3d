"""Intermediate model description and the TMF writer.

TMF layout: magic "TMF1", u32-LE header length, UTF-8 JSON header (version,
nodes, tensor table), then tensor payloads in 64-byte-aligned slots with
offsets relative to the payload section, which itself starts at the first
64-byte boundary after the header.  Written files are deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"TMF1"
ALIGN = 64

NODE_KINDS = {
    "Conv2D", "DepthwiseConv2D", "Dense", "BatchNorm", "ReLU", "ReLU6",
    "Softmax", "GlobalAvgPool", "Dropout", "Add", "FakeQuant",
}


class ExportError(ValueError):
    pass


@dataclass
class ExportTensor:
    name: str
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype="<f4")

    @property
    def nbytes(self) -> int:
        return self.data.size * 4


@dataclass
class ExportNode:
    id: str
    kind: str
    inputs: list[str]
    weights: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)


@dataclass
class ExportGraph:
    nodes: list[ExportNode] = field(default_factory=list)
    tensors: dict[str, ExportTensor] = field(default_factory=dict)
    input_shape: tuple[int, int, int] | tuple[int] = (224, 224, 3)
    class_names: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def add_tensor(self, name: str, data: np.ndarray) -> str:
        self.tensors[name] = ExportTensor(name, data)
        return name

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def validate(self) -> None:
        seen = {"input"}
        for node in self.nodes:
            if node.kind not in NODE_KINDS:
                raise ExportError(f"node {node.id}: unsupported kind {node.kind!r}")
            for ref in node.inputs:
                if ref not in seen:
                    raise ExportError(f"node {node.id}: dangling input {ref!r}")
            for w in node.weights:
                if w not in self.tensors:
                    raise ExportError(f"node {node.id}: dangling tensor {w!r}")
            seen.add(node.id)


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def serialize(graph: ExportGraph) -> bytes:
    graph.validate()
    tensors = list(graph.tensors.values())
    table = []
    offset = 0
    for t in tensors:
        table.append({
            "name": t.name,
            "shape": list(t.data.shape),
            "dtype": "f32",
            "quant": None,
            "training_only": False,
            "offset": offset,
            "nbytes": t.nbytes,
        })
        offset += _align(t.nbytes)

    header = {
        "version": 1,
        "kind": "graph",
        "input_shape": list(graph.input_shape),
        "class_names": graph.class_names,
        "meta": graph.meta,
        "nodes": [{"id": n.id, "kind": n.kind, "inputs": n.inputs,
                   "weights": n.weights, "attrs": n.attrs} for n in graph.nodes],
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload_start = _align(8 + len(header_bytes))
    out = bytearray(payload_start + offset)
    out[0:4] = MAGIC
    out[4:8] = len(header_bytes).to_bytes(4, "little")
    out[8:8 + len(header_bytes)] = header_bytes
    for t, entry in zip(tensors, table):
        start = payload_start + entry["offset"]
        out[start:start + t.nbytes] = t.data.tobytes()
    return bytes(out)


def write_tmf(path, graph: ExportGraph) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(graph))
