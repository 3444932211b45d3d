"""TMF binary model format.

Layout:
  bytes 0-3   magic "TMF1"
  bytes 4-7   header length, unsigned 32-bit little-endian
  header      UTF-8 JSON: version, graph structure, tensor table
  payload     concatenated tensor bytes, little-endian row-major

The payload section starts at the first 64-byte boundary at or after the
header; every tensor occupies a 64-byte-aligned slot.  Tensor-table offsets
are relative to the payload section start, so the header text never depends
on its own length.  Checkpoints are TMF files whose tensor table includes
training_only optimizer slots.
"""

from __future__ import annotations

import json

import numpy as np

from .ir import Checkpoint, DType, Graph, Node, QuantParams, Tensor, validate_graph

MAGIC = b"TMF1"
VERSION = 1
ALIGN = 64


class TMFError(ValueError):
    """Base class for malformed TMF files."""


class BadMagicError(TMFError):
    pass


class TruncatedPayloadError(TMFError):
    pass


class LengthMismatchError(TMFError):
    """Header-declared sizes disagree with the actual file size."""


class UnknownNodeKindError(TMFError):
    pass


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _quant_to_json(q: QuantParams | None):
    if q is None:
        return None
    return {"scales": list(q.scales), "zero_points": list(q.zero_points), "axis": q.axis}


def _quant_from_json(obj) -> QuantParams | None:
    if obj is None:
        return None
    return QuantParams(tuple(obj["scales"]), tuple(obj["zero_points"]), obj["axis"])


def serialize_tmf(obj: Graph | Checkpoint) -> bytes:
    """Serialize a Graph or Checkpoint to TMF bytes."""
    if isinstance(obj, Checkpoint):
        graph, checkpoint = obj.graph, obj
    else:
        graph, checkpoint = obj, None
    violations = validate_graph(graph)
    if violations:
        raise ValueError("refusing to serialize invalid graph: " + "; ".join(violations))

    tensors = list(graph.tensors.values())
    if checkpoint is not None:
        tensors += list(checkpoint.optimizer_slots.values())

    table = []
    offset = 0
    for t in tensors:
        table.append({
            "name": t.name,
            "shape": list(t.shape),
            "dtype": t.dtype.value,
            "quant": _quant_to_json(t.quant),
            "training_only": t.training_only,
            "offset": offset,
            "nbytes": t.nbytes,
        })
        offset += _align(t.nbytes)
    payload_size = offset

    header = {
        "version": VERSION,
        "kind": "checkpoint" if checkpoint is not None else "graph",
        "input_shape": list(graph.input_shape),
        "class_names": graph.class_names,
        "meta": graph.meta,
        "nodes": [{"id": n.id, "kind": n.kind, "inputs": n.inputs,
                   "weights": n.weights, "attrs": n.attrs} for n in graph.nodes],
        "tensors": table,
    }
    if checkpoint is not None:
        header["checkpoint"] = {"epoch": checkpoint.epoch,
                                "best_epoch": checkpoint.best_epoch,
                                "seed": checkpoint.seed}

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload_start = _align(8 + len(header_bytes))

    out = bytearray(payload_start + payload_size)
    out[0:4] = MAGIC
    out[4:8] = len(header_bytes).to_bytes(4, "little")
    out[8:8 + len(header_bytes)] = header_bytes
    for t, entry in zip(tensors, table):
        start = payload_start + entry["offset"]
        out[start:start + t.nbytes] = np.ascontiguousarray(t.data).tobytes()
    return bytes(out)


def parse_tmf(data: bytes) -> Graph | Checkpoint:
    """Parse TMF bytes back into a Graph or Checkpoint."""
    if len(data) < 8:
        raise TruncatedPayloadError(f"file of {len(data)} bytes is too short for a TMF header")
    if data[0:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[0:4]!r}, expected {MAGIC!r}")
    header_len = int.from_bytes(data[4:8], "little")
    if 8 + header_len > len(data):
        raise TruncatedPayloadError("declared header extends past end of file")
    try:
        header = json.loads(data[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TMFError(f"header is not valid JSON: {exc}") from exc

    payload_start = _align(8 + header_len)
    payload_size = 0
    for entry in header["tensors"]:
        payload_size = max(payload_size, entry["offset"] + _align(entry["nbytes"]))
    expected = payload_start + payload_size
    if len(data) < expected:
        raise TruncatedPayloadError(f"payload truncated: file is {len(data)} bytes, need {expected}")
    if len(data) > expected:
        raise LengthMismatchError(f"file is {len(data)} bytes but header accounts for {expected}")

    tensors: dict[str, Tensor] = {}
    slots: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        dtype = DType(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if entry["nbytes"] != count * dtype.itemsize:
            raise LengthMismatchError(
                f"tensor {entry['name']}: {entry['nbytes']} bytes for shape {shape} {dtype.value}")
        start = payload_start + entry["offset"]
        arr = np.frombuffer(data, dtype=dtype.np_dtype, count=count, offset=start).reshape(shape)
        t = Tensor(entry["name"], arr.copy(), dtype,
                   quant=_quant_from_json(entry["quant"]),
                   training_only=entry["training_only"])
        if header["kind"] == "checkpoint" and t.training_only and _is_slot_name(entry["name"]):
            slots[t.name] = t
        else:
            tensors[t.name] = t

    nodes = []
    for n in header["nodes"]:
        from .ir import NODE_KINDS
        if n["kind"] not in NODE_KINDS:
            raise UnknownNodeKindError(f"node {n['id']}: unknown kind {n['kind']!r}")
        nodes.append(Node(n["id"], n["kind"], list(n["inputs"]), list(n["weights"]), dict(n["attrs"])))

    graph = Graph(nodes=nodes, tensors=tensors,
                  input_shape=tuple(header["input_shape"]),
                  class_names=header["class_names"],
                  meta=header.get("meta", {}))
    if header["kind"] == "checkpoint":
        ck = header.get("checkpoint", {})
        return Checkpoint(graph, optimizer_slots=slots,
                          epoch=ck.get("epoch", 0),
                          best_epoch=ck.get("best_epoch", 0),
                          seed=ck.get("seed", 0))
    return graph


def _is_slot_name(name: str) -> bool:
    return name.endswith(".adam_m") or name.endswith(".adam_v")


def write_tmf(path, obj: Graph | Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_tmf(obj))


def read_tmf(path) -> Graph | Checkpoint:
    with open(path, "rb") as fh:
        return parse_tmf(fh.read())
