"""Model intermediate representation: tensors, nodes, graphs, checkpoints.

A Graph is the single model representation used for training, optimization,
quantization and inference.  Activations are NHWC.  Weight layouts are
out-first: conv kernels are [out, kh, kw, in], depthwise kernels are
[1, kh, kw, channels], dense kernels are [out, in].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

INPUT_ID = "input"

NODE_KINDS = frozenset({
    "Conv2D", "DepthwiseConv2D", "Dense", "BatchNorm", "ReLU", "ReLU6",
    "Softmax", "GlobalAvgPool", "Dropout", "Add", "FakeQuant",
})

ACTIVATION_KINDS = frozenset({"ReLU", "ReLU6"})


class DType(str, Enum):
    F32 = "f32"
    F16 = "f16"
    I8 = "i8"
    I32 = "i32"

    @property
    def np_dtype(self) -> np.dtype:
        return _NP_DTYPES[self]

    @property
    def itemsize(self) -> int:
        return _NP_DTYPES[self].itemsize


_NP_DTYPES = {
    DType.F32: np.dtype("<f4"),
    DType.F16: np.dtype("<f2"),
    DType.I8: np.dtype("<i1"),
    DType.I32: np.dtype("<i4"),
}


@dataclass(frozen=True)
class QuantParams:
    """Affine quantization parameters: real = (q - zero_point) * scale.

    Per-tensor params carry exactly one scale/zero_point; per-channel params
    carry one per channel of `axis`.
    """

    scales: tuple[float, ...]
    zero_points: tuple[int, ...]
    axis: int | None = None

    def __post_init__(self):
        if len(self.scales) != len(self.zero_points):
            raise ValueError("scales and zero_points must have the same arity")
        if not self.scales:
            raise ValueError("QuantParams needs at least one scale")
        if any(s <= 0 for s in self.scales):
            raise ValueError("every scale must be > 0")
        if self.per_channel:
            if any(z != 0 for z in self.zero_points):
                raise ValueError("per-channel quantization must be symmetric (zero_points all 0)")
        else:
            z = self.zero_points[0]
            if not -128 <= z <= 127:
                raise ValueError(f"zero_point {z} outside [-128, 127]")

    @property
    def per_channel(self) -> bool:
        return self.axis is not None


@dataclass
class Tensor:
    """Named weight tensor: shape, element type, contiguous row-major data."""

    name: str
    data: np.ndarray
    dtype: DType
    quant: QuantParams | None = None
    training_only: bool = False

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=self.dtype.np_dtype)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def nbytes(self) -> int:
        return self.data.size * self.dtype.itemsize


def tensor_f32(name: str, data, training_only: bool = False) -> Tensor:
    return Tensor(name, np.asarray(data, dtype=np.float32), DType.F32,
                  training_only=training_only)


@dataclass
class Node:
    """One computation step.  `inputs` are node ids (or INPUT_ID), `weights`
    are tensor-table names in a kind-specific slot order."""

    id: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    weights: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)


# Attrs every node of a kind must carry (beyond optional ones like
# fused_activation, l2, group).
_REQUIRED_ATTRS = {
    "Conv2D": ("stride", "padding"),
    "DepthwiseConv2D": ("stride", "padding"),
    "BatchNorm": ("epsilon",),
    "Dropout": ("rate",),
    "FakeQuant": ("momentum",),
}

_TRAINING_ONLY_KINDS = frozenset({"Dropout", "FakeQuant"})


@dataclass
class Graph:
    """Topologically ordered nodes plus the tensor table.

    Immutable by convention after construction; transforms return new graphs.
    """

    nodes: list[Node]
    tensors: dict[str, Tensor]
    input_shape: tuple[int, int, int] = (224, 224, 3)
    class_names: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def output_node(self) -> Node:
        consumed = {i for n in self.nodes for i in n.inputs}
        sinks = [n for n in self.nodes if n.id not in consumed]
        if len(sinks) != 1:
            raise ValueError(f"graph has {len(sinks)} output nodes, expected 1")
        return sinks[0]

    def consumers(self, node_id: str) -> list[Node]:
        return [n for n in self.nodes if node_id in n.inputs]

    def weight_payload_bytes(self) -> int:
        """Raw tensor bytes (no alignment padding, no header)."""
        return sum(t.nbytes for t in self.tensors.values())


@dataclass
class Checkpoint:
    """Training artifact: graph plus optimizer slot tensors and run metadata."""

    graph: Graph
    optimizer_slots: dict[str, Tensor] = field(default_factory=dict)
    epoch: int = 0
    best_epoch: int = 0
    seed: int = 0

    def __post_init__(self):
        for t in self.optimizer_slots.values():
            t.training_only = True


def infer_shapes(graph: Graph) -> dict[str, tuple[int, ...]]:
    """Shape (without batch dim) of every node output, keyed by node id.

    Raises ValueError on the first structural impossibility; validate_graph
    wraps this to collect violations instead.
    """
    shapes: dict[str, tuple[int, ...]] = {INPUT_ID: tuple(graph.input_shape)}
    for node in graph.nodes:
        in_shapes = []
        for ref in node.inputs:
            if ref not in shapes:
                raise ValueError(f"node {node.id}: input {ref!r} not yet defined")
            in_shapes.append(shapes[ref])
        shapes[node.id] = _node_output_shape(graph, node, in_shapes)
    return shapes


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        return math.ceil(h / stride), math.ceil(w / stride)
    return (h - kh) // stride + 1, (w - kw) // stride + 1


def _node_output_shape(graph: Graph, node: Node, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    kind = node.kind
    x = in_shapes[0] if in_shapes else None
    if kind == "Conv2D":
        if len(x) != 3:
            raise ValueError(f"node {node.id}: Conv2D needs rank-3 input, got {x}")
        w = graph.tensors[node.weights[0]]
        out, kh, kw, cin = w.shape
        if cin != x[2]:
            raise ValueError(f"node {node.id}: expects {cin} input channels, fed {x[2]}")
        oh, ow = conv_output_hw(x[0], x[1], kh, kw, node.attrs["stride"], node.attrs["padding"])
        return (oh, ow, out)
    if kind == "DepthwiseConv2D":
        w = graph.tensors[node.weights[0]]
        one, kh, kw, ch = w.shape
        if one != 1:
            raise ValueError(f"node {node.id}: depthwise kernel leading dim must be 1")
        if ch != x[2]:
            raise ValueError(f"node {node.id}: expects {ch} channels, fed {x[2]}")
        oh, ow = conv_output_hw(x[0], x[1], kh, kw, node.attrs["stride"], node.attrs["padding"])
        return (oh, ow, ch)
    if kind == "Dense":
        w = graph.tensors[node.weights[0]]
        out, cin = w.shape
        if len(x) != 1:
            raise ValueError(f"node {node.id}: Dense needs rank-1 input, got {x}")
        if cin != x[0]:
            raise ValueError(f"node {node.id}: Dense expects {cin} inputs, fed {x[0]}")
        return (out,)
    if kind == "BatchNorm":
        ch = x[-1]
        for wname in node.weights:
            arity = graph.tensors[wname].shape[0]
            if arity != ch:
                raise ValueError(f"node {node.id}: BatchNorm arity {arity} vs {ch} channels")
        return x
    if kind == "GlobalAvgPool":
        if len(x) != 3:
            raise ValueError(f"node {node.id}: GlobalAvgPool needs rank-3 input, got {x}")
        return (x[2],)
    if kind == "Add":
        if in_shapes[0] != in_shapes[1]:
            raise ValueError(f"node {node.id}: Add shapes differ: {in_shapes}")
        return x
    if kind in ("ReLU", "ReLU6", "Softmax", "Dropout", "FakeQuant"):
        return x
    raise ValueError(f"node {node.id}: unknown kind {kind!r}")


def validate_graph(graph: Graph) -> list[str]:
    """All structural violations (empty list means the graph is well formed)."""
    violations: list[str] = []
    seen: set[str] = set()
    for node in graph.nodes:
        if node.id == INPUT_ID or node.id in seen:
            violations.append(f"duplicate or reserved node id {node.id!r}")
        if node.kind not in NODE_KINDS:
            violations.append(f"node {node.id}: unknown kind {node.kind!r}")
            seen.add(node.id)
            continue
        for ref in node.inputs:
            if ref != INPUT_ID and ref not in seen:
                violations.append(f"node {node.id}: input {ref!r} is not an earlier node (cycle or dangling)")
        for wname in node.weights:
            if wname not in graph.tensors:
                violations.append(f"node {node.id}: dangling tensor ref {wname!r}")
        for attr in _REQUIRED_ATTRS.get(node.kind, ()):
            if attr not in node.attrs:
                violations.append(f"node {node.id}: missing attr {attr!r}")
        if node.kind in ("Conv2D", "DepthwiseConv2D") and node.attrs.get("padding") not in ("same", "valid"):
            violations.append(f"node {node.id}: padding must be 'same' or 'valid'")
        if node.kind == "Dropout" and not 0 <= node.attrs.get("rate", -1) < 1:
            violations.append(f"node {node.id}: dropout rate outside [0, 1)")
        seen.add(node.id)

    if graph.nodes:
        consumed = {i for n in graph.nodes for i in n.inputs}
        sinks = [n.id for n in graph.nodes if n.id not in consumed]
        if len(sinks) != 1:
            violations.append(f"graph has {len(sinks)} output nodes, expected exactly 1")

    violations.extend(_tensor_violations(graph))
    violations.extend(_shape_violations(graph))
    return violations


def _shape_violations(graph: Graph) -> list[str]:
    """Per-node shape checks; nodes downstream of a failure are skipped."""
    out: list[str] = []
    shapes: dict[str, tuple | None] = {INPUT_ID: tuple(graph.input_shape)}
    for node in graph.nodes:
        in_shapes = [shapes.get(ref) for ref in node.inputs]
        if any(s is None for s in in_shapes) or node.kind not in NODE_KINDS:
            shapes[node.id] = None
            continue
        try:
            shapes[node.id] = _node_output_shape(graph, node, in_shapes)
        except (ValueError, KeyError, IndexError) as exc:
            out.append(str(exc) if isinstance(exc, ValueError)
                       else f"node {node.id}: unresolvable shape ({exc})")
            shapes[node.id] = None
    return out


def _tensor_violations(graph: Graph) -> list[str]:
    out = []
    for t in graph.tensors.values():
        if t.dtype == DType.I8 and t.quant is None:
            out.append(f"tensor {t.name}: I8 without quant params")
        if t.dtype == DType.F16 and t.quant is None:
            out.append(f"tensor {t.name}: F16 compressed weight without quant marker")
        if t.dtype == DType.F32 and t.quant is not None:
            out.append(f"tensor {t.name}: F32 tensor must not carry quant params")
    return out


# Weight slots that hold non-trainable state, per node kind.  BatchNorm
# weights are [gamma, beta, moving_mean, moving_var]; the moving statistics
# are non-trainable.
_NON_TRAINABLE_SLOTS = {"BatchNorm": (2, 3)}


def trainable_tensor_names(graph: Graph) -> list[str]:
    names = []
    for node in graph.nodes:
        skip = _NON_TRAINABLE_SLOTS.get(node.kind, ())
        for slot, wname in enumerate(node.weights):
            if slot not in skip:
                names.append(wname)
    return names


def param_count(graph: Graph) -> dict[str, int]:
    """Parameter counts {total, trainable, non_trainable} over node weights."""
    violations = validate_graph(graph)
    if violations:
        raise ValueError("invalid graph: " + "; ".join(violations))
    trainable = 0
    non_trainable = 0
    for node in graph.nodes:
        skip = _NON_TRAINABLE_SLOTS.get(node.kind, ())
        for slot, wname in enumerate(node.weights):
            n = graph.tensors[wname].data.size
            if slot in skip:
                non_trainable += n
            else:
                trainable += n
    return {"total": trainable + non_trainable,
            "trainable": trainable,
            "non_trainable": non_trainable}
