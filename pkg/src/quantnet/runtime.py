"""Graph execution in FP32, FP16-weight and INT8 modes.

FP16 graphs store weights in half precision; they are dequantized to F32
once at load and all arithmetic runs in F32 (weight-storage compression
only).  INT8 graphs run integer conv/dense kernels with I32 accumulation and
requantize each activation edge with a floating-point multiplier; the final
Softmax is always evaluated in F32.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import kernels as K
from .ir import INPUT_ID, DType, Graph, Node, QuantParams, validate_graph


class ExecutionMode(Enum):
    FP32 = "f32"
    FP16_WEIGHTS = "f16"
    INT8 = "int8"


def infer_mode(graph: Graph) -> ExecutionMode:
    dtypes = {graph.tensors[w].dtype for n in graph.nodes for w in n.weights}
    if DType.I8 in dtypes:
        return ExecutionMode.INT8
    if DType.F16 in dtypes:
        return ExecutionMode.FP16_WEIGHTS
    return ExecutionMode.FP32


def quantize_array(x: np.ndarray, qp: QuantParams, axis: int | None = None) -> np.ndarray:
    """Affine quantization q = clamp(round_half_away(r/s) + z, -128, 127)."""
    scales = np.asarray(qp.scales, dtype=np.float64)
    zps = np.asarray(qp.zero_points, dtype=np.float64)
    axis = qp.axis if axis is None else axis
    if axis is not None and scales.size > 1:
        shape = [1] * x.ndim
        shape[axis] = scales.size
        scales = scales.reshape(shape)
        zps = zps.reshape(shape)
    v = x.astype(np.float64) / scales
    q = np.trunc(v + np.copysign(0.5, v)) + zps
    return np.clip(q, -128, 127).astype(np.int8)


def dequantize_array(q: np.ndarray, qp: QuantParams, axis: int | None = None) -> np.ndarray:
    scales = np.asarray(qp.scales, dtype=np.float32)
    zps = np.asarray(qp.zero_points, dtype=np.float32)
    axis = qp.axis if axis is None else axis
    if axis is not None and scales.size > 1:
        shape = [1] * q.ndim
        shape[axis] = scales.size
        scales = scales.reshape(shape)
        zps = zps.reshape(shape)
    return ((q.astype(np.float32) - zps) * scales).astype(np.float32)


def _qp_from_attrs(attrs: dict) -> QuantParams:
    q = attrs["out_quant"]
    return QuantParams((q["scale"],), (q["zero_point"],))


class Executor:
    """Reusable executor over an immutable graph.  Pure w.r.t. the graph, so
    concurrent inferences may share one instance."""

    def __init__(self, graph: Graph, mode: ExecutionMode | None = None,
                 compute_dtype=np.float32):
        violations = validate_graph(graph)
        if violations:
            raise ValueError("invalid graph: " + "; ".join(violations))
        self.graph = graph
        actual = infer_mode(graph)
        if mode is not None and mode != actual:
            raise ValueError(f"requested mode {mode.value} but graph dtypes imply {actual.value}")
        self.mode = actual
        self.compute_dtype = compute_dtype
        if self.mode == ExecutionMode.INT8:
            self._check_int8()
        else:
            # One-time dequantization of F16 weights to the compute dtype.
            self.weights = {name: t.data.astype(compute_dtype)
                            for name, t in graph.tensors.items()}

    def _check_int8(self):
        for node in self.graph.nodes:
            if node.kind in ("Conv2D", "DepthwiseConv2D", "Dense"):
                w = self.graph.tensors[node.weights[0]]
                if w.dtype != DType.I8 or w.quant is None:
                    raise ValueError(f"node {node.id}: INT8 execution needs I8 quantized weights")
                if "out_quant" not in node.attrs:
                    raise ValueError(f"node {node.id}: missing calibration (out_quant)")
            elif node.kind in ("ReLU", "ReLU6", "GlobalAvgPool", "Add"):
                if "out_quant" not in node.attrs:
                    raise ValueError(f"node {node.id}: missing calibration (out_quant)")
        if "input_quant" not in self.graph.meta:
            raise ValueError("graph meta missing input_quant calibration")

    def run(self, batch: np.ndarray, return_logits: bool = False,
            on_activation=None) -> np.ndarray:
        """Execute the graph on an NHWC (or NC) batch, returning the output
        matrix.  `on_activation(edge_id, f32_array)` is invoked for the input
        and every node output, in topological order."""
        x = np.asarray(batch)
        expected = tuple(self.graph.input_shape)
        if x.ndim == len(expected):
            x = x[None]
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"input shape {x.shape[1:]} does not match spec {expected}")
        if self.mode == ExecutionMode.INT8:
            return self._run_int8(x, return_logits)
        x = x.astype(self.compute_dtype)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite values in input batch")

        acts: dict[str, np.ndarray] = {INPUT_ID: x}
        if on_activation:
            on_activation(INPUT_ID, x)
        logits = None
        for node in self.graph.nodes:
            if node.kind == "Softmax":
                logits = acts[node.inputs[0]]
            acts[node.id] = self._apply(node, [acts[i] for i in node.inputs])
            if on_activation:
                on_activation(node.id, acts[node.id])
        out = acts[self.graph.output_node().id]
        if return_logits:
            return out, (out if logits is None else logits)
        return out

    def _apply(self, node: Node, ins: list[np.ndarray]) -> np.ndarray:
        kind = node.kind
        x = ins[0]
        if kind == "Conv2D":
            w = self.weights[node.weights[0]]
            b = self.weights[node.weights[1]] if len(node.weights) > 1 else None
            y = K.conv2d(x, w, b, node.attrs["stride"], node.attrs["padding"])
            return K.apply_activation(y, node.attrs.get("fused_activation"))
        if kind == "DepthwiseConv2D":
            w = self.weights[node.weights[0]]
            b = self.weights[node.weights[1]] if len(node.weights) > 1 else None
            y = K.depthwise_conv2d(x, w, b, node.attrs["stride"], node.attrs["padding"])
            return K.apply_activation(y, node.attrs.get("fused_activation"))
        if kind == "Dense":
            w = self.weights[node.weights[0]]
            b = self.weights[node.weights[1]] if len(node.weights) > 1 else None
            y = K.dense(x, w, b)
            return K.apply_activation(y, node.attrs.get("fused_activation"))
        if kind == "BatchNorm":
            g, b, m, v = (self.weights[w] for w in node.weights)
            return K.batchnorm_inference(x, g, b, m, v, node.attrs["epsilon"])
        if kind == "ReLU":
            return K.relu(x)
        if kind == "ReLU6":
            return K.relu6(x)
        if kind == "GlobalAvgPool":
            return K.global_avg_pool(x)
        if kind == "Add":
            return K.residual_add(ins[0], ins[1])
        if kind == "Softmax":
            return K.softmax_t(x, 1.0)
        if kind in ("Dropout", "FakeQuant"):
            return x  # identity at inference
        raise ValueError(f"cannot execute node kind {kind!r}")

    # INT8 path -----------------------------------------------------------

    def _run_int8(self, x: np.ndarray, return_logits: bool):
        in_q = self.graph.meta["input_quant"]
        in_qp = QuantParams((in_q["scale"],), (in_q["zero_point"],))
        acts: dict[str, tuple[np.ndarray, QuantParams]] = {
            INPUT_ID: (quantize_array(x.astype(np.float32), in_qp), in_qp)}
        out_f32 = None
        logits_f32 = None
        for node in self.graph.nodes:
            ins = [acts[i] for i in node.inputs]
            if node.kind == "Softmax":
                q, qp = ins[0]
                logits_f32 = dequantize_array(q, qp)
                out_f32 = K.softmax_t(logits_f32, 1.0)
                acts[node.id] = (None, None)
                continue
            acts[node.id] = self._apply_int8(node, ins)
        if out_f32 is None:
            q, qp = acts[self.graph.output_node().id]
            out_f32 = dequantize_array(q, qp)
            logits_f32 = out_f32
        return (out_f32, logits_f32) if return_logits else out_f32

    def _apply_int8(self, node: Node, ins):
        kind = node.kind
        out_qp = _qp_from_attrs(node.attrs) if "out_quant" in node.attrs else None
        if kind in ("Conv2D", "DepthwiseConv2D", "Dense"):
            q, qp = ins[0]
            w = self.graph.tensors[node.weights[0]]
            shifted = q.astype(np.int32) - qp.zero_points[0]
            wq = w.data.astype(np.int32)
            if kind == "Conv2D":
                acc = _conv2d_int(shifted, wq, node.attrs["stride"], node.attrs["padding"])
                w_scales = np.asarray(w.quant.scales)  # per out channel
            elif kind == "DepthwiseConv2D":
                acc = _depthwise_int(shifted, wq, node.attrs["stride"], node.attrs["padding"])
                w_scales = np.asarray(w.quant.scales)
            else:
                acc = shifted @ wq.T
                w_scales = np.asarray(w.quant.scales)
            if len(node.weights) > 1:
                acc = acc + self.graph.tensors[node.weights[1]].data  # I32 bias at s_in*s_w
            y = acc.astype(np.float32) * (qp.scales[0] * w_scales).astype(np.float32)
            y = K.apply_activation(y, node.attrs.get("fused_activation"))
            return quantize_array(y, out_qp), out_qp
        if kind in ("ReLU", "ReLU6"):
            q, qp = ins[0]
            y = K.apply_activation(dequantize_array(q, qp), kind)
            return quantize_array(y, out_qp), out_qp
        if kind == "GlobalAvgPool":
            q, qp = ins[0]
            y = K.global_avg_pool(dequantize_array(q, qp))
            return quantize_array(y, out_qp), out_qp
        if kind == "Add":
            (qa, qpa), (qb, qpb) = ins
            y = dequantize_array(qa, qpa) + dequantize_array(qb, qpb)
            return quantize_array(y, out_qp), out_qp
        if kind in ("Dropout", "FakeQuant"):
            return ins[0]
        raise ValueError(f"node kind {kind!r} not supported in INT8 graphs")


def _conv2d_int(x: np.ndarray, w: np.ndarray, stride: int, padding: str) -> np.ndarray:
    """I32-accumulating conv over zero-point-shifted int32 input."""
    out_c, kh, kw, in_c = w.shape
    xp = K._pad_input(x, kh, kw, stride, padding)
    oh = -(-x.shape[1] // stride) if padding == "same" else (x.shape[1] - kh) // stride + 1
    ow = -(-x.shape[2] // stride) if padding == "same" else (x.shape[2] - kw) // stride + 1
    win = K._windows(xp, kh, kw, stride, oh, ow)
    return np.tensordot(win, w, axes=([3, 4, 5], [3, 1, 2]))


def _depthwise_int(x: np.ndarray, w: np.ndarray, stride: int, padding: str) -> np.ndarray:
    _, kh, kw, ch = w.shape
    xp = K._pad_input(x, kh, kw, stride, padding)
    oh = -(-x.shape[1] // stride) if padding == "same" else (x.shape[1] - kh) // stride + 1
    ow = -(-x.shape[2] // stride) if padding == "same" else (x.shape[2] - kw) // stride + 1
    win = K._windows(xp, kh, kw, stride, oh, ow)
    return np.einsum("nhwcij,ijc->nhwc", win, w[0])


def execute(graph: Graph, batch: np.ndarray) -> np.ndarray:
    """One-shot inference: class-probability matrix for the batch."""
    return Executor(graph).run(batch)


def execute_logits(graph: Graph, batch: np.ndarray):
    """(probabilities, logits) in one pass."""
    return Executor(graph).run(batch, return_logits=True)


def execute_int8(graph: Graph, batch: np.ndarray) -> np.ndarray:
    ex = Executor(graph)
    if ex.mode != ExecutionMode.INT8:
        raise ValueError("execute_int8 requires an INT8-quantized graph")
    return ex.run(batch)
