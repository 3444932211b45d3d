"""Post-training quantization: Float16 weight compression and full INT8
affine quantization with representative-dataset calibration, plus the
compression report.

Conventions (pinned so tests are bit-stable): weight quantization is
per-output-channel symmetric with round-half-away-from-zero; activation
quantization is per-tensor affine over [-128, 127]; F16 conversion uses IEEE
round-to-nearest-even.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .graphopt import _copy_graph, optimize
from .ir import INPUT_ID, Checkpoint, DType, Graph, QuantParams
from .runtime import Executor, dequantize_array, quantize_array
from .tmf import parse_tmf

F16_MAX = 65504.0


@dataclass
class CalibrationStats:
    """Running min/max per activation edge over calibration samples."""

    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    count: int = 0

    def update(self, edge: str, values: np.ndarray) -> None:
        lo, hi = float(values.min()), float(values.max())
        if edge in self.ranges:
            plo, phi = self.ranges[edge]
            self.ranges[edge] = (min(plo, lo), max(phi, hi))
        else:
            self.ranges[edge] = (lo, hi)

    def to_json(self) -> dict:
        return {"count": self.count,
                "ranges": {k: [lo, hi] for k, (lo, hi) in self.ranges.items()}}

    @classmethod
    def from_json(cls, obj: dict) -> "CalibrationStats":
        return cls({k: (v[0], v[1]) for k, v in obj["ranges"].items()}, obj["count"])


def calibrate(graph: Graph, samples, n: int = 100) -> CalibrationStats:
    """Run the F32 graph over `n` samples, recording every activation range.

    `samples` yields single images (H, W, C) or batches (N, H, W, C); exactly
    `n` images are consumed, sequentially, so results are deterministic given
    the sample order."""
    if n < 1:
        raise ValueError(f"need at least one calibration sample, got n={n}")
    ex = Executor(graph)
    stats = CalibrationStats()
    remaining = n
    for sample in samples:
        x = np.asarray(sample, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        if x.shape[0] > remaining:
            x = x[:remaining]
        ex.run(x, on_activation=stats.update)
        stats.count += x.shape[0]
        remaining -= x.shape[0]
        if remaining == 0:
            break
    if stats.count == 0:
        raise ValueError("calibration sample source is empty")
    return stats


def quantize_f16(ckpt: Checkpoint | Graph) -> Graph:
    """Deployment conversion with Float16 weight storage.

    Runs the graph optimizer, then converts every weight tensor to F16 with
    round-to-nearest-even.  Activations stay F32 at execution time."""
    g = optimize(ckpt)
    marker = QuantParams((1.0,), (0,))
    for t in g.tensors.values():
        peak = float(np.abs(t.data).max()) if t.data.size else 0.0
        if peak > F16_MAX:
            raise ValueError(f"tensor {t.name}: magnitude {peak} overflows float16")
        t.data = t.data.astype(np.float16)
        t.dtype = DType.F16
        t.quant = marker
    return g


def activation_qparams(lo: float, hi: float) -> QuantParams:
    """Per-tensor affine params over the signed byte range."""
    if hi <= lo:
        return QuantParams((1.0,), (0,))
    scale = (hi - lo) / 255.0
    zp = -128.0 - lo / scale
    zp = np.trunc(zp + np.copysign(0.5, zp))
    return QuantParams((scale,), (int(np.clip(zp, -128, 127)),))


def weight_qparams(w: np.ndarray, axis: int) -> QuantParams:
    """Per-output-channel symmetric params: scale = max|w| / 127."""
    reduce_axes = tuple(a for a in range(w.ndim) if a != axis)
    peaks = np.abs(w).max(axis=reduce_axes)
    scales = np.where(peaks > 0, peaks / 127.0, 1.0)
    return QuantParams(tuple(float(s) for s in scales),
                       (0,) * scales.size, axis=axis)


def quantize_int8(graph: Graph, stats: CalibrationStats) -> Graph:
    """Convert an optimized F32 graph to full INT8.

    Weights become per-channel symmetric I8, biases I32 at scale
    s_in * s_w, and every activation edge gets affine params derived from the
    calibration ranges."""
    if stats.count < 1:
        raise ValueError("calibration stats are empty")
    for node in graph.nodes:
        if node.kind in ("BatchNorm", "Dropout", "FakeQuant"):
            raise ValueError(f"node {node.id}: INT8 conversion requires an optimized graph "
                             f"(run optimize first)")
    g = _copy_graph(graph)

    edges = [INPUT_ID] + [n.id for n in g.nodes if n.kind != "Softmax"]
    missing = [e for e in edges if e not in stats.ranges]
    if missing:
        raise ValueError(f"missing calibration stats for edges: {missing}")

    edge_qp: dict[str, QuantParams] = {}
    for e in edges:
        lo, hi = stats.ranges[e]
        edge_qp[e] = activation_qparams(lo, hi)
    g.meta["input_quant"] = {"scale": edge_qp[INPUT_ID].scales[0],
                             "zero_point": edge_qp[INPUT_ID].zero_points[0]}

    for node in g.nodes:
        if node.id in edge_qp:
            node.attrs["out_quant"] = {"scale": edge_qp[node.id].scales[0],
                                       "zero_point": edge_qp[node.id].zero_points[0]}
        if node.kind not in ("Conv2D", "DepthwiseConv2D", "Dense"):
            continue
        wt = g.tensors[node.weights[0]]
        axis = 3 if node.kind == "DepthwiseConv2D" else 0
        qp = weight_qparams(wt.data, axis)
        wt.data = quantize_array(wt.data, qp)
        wt.dtype = DType.I8
        wt.quant = qp
        s_in = edge_qp[node.inputs[0]].scales[0]
        if len(node.weights) > 1:
            bt = g.tensors[node.weights[1]]
            bias_scales = tuple(s_in * s for s in qp.scales)
            sc = np.asarray(bias_scales, dtype=np.float64)
            q = np.trunc(bt.data / sc + np.copysign(0.5, bt.data / sc))
            bt.data = np.clip(q, np.iinfo(np.int32).min, np.iinfo(np.int32).max).astype(np.int32)
            bt.dtype = DType.I32
            bt.quant = QuantParams(bias_scales, (0,) * len(bias_scales), axis=0)
    return g


def collect_fake_quant_stats(graph: Graph) -> CalibrationStats:
    """Harvest the ranges recorded by FakeQuant nodes during training, keyed
    by the edge (producer id) each node observes."""
    stats = CalibrationStats()
    for node in graph.nodes:
        if node.kind != "FakeQuant":
            continue
        lo, hi = node.attrs.get("min"), node.attrs.get("max")
        if lo is None or hi is None:
            continue
        stats.ranges[node.inputs[0]] = (float(lo), float(hi))
        stats.count = max(stats.count, int(node.attrs.get("updates", 1)))
    return stats


def quantize_value(r: float, qp: QuantParams) -> int:
    """q = clamp(round_half_away_from_zero(r / scale) + zero_point, -128, 127)."""
    return int(quantize_array(np.asarray([r], dtype=np.float64), qp)[0])


def dequantize_value(q: int, qp: QuantParams) -> float:
    return float(dequantize_array(np.asarray([q], dtype=np.int8), qp)[0])


@dataclass
class CompressionReport:
    """Size and accuracy comparison between a training checkpoint and its
    quantized deployment artifact.  `accuracy_delta` is baseline minus
    quantized, matching the sign convention of the reference comparison."""

    original_bytes: int
    compressed_bytes: int
    ratio: float
    baseline_accuracy: float
    quantized_accuracy: float
    accuracy_delta: float

    def to_json(self) -> dict:
        return {
            "original_bytes": self.original_bytes,
            "compressed_bytes": self.compressed_bytes,
            "compression_ratio": self.ratio,
            "baseline_accuracy": self.baseline_accuracy,
            "quantized_accuracy": self.quantized_accuracy,
            "accuracy_delta": self.accuracy_delta,
        }


def compression_report(original_path, compressed_path,
                       baseline_acc: float, quant_acc: float) -> CompressionReport:
    """Byte-accurate compression report from two TMF files on disk."""
    for path in (original_path, compressed_path):
        with open(path, "rb") as fh:
            parse_tmf(fh.read())  # raises on unreadable/corrupt input
    original = os.path.getsize(original_path)
    compressed = os.path.getsize(compressed_path)
    return CompressionReport(
        original_bytes=original,
        compressed_bytes=compressed,
        ratio=original / compressed,
        baseline_accuracy=baseline_acc,
        quantized_accuracy=quant_acc,
        accuracy_delta=baseline_acc - quant_acc,
    )
