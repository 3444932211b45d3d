"""Graph builders: MobileNetV2 classifier, DenseNet family, small desk CNN.

Weights are randomly initialized (fan-in-scaled uniform for conv/dense
kernels, zero biases, identity batch-norm) from a seeded generator, so every
build is deterministic.
"""

from __future__ import annotations

import numpy as np

from .ir import INPUT_ID, Graph, Node, tensor_f32

# MobileNetV2 inverted-residual settings: (expansion, channels, repeats, stride)
_MBV2_SETTINGS = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)

HEAD_L2 = 1e-3
BN_EPSILON = 1e-3


def _make_divisible(value: float, divisor: int = 8) -> int:
    new = max(divisor, int(value + divisor / 2) // divisor * divisor)
    if new < 0.9 * value:
        new += divisor
    return new


class _GraphBuilder:
    """Accumulates nodes and tensors; tracks the current edge."""

    def __init__(self, input_shape, rng: np.random.Generator, group: str = "backbone",
                 bn_momentum: float = 0.99):
        self.nodes: list[Node] = []
        self.tensors: dict = {}
        self.input_shape = tuple(input_shape)
        self.rng = rng
        self.group = group
        self.bn_momentum = bn_momentum
        self.last = INPUT_ID

    def _add(self, node: Node) -> str:
        node.attrs.setdefault("group", self.group)
        self.nodes.append(node)
        self.last = node.id
        return node.id

    def _kernel(self, name: str, shape, fan_in: int):
        limit = np.sqrt(6.0 / fan_in)
        data = self.rng.uniform(-limit, limit, size=shape).astype(np.float32)
        self.tensors[name] = tensor_f32(name, data)
        return name

    def _zeros(self, name: str, n: int):
        self.tensors[name] = tensor_f32(name, np.zeros(n, dtype=np.float32))
        return name

    def conv(self, nid: str, out_c: int, k: int, stride: int, src: str | None = None,
             in_c: int | None = None, bias: bool = False, padding: str = "same"):
        src = src or self.last
        weights = [self._kernel(f"{nid}.w", (out_c, k, k, in_c), k * k * in_c)]
        if bias:
            weights.append(self._zeros(f"{nid}.b", out_c))
        return self._add(Node(nid, "Conv2D", [src], weights,
                              {"stride": stride, "padding": padding}))

    def depthwise(self, nid: str, ch: int, k: int, stride: int, src: str | None = None):
        src = src or self.last
        weights = [self._kernel(f"{nid}.w", (1, k, k, ch), k * k)]
        return self._add(Node(nid, "DepthwiseConv2D", [src], weights,
                              {"stride": stride, "padding": "same"}))

    def dense(self, nid: str, out_c: int, in_c: int, src: str | None = None,
              bias: bool = True, l2: float = 0.0):
        src = src or self.last
        weights = [self._kernel(f"{nid}.w", (out_c, in_c), in_c)]
        if bias:
            weights.append(self._zeros(f"{nid}.b", out_c))
        attrs = {"l2": l2} if l2 else {}
        return self._add(Node(nid, "Dense", [src], weights, attrs))

    def batchnorm(self, nid: str, ch: int, src: str | None = None,
                  momentum: float | None = None):
        src = src or self.last
        g = f"{nid}.gamma"
        self.tensors[g] = tensor_f32(g, np.ones(ch, dtype=np.float32))
        b = self._zeros(f"{nid}.beta", ch)
        m = self._zeros(f"{nid}.mean", ch)
        v = f"{nid}.var"
        self.tensors[v] = tensor_f32(v, np.ones(ch, dtype=np.float32))
        mom = self.bn_momentum if momentum is None else momentum
        return self._add(Node(nid, "BatchNorm", [src], [g, b, m, v],
                              {"epsilon": BN_EPSILON, "momentum": mom}))

    def op(self, nid: str, kind: str, srcs: list[str] | None = None, **attrs):
        srcs = srcs if srcs is not None else [self.last]
        return self._add(Node(nid, kind, srcs, [], attrs))

    def graph(self, class_names=None, meta=None) -> Graph:
        return Graph(self.nodes, self.tensors, self.input_shape,
                     class_names=class_names, meta=meta or {})


def build_mobilenetv2_classifier(num_classes: int, width: float = 1.0,
                                 seed: int = 0, class_names=None) -> Graph:
    """MobileNetV2 backbone (stride-2 stem of 32 filters, 17 inverted-residual
    blocks, final 1x1 conv to 1280, 224x224 input) with the two-tier
    regularized classification head."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    g = _GraphBuilder((224, 224, 3), rng, group="backbone")

    stem = _make_divisible(32 * width)
    g.conv("conv1", stem, 3, 2, src=INPUT_ID, in_c=3)
    g.batchnorm("conv1_bn", stem)
    g.op("conv1_relu", "ReLU6")

    in_c = stem
    idx = 0
    for t, c, n, s in _MBV2_SETTINGS:
        out_c = _make_divisible(c * width)
        for rep in range(n):
            stride = s if rep == 0 else 1
            in_c = _inverted_residual(g, f"block{idx}", in_c, out_c, t, stride)
            idx += 1

    last_c = _make_divisible(1280 * width) if width > 1.0 else 1280
    g.conv("conv_last", last_c, 1, 1, in_c=in_c)
    g.batchnorm("conv_last_bn", last_c)
    g.op("conv_last_relu", "ReLU6")

    g.group = "head"
    g.op("head_gap", "GlobalAvgPool")
    g.batchnorm("head_bn1", last_c)
    g.dense("head_dense1", 512, last_c, l2=HEAD_L2)
    g.op("head_relu1", "ReLU")
    g.op("head_drop1", "Dropout", rate=0.4)
    g.batchnorm("head_bn2", 512)
    g.dense("head_dense2", 256, 512, l2=HEAD_L2)
    g.op("head_relu2", "ReLU")
    g.op("head_drop2", "Dropout", rate=0.3)
    g.dense("head_out", num_classes, 256)
    g.op("softmax", "Softmax")
    return g.graph(class_names=class_names, meta={"arch": "mobilenetv2", "width": width})


def _inverted_residual(g: _GraphBuilder, name: str, in_c: int, out_c: int,
                       expansion: int, stride: int) -> int:
    src = g.last
    hidden = in_c * expansion
    if expansion != 1:
        g.conv(f"{name}_expand", hidden, 1, 1, in_c=in_c)
        g.batchnorm(f"{name}_expand_bn", hidden)
        g.op(f"{name}_expand_relu", "ReLU6")
    g.depthwise(f"{name}_dw", hidden, 3, stride)
    g.batchnorm(f"{name}_dw_bn", hidden)
    g.op(f"{name}_dw_relu", "ReLU6")
    g.conv(f"{name}_project", out_c, 1, 1, in_c=hidden)
    g.batchnorm(f"{name}_project_bn", out_c)
    if stride == 1 and in_c == out_c:
        g.op(f"{name}_add", "Add", [src, g.last])
    return out_c


DENSENET_PRESETS = {
    # Desk-scale stand-ins for the teacher/student pairing.
    "teacher": {"blocks": [3, 3], "growth": 12, "stem": 24},
    "student": {"blocks": [2, 2], "growth": 8, "stem": 16},
}


def build_densenet(blocks: list[int], growth: int, num_classes: int,
                   input_size: int = 32, stem: int = 16, seed: int = 0,
                   class_names=None) -> Graph:
    """Densely connected classifier.

    Each layer consumes every preceding feature map of its block.  The
    concatenative connectivity is realized as one convolution per upstream
    part summed with Add nodes, which is algebraically identical to a single
    convolution over the channel concatenation and keeps the parameter count
    of the dense block intact.
    """
    if not blocks:
        raise ValueError("blocks must be non-empty")
    rng = np.random.default_rng(seed)
    g = _GraphBuilder((input_size, input_size, 3), rng, group="backbone",
                      bn_momentum=0.9)

    g.conv("stem", stem, 3, 1, src=INPUT_ID, in_c=3)
    parts: list[tuple[str, int]] = [(g.last, stem)]  # (node id, channels)
    block_channels = []

    for bi, layers in enumerate(blocks):
        for li in range(layers):
            parts.append(_dense_layer(g, f"b{bi}_l{li}", parts, growth))
        total = sum(c for _, c in parts)
        block_channels.append(total)
        if bi < len(blocks) - 1:
            parts = [_transition(g, f"t{bi}", parts, max(growth, total // 2))]

    logits = []
    for pi, (src, ch) in enumerate(parts):
        g.batchnorm(f"head_bn_p{pi}", ch, src=src)
        g.op(f"head_relu_p{pi}", "ReLU")
        g.op(f"head_gap_p{pi}", "GlobalAvgPool")
        g.group = "head"
        g.dense(f"head_out_p{pi}", num_classes, ch, bias=(pi == 0))
        logits.append(g.last)
        g.group = "backbone"
    g.group = "head"
    out = logits[0]
    for pi, other in enumerate(logits[1:]):
        out = g.op(f"head_sum{pi}", "Add", [out, other])
    g.op("softmax", "Softmax", [out])
    return g.graph(class_names=class_names,
                   meta={"arch": "densenet", "blocks": list(blocks), "growth": growth,
                         "block_channels": block_channels})


def _dense_layer(g: _GraphBuilder, name: str, parts, growth: int):
    """BN -> ReLU -> 3x3 conv over the concatenation of all parts."""
    branches = []
    for pi, (src, ch) in enumerate(parts):
        g.batchnorm(f"{name}_bn_p{pi}", ch, src=src)
        g.op(f"{name}_relu_p{pi}", "ReLU")
        g.conv(f"{name}_conv_p{pi}", growth, 3, 1, in_c=ch)
        branches.append(g.last)
    out = branches[0]
    for pi, other in enumerate(branches[1:]):
        out = g.op(f"{name}_sum{pi}", "Add", [out, other])
    return out, growth


def _transition(g: _GraphBuilder, name: str, parts, out_c: int):
    """BN -> ReLU -> strided 1x1 conv, fusing compression and downsampling."""
    branches = []
    for pi, (src, ch) in enumerate(parts):
        g.batchnorm(f"{name}_bn_p{pi}", ch, src=src)
        g.op(f"{name}_relu_p{pi}", "ReLU")
        g.conv(f"{name}_conv_p{pi}", out_c, 1, 2, in_c=ch)
        branches.append(g.last)
    out = branches[0]
    for pi, other in enumerate(branches[1:]):
        out = g.op(f"{name}_sum{pi}", "Add", [out, other])
    return out, out_c


def build_densenet_preset(preset: str, num_classes: int, input_size: int = 32,
                          seed: int = 0, class_names=None) -> Graph:
    cfg = DENSENET_PRESETS[preset]
    return build_densenet(cfg["blocks"], cfg["growth"], num_classes,
                          input_size=input_size, stem=cfg["stem"], seed=seed,
                          class_names=class_names)


def build_small_cnn(num_classes: int, input_size: int = 32,
                    widths: tuple[int, ...] = (12, 24, 48), hidden: int = 48,
                    seed: int = 0, class_names=None) -> Graph:
    """Compact conv classifier for desk-scale experiments.  The conv stack is
    the frozen "backbone" of staged training; the dense part is the head."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    g = _GraphBuilder((input_size, input_size, 3), rng, group="backbone",
                      bn_momentum=0.9)
    in_c = 3
    for i, w in enumerate(widths):
        g.conv(f"conv{i}", w, 3, 1 if i == 0 else 2,
               src=INPUT_ID if i == 0 else None, in_c=in_c)
        g.batchnorm(f"conv{i}_bn", w)
        g.op(f"conv{i}_relu", "ReLU6")
        in_c = w
    g.group = "head"
    g.op("head_gap", "GlobalAvgPool")
    g.batchnorm("head_bn", in_c)
    g.dense("head_dense", hidden, in_c, l2=HEAD_L2)
    g.op("head_relu", "ReLU")
    g.op("head_drop", "Dropout", rate=0.25)
    g.dense("head_out", num_classes, hidden)
    g.op("softmax", "Softmax")
    return g.graph(class_names=class_names,
                   meta={"arch": "small_cnn", "widths": list(widths)})
