"""Map Keras layer configurations onto the TMF node set.

Works from the model-config dictionary (shared by HDF5/.keras checkpoints
and TFJS model.json topologies) plus a per-layer weight lookup, so the same
mapper serves every input format.  Weight layouts are transposed to the TMF
canonical forms: conv [out, kh, kw, in], depthwise [1, kh, kw, channels],
dense [out, in].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model_ir import ExportError, ExportGraph, ExportNode

SUPPORTED = {
    "InputLayer", "Conv2D", "DepthwiseConv2D", "Dense", "BatchNormalization",
    "ReLU", "Activation", "Softmax", "GlobalAveragePooling2D", "Dropout",
    "Add", "ZeroPadding2D",
}


@dataclass
class LayerSpec:
    class_name: str
    name: str
    config: dict
    inputs: list[str] = field(default_factory=list)


def _keras_histories(obj) -> list[str]:
    """Upstream layer names referenced inside an inbound-node args tree."""
    found = []
    if isinstance(obj, dict):
        if obj.get("class_name") == "__keras_tensor__":
            found.append(obj["config"]["keras_history"][0])
        else:
            for v in obj.values():
                found.extend(_keras_histories(v))
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            found.extend(_keras_histories(v))
    return found


def _inbound_names(inbound_nodes) -> list[str]:
    if not inbound_nodes:
        return []
    node = inbound_nodes[0]
    if len(inbound_nodes) > 1:
        raise ExportError("shared layers (multiple inbound nodes) are not supported")
    if isinstance(node, dict):  # new-style: {"args": [...], "kwargs": {...}}
        return _keras_histories(node.get("args", []))
    # legacy style: [["name", node_index, tensor_index, kwargs], ...]
    return [entry[0] for entry in node]


def parse_layer_specs(model_config: dict) -> list[LayerSpec]:
    """Flatten a Functional or Sequential model config into ordered specs."""
    class_name = model_config.get("class_name", "Functional")
    config = model_config.get("config", model_config)
    layers = config["layers"]
    specs = []
    if class_name == "Sequential":
        prev = None
        for entry in layers:
            spec = LayerSpec(entry["class_name"], entry["config"]["name"], entry["config"])
            if entry["class_name"] != "InputLayer" and prev is not None:
                spec.inputs = [prev]
            specs.append(spec)
            prev = spec.name
        if specs and specs[0].class_name != "InputLayer":
            shape = config.get("build_input_shape")
            if shape is None:
                raise ExportError("Sequential model without an input shape")
            specs.insert(0, LayerSpec("InputLayer", "__input__",
                                      {"batch_shape": shape, "name": "__input__"}))
            specs[1].inputs = ["__input__"]
    else:
        for entry in layers:
            specs.append(LayerSpec(entry["class_name"], entry["config"]["name"],
                                   entry["config"],
                                   _inbound_names(entry.get("inbound_nodes", []))))
    return specs


def _pair(value) -> tuple[int, int]:
    if isinstance(value, (list, tuple)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _same_split(n: int, k: int, stride: int) -> tuple[int, int]:
    total = max((math.ceil(n / stride) - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


_ACTIVATION_MAP = {"linear": None, "relu": "ReLU", "relu6": "ReLU6"}


class _Builder:
    def __init__(self, weights_of):
        self.weights_of = weights_of
        self.graph = ExportGraph(input_shape=None)
        self.edge: dict[str, str] = {}           # layer name -> node id
        self.shape: dict[str, tuple] = {}        # node id -> HWC / (C,) shape
        self.pending_pad: dict[str, tuple] = {}  # pad layer name -> (pads, src)

    def build(self, specs: list[LayerSpec]) -> ExportGraph:
        for spec in specs:
            if spec.class_name not in SUPPORTED:
                raise ExportError(f"unsupported layer kind {spec.class_name!r} "
                                  f"(layer {spec.name!r})")
            getattr(self, f"_map_{spec.class_name}")(spec)
        if self.graph.input_shape is None:
            raise ExportError("model has no input layer")
        if self.pending_pad:
            raise ExportError(f"ZeroPadding2D layers {sorted(self.pending_pad)} are "
                              f"not followed by a convolution")
        self.graph.validate()
        return self.graph

    # helpers ---------------------------------------------------------------

    def _src(self, spec: LayerSpec) -> str:
        if len(spec.inputs) != 1:
            raise ExportError(f"layer {spec.name!r}: expected exactly one input")
        return self.edge[spec.inputs[0]]

    def _emit(self, spec: LayerSpec, kind: str, src_ids: list[str],
              weights: list[str], attrs: dict, out_shape) -> str:
        node = ExportNode(spec.name, kind, src_ids, weights, attrs)
        self.graph.nodes.append(node)
        self.edge[spec.name] = node.id
        self.shape[node.id] = out_shape
        return node.id

    def _maybe_softmax(self, spec: LayerSpec, activation: str | None) -> None:
        if activation != "softmax":
            return
        node_id = self.edge[spec.name]
        sm = ExportNode(f"{spec.name}_softmax", "Softmax", [node_id], [], {})
        self.graph.nodes.append(sm)
        self.edge[spec.name] = sm.id
        self.shape[sm.id] = self.shape[node_id]

    def _fused_activation(self, spec: LayerSpec) -> tuple[str | None, str | None]:
        act = spec.config.get("activation", "linear")
        if isinstance(act, dict):
            act = act.get("config", {}).get("name", act.get("class_name", ""))
        if act == "softmax":
            return None, "softmax"
        if act in _ACTIVATION_MAP:
            return _ACTIVATION_MAP[act], None
        raise ExportError(f"layer {spec.name!r}: unsupported activation {act!r}")

    # layer mappers ----------------------------------------------------------

    def _map_InputLayer(self, spec: LayerSpec) -> None:
        shape = spec.config.get("batch_shape") or spec.config.get("batch_input_shape")
        if shape is None:
            raise ExportError(f"input layer {spec.name!r} has no shape")
        dims = tuple(int(d) for d in shape[1:])
        if self.graph.input_shape is not None:
            raise ExportError("multiple input layers are not supported")
        self.graph.input_shape = dims
        self.edge[spec.name] = "input"
        self.shape["input"] = dims

    def _conv_common(self, spec: LayerSpec, depthwise: bool) -> None:
        cfg = spec.config
        sh, sw = _pair(cfg.get("strides", 1))
        if sh != sw:
            raise ExportError(f"layer {spec.name!r}: anisotropic strides {sh}x{sw}")
        if _pair(cfg.get("dilation_rate", 1)) != (1, 1):
            raise ExportError(f"layer {spec.name!r}: dilation is not supported")
        if not depthwise and cfg.get("groups", 1) != 1:
            raise ExportError(f"layer {spec.name!r}: grouped conv is not supported")
        if depthwise and cfg.get("depth_multiplier", 1) != 1:
            raise ExportError(f"layer {spec.name!r}: depth_multiplier != 1")
        padding = cfg.get("padding", "valid")
        src_name = spec.inputs[0]
        if src_name in self.pending_pad:
            pads, src = self.pending_pad.pop(src_name)
            in_shape = self.shape[src]
            padding = self._resolve_pad(spec, pads, in_shape, sh)
        else:
            src = self.edge[src_name]
            in_shape = self.shape[src]
        if padding not in ("same", "valid"):
            raise ExportError(f"layer {spec.name!r}: padding {padding!r}")

        raw = self.weights_of(spec.name)
        kernel = np.asarray(raw[0])
        fused, softmax = self._fused_activation(spec)
        if depthwise:
            if kernel.ndim != 4 or kernel.shape[3] != 1:
                raise ExportError(f"layer {spec.name!r}: ambiguous depthwise kernel "
                                  f"layout {kernel.shape}")
            canonical = kernel.transpose(3, 0, 1, 2)  # -> [1, kh, kw, ch]
            out_c = canonical.shape[3]
            kind = "DepthwiseConv2D"
        else:
            if kernel.ndim != 4:
                raise ExportError(f"layer {spec.name!r}: ambiguous conv kernel "
                                  f"layout {kernel.shape}")
            canonical = kernel.transpose(3, 0, 1, 2)  # -> [out, kh, kw, in]
            if canonical.shape[3] != in_shape[-1]:
                raise ExportError(f"layer {spec.name!r}: kernel expects "
                                  f"{canonical.shape[3]} channels, input has {in_shape[-1]}")
            out_c = canonical.shape[0]
            kind = "Conv2D"
        weights = [self.graph.add_tensor(f"{spec.name}.w", canonical)]
        if cfg.get("use_bias", True):
            weights.append(self.graph.add_tensor(f"{spec.name}.b", np.asarray(raw[1])))
        kh, kw = canonical.shape[1], canonical.shape[2]
        h, w = in_shape[0], in_shape[1]
        if padding == "same":
            oh, ow = math.ceil(h / sh), math.ceil(w / sh)
        else:
            oh, ow = (h - kh) // sh + 1, (w - kw) // sh + 1
        attrs = {"stride": sh, "padding": padding}
        if fused:
            attrs["fused_activation"] = fused
        self._emit(spec, kind, [src], weights, attrs, (oh, ow, out_c))
        self._maybe_softmax(spec, softmax)

    def _resolve_pad(self, spec: LayerSpec, pads, in_shape, stride: int) -> str:
        """An explicit ZeroPadding2D is only representable when, combined with
        the conv's valid padding, it reproduces the asymmetric same rule."""
        if spec.config.get("padding", "valid") != "valid":
            raise ExportError(f"layer {spec.name!r}: explicit padding requires "
                              f"valid conv padding")
        h, w, _ = in_shape
        kh, kw = _pair(spec.config["kernel_size"])
        if (tuple(pads[0]), tuple(pads[1])) != (_same_split(h, kh, stride),
                                                _same_split(w, kw, stride)):
            raise ExportError(f"layer {spec.name!r}: explicit padding {pads} does "
                              f"not reconcile with the same-padding rule")
        return "same"

    def _map_Conv2D(self, spec: LayerSpec) -> None:
        self._conv_common(spec, depthwise=False)

    def _map_DepthwiseConv2D(self, spec: LayerSpec) -> None:
        self._conv_common(spec, depthwise=True)

    def _map_Dense(self, spec: LayerSpec) -> None:
        src = self._src(spec)
        in_shape = self.shape[src]
        if len(in_shape) != 1:
            raise ExportError(f"layer {spec.name!r}: Dense on rank-{len(in_shape)} "
                              f"input is not supported")
        raw = self.weights_of(spec.name)
        kernel = np.asarray(raw[0]).T  # (in, out) -> [out, in]
        fused, softmax = self._fused_activation(spec)
        weights = [self.graph.add_tensor(f"{spec.name}.w", kernel)]
        if spec.config.get("use_bias", True):
            weights.append(self.graph.add_tensor(f"{spec.name}.b", np.asarray(raw[1])))
        attrs = {"fused_activation": fused} if fused else {}
        self._emit(spec, "Dense", [src], weights, attrs, (kernel.shape[0],))
        self._maybe_softmax(spec, softmax)

    def _map_BatchNormalization(self, spec: LayerSpec) -> None:
        src = self._src(spec)
        in_shape = self.shape[src]
        axis = spec.config.get("axis", -1)
        if isinstance(axis, (list, tuple)):
            axis = axis[0]
        if axis not in (-1, len(in_shape)):
            raise ExportError(f"layer {spec.name!r}: BatchNorm axis {axis} is not "
                              f"the channel axis")
        raw = [np.asarray(a) for a in self.weights_of(spec.name)]
        ch = in_shape[-1]
        idx = 0
        if spec.config.get("scale", True):
            gamma = raw[idx]
            idx += 1
        else:
            gamma = np.ones(ch, dtype=np.float32)
        if spec.config.get("center", True):
            beta = raw[idx]
            idx += 1
        else:
            beta = np.zeros(ch, dtype=np.float32)
        mean, var = raw[idx], raw[idx + 1]
        weights = [
            self.graph.add_tensor(f"{spec.name}.gamma", gamma),
            self.graph.add_tensor(f"{spec.name}.beta", beta),
            self.graph.add_tensor(f"{spec.name}.mean", mean),
            self.graph.add_tensor(f"{spec.name}.var", var),
        ]
        attrs = {"epsilon": float(spec.config.get("epsilon", 1e-3)),
                 "momentum": float(spec.config.get("momentum", 0.99))}
        self._emit(spec, "BatchNorm", [src], weights, attrs, in_shape)

    def _map_ReLU(self, spec: LayerSpec) -> None:
        cfg = spec.config
        if cfg.get("negative_slope", 0.0) or cfg.get("threshold", 0.0):
            raise ExportError(f"layer {spec.name!r}: parametric ReLU is not supported")
        max_value = cfg.get("max_value")
        if max_value is None:
            kind = "ReLU"
        elif float(max_value) == 6.0:
            kind = "ReLU6"
        else:
            raise ExportError(f"layer {spec.name!r}: ReLU max_value {max_value}")
        src = self._src(spec)
        self._emit(spec, kind, [src], [], {}, self.shape[src])

    def _map_Activation(self, spec: LayerSpec) -> None:
        act = spec.config.get("activation", "linear")
        src = self._src(spec)
        if act == "linear":
            self.edge[spec.name] = src  # identity alias
            return
        if act == "softmax":
            self._emit(spec, "Softmax", [src], [], {}, self.shape[src])
            return
        if act in ("relu", "relu6"):
            self._emit(spec, _ACTIVATION_MAP[act], [src], [], {}, self.shape[src])
            return
        raise ExportError(f"layer {spec.name!r}: unsupported activation {act!r}")

    def _map_Softmax(self, spec: LayerSpec) -> None:
        if spec.config.get("axis", -1) != -1:
            raise ExportError(f"layer {spec.name!r}: Softmax axis must be -1")
        src = self._src(spec)
        self._emit(spec, "Softmax", [src], [], {}, self.shape[src])

    def _map_GlobalAveragePooling2D(self, spec: LayerSpec) -> None:
        if spec.config.get("keepdims", False):
            raise ExportError(f"layer {spec.name!r}: keepdims pooling is not supported")
        src = self._src(spec)
        self._emit(spec, "GlobalAvgPool", [src], [], {}, (self.shape[src][-1],))

    def _map_Dropout(self, spec: LayerSpec) -> None:
        src = self._src(spec)
        self._emit(spec, "Dropout", [src], [],
                   {"rate": float(spec.config.get("rate", 0.0))}, self.shape[src])

    def _map_Add(self, spec: LayerSpec) -> None:
        if len(spec.inputs) < 2:
            raise ExportError(f"layer {spec.name!r}: Add needs two inputs")
        srcs = [self.edge[name] for name in spec.inputs]
        acc = srcs[0]
        for i, other in enumerate(srcs[1:]):
            nid = spec.name if i == len(srcs) - 2 else f"{spec.name}_partial{i}"
            node = ExportNode(nid, "Add", [acc, other], [], {})
            self.graph.nodes.append(node)
            self.shape[nid] = self.shape[acc]
            acc = nid
        self.edge[spec.name] = acc

    def _map_ZeroPadding2D(self, spec: LayerSpec) -> None:
        if spec.config.get("data_format", "channels_last") != "channels_last":
            raise ExportError(f"layer {spec.name!r}: channels_first is not supported")
        pads = spec.config["padding"]
        pads = (tuple(int(v) for v in pads[0]), tuple(int(v) for v in pads[1]))
        src = self.edge[spec.inputs[0]]
        self.pending_pad[spec.name] = (pads, src)
        self.edge[spec.name] = src  # consumers resolve through pending_pad


def graph_from_config(model_config: dict, weights_of) -> ExportGraph:
    """ExportGraph from a Keras model config plus a name -> weights lookup."""
    builder = _Builder(weights_of)
    return builder.build(parse_layer_specs(model_config))
