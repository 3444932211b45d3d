"""Deployment-time graph transforms: training-node stripping, batch-norm
folding, conv+activation fusion.

All transforms are pure (they return new graphs) and preserve inference
semantics; `optimize` composes them in the fixed order strip -> fold -> fuse
so folding always sees inference-form graphs.
"""

from __future__ import annotations

import numpy as np

from .ir import Checkpoint, Graph, Node, Tensor, tensor_f32, validate_graph


def _copy_graph(graph: Graph) -> Graph:
    nodes = [Node(n.id, n.kind, list(n.inputs), list(n.weights), dict(n.attrs))
             for n in graph.nodes]
    tensors = {name: Tensor(name, t.data.copy(), t.dtype, t.quant, t.training_only)
               for name, t in graph.tensors.items()}
    return Graph(nodes, tensors, tuple(graph.input_shape),
                 class_names=list(graph.class_names) if graph.class_names else None,
                 meta=dict(graph.meta))


def _purge_unreferenced(graph: Graph) -> None:
    used = {w for n in graph.nodes for w in n.weights}
    for name in [t for t in graph.tensors if t not in used]:
        del graph.tensors[name]


def _rewire(graph: Graph, old_id: str, new_id: str) -> None:
    for n in graph.nodes:
        n.inputs = [new_id if i == old_id else i for i in n.inputs]


def strip_training_nodes(obj: Checkpoint | Graph) -> Graph:
    """Remove Dropout/FakeQuant nodes and every training_only tensor.

    FakeQuant ranges live in node attrs; collect them (see
    quantize.collect_fake_quant_stats) before stripping if they are needed.
    """
    graph = _copy_graph(obj.graph if isinstance(obj, Checkpoint) else obj)
    for node in [n for n in graph.nodes if n.kind in ("Dropout", "FakeQuant")]:
        _rewire(graph, node.id, node.inputs[0])
        graph.nodes.remove(node)
    for name in [n for n, t in graph.tensors.items() if t.training_only]:
        del graph.tensors[name]
    _purge_unreferenced(graph)
    return graph


_FOLDABLE_PRODUCERS = ("Conv2D", "DepthwiseConv2D", "Dense")


def fold_batchnorm(graph: Graph) -> Graph:
    """Fold inference-mode BatchNorm into adjacent conv/dense weights.

    Conv->BN folds backward into the producer; BN->Dense (the head pattern
    after global pooling) folds forward.  BNs in neither position are left
    intact and recorded under meta["unfolded_batchnorms"].
    """
    g = _copy_graph(graph)
    unfolded = []
    for bn in [n for n in g.nodes if n.kind == "BatchNorm"]:
        gamma, beta, mean, var = (g.tensors[w].data.astype(np.float64) for w in bn.weights)
        inv_std = gamma / np.sqrt(var + bn.attrs["epsilon"])
        producer = next((n for n in g.nodes if n.id == bn.inputs[0]), None)
        if (producer is not None and producer.kind in _FOLDABLE_PRODUCERS
                and producer.attrs.get("fused_activation") is None
                and len(g.consumers(producer.id)) == 1):
            _fold_backward(g, producer, bn, inv_std, beta, mean)
        else:
            consumers = g.consumers(bn.id)
            if len(consumers) == 1 and consumers[0].kind == "Dense":
                _fold_forward(g, consumers[0], bn, inv_std, beta, mean)
            else:
                unfolded.append(bn.id)
                continue
        _rewire(g, bn.id, bn.inputs[0])
        g.nodes.remove(bn)
    _purge_unreferenced(g)
    if unfolded:
        g.meta["unfolded_batchnorms"] = unfolded
    return g


def _fold_backward(g: Graph, producer: Node, bn: Node, inv_std, beta, mean) -> None:
    """w' = w * gamma/sigma per output channel; b' = (b - mu)*gamma/sigma + beta."""
    wt = g.tensors[producer.weights[0]]
    w = wt.data.astype(np.float64)
    if producer.kind == "DepthwiseConv2D":
        w = w * inv_std  # channels on the last axis
    elif producer.kind == "Dense":
        w = w * inv_std[:, None]
    else:
        w = w * inv_std[:, None, None, None]
    wt.data = w.astype(np.float32)
    if len(producer.weights) > 1:
        bt = g.tensors[producer.weights[1]]
        b = bt.data.astype(np.float64)
    else:
        b = np.zeros(beta.shape[0], dtype=np.float64)
        bname = f"{producer.id}.b"
        g.tensors[bname] = tensor_f32(bname, b)
        producer.weights.append(bname)
        bt = g.tensors[bname]
    bt.data = ((b - mean) * inv_std + beta).astype(np.float32)


def _fold_forward(g: Graph, dense: Node, bn: Node, inv_std, beta, mean) -> None:
    """W' = W * diag(gamma/sigma); b' = b + W (beta - gamma mu / sigma)."""
    wt = g.tensors[dense.weights[0]]
    w = wt.data.astype(np.float64)
    shift = beta - mean * inv_std
    if len(dense.weights) > 1:
        bt = g.tensors[dense.weights[1]]
        bt.data = (bt.data.astype(np.float64) + w @ shift).astype(np.float32)
    else:
        bname = f"{dense.id}.b"
        g.tensors[bname] = tensor_f32(bname, w @ shift)
        dense.weights.append(bname)
    wt.data = (w * inv_std[None, :]).astype(np.float32)


def fuse_conv_activation(graph: Graph) -> Graph:
    """Absorb a ReLU/ReLU6 into the conv/dense that feeds it.

    Applies only when the producer feeds nothing else and the activation
    itself has a single consumer."""
    g = _copy_graph(graph)

    def edge_uses(node_id):
        return sum(n.inputs.count(node_id) for n in g.nodes)

    for act in [n for n in g.nodes if n.kind in ("ReLU", "ReLU6")]:
        producer = next((n for n in g.nodes if n.id == act.inputs[0]), None)
        if (producer is None or producer.kind not in _FOLDABLE_PRODUCERS
                or producer.attrs.get("fused_activation") is not None
                or edge_uses(producer.id) != 1
                or edge_uses(act.id) != 1):
            continue
        producer.attrs["fused_activation"] = act.kind
        _rewire(g, act.id, producer.id)
        g.nodes.remove(act)
    return g


def optimize(obj: Checkpoint | Graph) -> Graph:
    """Full deployment conversion: strip -> fold -> fuse."""
    g = fuse_conv_activation(fold_batchnorm(strip_training_nodes(obj)))
    violations = validate_graph(g)
    if violations:
        raise ValueError("optimize produced an invalid graph: " + "; ".join(violations))
    return g
