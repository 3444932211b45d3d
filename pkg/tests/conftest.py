import numpy as np
import pytest

from quantnet.ir import INPUT_ID, Graph, Node, tensor_f32


def random_graph(seed: int, with_training_nodes: bool = True) -> Graph:
    """Random small, valid classifier graph for property tests.

    BatchNorms appear only in foldable positions (directly after a
    single-consumer conv/dense, or between GlobalAvgPool and Dense) so that
    optimize() can always reach a BN-free deployment form.
    """
    rng = np.random.default_rng(seed)
    h = int(rng.integers(6, 10))
    c = int(rng.integers(1, 4))
    nodes: list[Node] = []
    tensors: dict = {}
    nid = [0]

    def fresh(prefix):
        nid[0] += 1
        return f"{prefix}{nid[0]}"

    def weight(name, shape, scale):
        tensors[name] = tensor_f32(name, rng.normal(0, scale, shape).astype(np.float32))
        return name

    def add_node(kind, inputs, weights=(), **attrs):
        node = Node(fresh(kind.lower()), kind, list(inputs), list(weights), attrs)
        nodes.append(node)
        return node.id

    def add_bn(src, ch):
        name = fresh("bn")
        refs = [f"{name}.gamma", f"{name}.beta", f"{name}.mean", f"{name}.var"]
        tensors[refs[0]] = tensor_f32(refs[0], rng.uniform(0.5, 1.5, ch))
        tensors[refs[1]] = tensor_f32(refs[1], rng.normal(0, 0.3, ch))
        tensors[refs[2]] = tensor_f32(refs[2], rng.normal(0, 0.3, ch))
        tensors[refs[3]] = tensor_f32(refs[3], rng.uniform(0.5, 2.0, ch))
        nodes.append(Node(name, "BatchNorm", [src], refs, {"epsilon": 1e-3}))
        return name

    last = INPUT_ID
    ch = c
    for stage in range(int(rng.integers(1, 4))):
        if rng.random() < 0.3 and stage > 0:
            # residual: same-shape conv branch
            out_ch = ch
            k, stride = 3, 1
        else:
            out_ch = int(rng.integers(2, 5))
            k = int(rng.choice([1, 3]))
            stride = int(rng.choice([1, 2]))
        padding = "same" if (k > 1 or rng.random() < 0.5) else "valid"
        entry = last
        if rng.random() < 0.25 and stride == 1:
            wname = weight(fresh("dwk"), (1, k, k, ch), 0.5 / k)
            out_ch = ch
            last = add_node("DepthwiseConv2D", [last], [wname], stride=stride, padding="same")
        else:
            wname = weight(fresh("convk"), (out_ch, k, k, ch), 0.5 / np.sqrt(k * k * ch))
            weights = [wname]
            if rng.random() < 0.5:
                weights.append(weight(fresh("convb"), (out_ch,), 0.2))
            last = add_node("Conv2D", [last], weights, stride=stride, padding=padding)
        if rng.random() < 0.8:
            last = add_bn(last, out_ch)
        if rng.random() < 0.8:
            last = add_node(str(rng.choice(["ReLU", "ReLU6"])), [last])
        if out_ch == ch and stride == 1 and rng.random() < 0.5:
            last = add_node("Add", [entry, last])
        if with_training_nodes and rng.random() < 0.3:
            last = add_node("Dropout", [last], rate=float(rng.choice([0.1, 0.25])))
        ch = out_ch
    last = add_node("GlobalAvgPool", [last])
    if rng.random() < 0.6:
        last = add_bn(last, ch)
    hidden = int(rng.integers(3, 7))
    wname = weight(fresh("densek"), (hidden, ch), 0.5 / np.sqrt(ch))
    bname = weight(fresh("denseb"), (hidden,), 0.1)
    last = add_node("Dense", [last], [wname, bname])
    if rng.random() < 0.7:
        last = add_node("ReLU", [last])
    if with_training_nodes and rng.random() < 0.4:
        last = add_node("Dropout", [last], rate=0.2)
    classes = int(rng.integers(3, 5))
    wname = weight(fresh("densek"), (classes, hidden), 0.5 / np.sqrt(hidden))
    bname = weight(fresh("denseb"), (classes,), 0.1)
    last = add_node("Dense", [last], [wname, bname])
    add_node("Softmax", [last])
    return Graph(nodes, tensors, (h, h, c))


def random_input(graph: Graph, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.random((n, *graph.input_shape), dtype=np.float32)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Small synthetic dataset shared across tests: 4 classes x 40, 24px."""
    from quantnet.data import synth_dataset
    root = tmp_path_factory.mktemp("synthdata")
    return synth_dataset(root / "ds", classes=4, per_class=40, image_size=24, seed=7)
