import numpy as np
import pytest

from conftest import random_graph, random_input
from quantnet.builders import build_mobilenetv2_classifier, build_small_cnn
from quantnet.graphopt import (fold_batchnorm, fuse_conv_activation, optimize,
                               strip_training_nodes)
from quantnet.ir import INPUT_ID, Graph, Node, param_count, tensor_f32, validate_graph
from quantnet.runtime import execute_logits
from quantnet.tmf import serialize_tmf
from quantnet.train import make_checkpoint
from test_tmf import graphs_equal


def conv_bn_graph(gamma, beta, mean, var, eps=0.0, w=1.0, b=0.0):
    tensors = {
        "c.w": tensor_f32("c.w", np.full((1, 1, 1, 1), w, dtype=np.float32)),
        "c.b": tensor_f32("c.b", np.full(1, b, dtype=np.float32)),
        "bn.gamma": tensor_f32("bn.gamma", [gamma]),
        "bn.beta": tensor_f32("bn.beta", [beta]),
        "bn.mean": tensor_f32("bn.mean", [mean]),
        "bn.var": tensor_f32("bn.var", [var]),
    }
    nodes = [
        Node("c", "Conv2D", [INPUT_ID], ["c.w", "c.b"], {"stride": 1, "padding": "same"}),
        Node("bn", "BatchNorm", ["c"], ["bn.gamma", "bn.beta", "bn.mean", "bn.var"],
             {"epsilon": eps}),
        Node("softmax", "Softmax", ["bn"]),
    ]
    return Graph(nodes, tensors, (2, 2, 1))


class TestFoldBatchnorm:
    def test_substitution_example(self):
        # conv w=1, b=0 followed by BN(gamma=2, beta=3, mu=0, var=1, eps=0)
        g = fold_batchnorm(conv_bn_graph(2.0, 3.0, 0.0, 1.0))
        assert [n.kind for n in g.nodes] == ["Conv2D", "Softmax"]
        assert g.tensors["c.w"].data.item() == pytest.approx(2.0)
        assert g.tensors["c.b"].data.item() == pytest.approx(3.0)

    def test_identity_fold(self):
        g = fold_batchnorm(conv_bn_graph(1.0, 0.0, 0.0, 1.0))
        assert g.tensors["c.w"].data.item() == pytest.approx(1.0)
        assert g.tensors["c.b"].data.item() == pytest.approx(0.0)

    def test_creates_bias_when_missing(self):
        g = conv_bn_graph(2.0, 3.0, 1.0, 4.0)
        g.nodes[0].weights = ["c.w"]
        del g.tensors["c.b"]
        folded = fold_batchnorm(g)
        # b' = (0 - 1) * 2/sqrt(4) + 3 = 2
        assert folded.tensors["c.b"].data.item() == pytest.approx(2.0)

    def test_execution_equivalence_random(self):
        for seed in range(8):
            g = random_graph(seed, with_training_nodes=False)
            folded = fold_batchnorm(g)
            assert not any(n.kind == "BatchNorm" and n.id not in
                           folded.meta.get("unfolded_batchnorms", [])
                           for n in folded.nodes)
            x = random_input(g, 4, seed)
            _, l0 = execute_logits(g, x)
            _, l1 = execute_logits(folded, x)
            assert np.abs(l0 - l1).max() <= 1e-5

    def test_256_input_equivalence(self):
        g = random_graph(12, with_training_nodes=False)
        folded = fold_batchnorm(g)
        x = random_input(g, 256, 99)
        _, l0 = execute_logits(g, x)
        _, l1 = execute_logits(folded, x)
        assert np.abs(l0 - l1).max() <= 1e-5

    def test_unfoldable_bn_left_and_reported(self):
        # BN fed by Add folds neither backward nor forward
        tensors = {
            "c.w": tensor_f32("c.w", np.ones((1, 1, 1, 1), dtype=np.float32)),
            "bn.gamma": tensor_f32("bn.gamma", [2.0]),
            "bn.beta": tensor_f32("bn.beta", [0.5]),
            "bn.mean": tensor_f32("bn.mean", [0.0]),
            "bn.var": tensor_f32("bn.var", [1.0]),
        }
        nodes = [
            Node("c", "Conv2D", [INPUT_ID], ["c.w"], {"stride": 1, "padding": "same"}),
            Node("add", "Add", ["c", "c"]),
            Node("bn", "BatchNorm", ["add"], ["bn.gamma", "bn.beta", "bn.mean", "bn.var"],
                 {"epsilon": 0.0}),
            Node("softmax", "Softmax", ["bn"]),
        ]
        g = Graph(nodes, tensors, (2, 2, 1))
        folded = fold_batchnorm(g)
        assert any(n.kind == "BatchNorm" for n in folded.nodes)
        assert folded.meta["unfolded_batchnorms"] == ["bn"]


class TestStripTrainingNodes:
    def test_removes_dropout_and_slots(self):
        ck = make_checkpoint(build_small_cnn(4, input_size=16))
        p = param_count(ck.graph)["trainable"]
        stripped = strip_training_nodes(ck)
        assert not any(n.kind in ("Dropout", "FakeQuant") for n in stripped.nodes)
        saved = len(serialize_tmf(ck)) - len(serialize_tmf(stripped))
        assert saved >= 8 * p

    def test_no_training_nodes_is_identity(self):
        g = random_graph(4, with_training_nodes=False)
        assert graphs_equal(strip_training_nodes(g), g)

    def test_inference_unchanged(self):
        g = build_small_cnn(4, input_size=16)
        x = random_input(g, 4, 0)
        _, l0 = execute_logits(g, x)
        _, l1 = execute_logits(strip_training_nodes(g), x)
        assert np.abs(l0 - l1).max() <= 1e-6

    def test_output_validates(self):
        for seed in range(10):
            assert validate_graph(strip_training_nodes(random_graph(seed))) == []


class TestFuseConvActivation:
    def test_structural_fuse(self):
        tensors = {"c.w": tensor_f32("c.w", np.ones((2, 1, 1, 1), dtype=np.float32))}
        nodes = [
            Node("c", "Conv2D", [INPUT_ID], ["c.w"], {"stride": 1, "padding": "same"}),
            Node("act", "ReLU6", ["c"]),
            Node("softmax", "Softmax", ["act"]),
        ]
        g = fuse_conv_activation(Graph(nodes, tensors, (2, 2, 1)))
        assert [n.kind for n in g.nodes] == ["Conv2D", "Softmax"]
        assert g.node("c").attrs["fused_activation"] == "ReLU6"

    def test_two_consumer_activation_not_fused(self):
        tensors = {"c.w": tensor_f32("c.w", np.ones((1, 1, 1, 1), dtype=np.float32))}
        nodes = [
            Node("c", "Conv2D", [INPUT_ID], ["c.w"], {"stride": 1, "padding": "same"}),
            Node("act", "ReLU", ["c"]),
            Node("add", "Add", ["act", "act"]),
            Node("softmax", "Softmax", ["add"]),
        ]
        g = fuse_conv_activation(Graph(nodes, tensors, (2, 2, 1)))
        assert any(n.kind == "ReLU" for n in g.nodes)

    def test_execution_equivalence(self):
        for seed in range(8):
            g = random_graph(seed, with_training_nodes=False)
            fused = fuse_conv_activation(g)
            assert len(fused.nodes) <= len(g.nodes)
            x = random_input(g, 4, seed + 1)
            _, l0 = execute_logits(g, x)
            _, l1 = execute_logits(fused, x)
            assert np.abs(l0 - l1).max() <= 1e-6


class TestOptimize:
    def test_mobilenet_reaches_clean_form(self):
        ck = make_checkpoint(build_mobilenetv2_classifier(4, 1.0))
        g = optimize(ck)
        kinds = {n.kind for n in g.nodes}
        assert "BatchNorm" not in kinds and "Dropout" not in kinds
        assert validate_graph(g) == []

    def test_idempotent(self):
        g1 = optimize(make_checkpoint(build_small_cnn(4, input_size=16)))
        g2 = optimize(g1)
        assert graphs_equal(g1, g2)

    def test_node_count_monotone(self):
        for seed in range(10):
            g = random_graph(seed)
            assert len(optimize(g).nodes) <= len(g.nodes)

    def test_logit_preservation(self):
        for seed in range(6):
            g = random_graph(seed)
            og = optimize(g)
            x = random_input(g, 64, seed + 7)
            _, l0 = execute_logits(g, x)
            _, l1 = execute_logits(og, x)
            assert np.abs(l0 - l1).max() <= 1e-4
