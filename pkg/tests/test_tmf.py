import json

import numpy as np
import pytest

from conftest import random_graph
from quantnet.builders import build_small_cnn
from quantnet.ir import Checkpoint, DType, QuantParams
from quantnet.tmf import (ALIGN, BadMagicError, LengthMismatchError,
                          TruncatedPayloadError, UnknownNodeKindError, _align,
                          parse_tmf, serialize_tmf)
from quantnet.train import make_checkpoint


def graphs_equal(a, b) -> bool:
    if [(n.id, n.kind, n.inputs, n.weights, n.attrs) for n in a.nodes] != \
       [(n.id, n.kind, n.inputs, n.weights, n.attrs) for n in b.nodes]:
        return False
    if set(a.tensors) != set(b.tensors):
        return False
    for name, ta in a.tensors.items():
        tb = b.tensors[name]
        if (ta.dtype != tb.dtype or ta.shape != tb.shape or ta.quant != tb.quant
                or ta.training_only != tb.training_only
                or ta.data.tobytes() != tb.data.tobytes()):
            return False
    return (tuple(a.input_shape) == tuple(b.input_shape)
            and a.class_names == b.class_names and a.meta == b.meta)


class TestRoundTrip:
    def test_graph_round_trip(self):
        g = build_small_cnn(4, input_size=16, class_names=["a", "b", "c", "d"])
        g2 = parse_tmf(serialize_tmf(g))
        assert graphs_equal(g, g2)

    def test_random_graphs_round_trip(self):
        for seed in range(20):
            g = random_graph(seed)
            assert graphs_equal(g, parse_tmf(serialize_tmf(g)))

    def test_checkpoint_round_trip(self):
        ck = make_checkpoint(build_small_cnn(4, input_size=16), epoch=7,
                             best_epoch=5, seed=99)
        ck2 = parse_tmf(serialize_tmf(ck))
        assert isinstance(ck2, Checkpoint)
        assert (ck2.epoch, ck2.best_epoch, ck2.seed) == (7, 5, 99)
        assert graphs_equal(ck.graph, ck2.graph)
        assert set(ck2.optimizer_slots) == set(ck.optimizer_slots)
        for name, t in ck.optimizer_slots.items():
            t2 = ck2.optimizer_slots[name]
            assert t2.training_only and t2.data.tobytes() == t.data.tobytes()

    def test_quant_params_survive(self):
        g = build_small_cnn(4, input_size=16)
        t = g.tensors["head_out.w"]
        t.data = np.clip(t.data * 100, -127, 127).astype(np.int8)
        t.dtype = DType.I8
        t.quant = QuantParams((0.5, 0.25, 0.125, 1.0), (0, 0, 0, 0), axis=0)
        g2 = parse_tmf(serialize_tmf(g))
        assert g2.tensors["head_out.w"].quant == t.quant

    def test_bytes_deterministic(self):
        g = build_small_cnn(4, input_size=16, seed=3)
        assert serialize_tmf(g) == serialize_tmf(build_small_cnn(4, input_size=16, seed=3))


class TestFormat:
    def test_magic(self):
        blob = serialize_tmf(build_small_cnn(4, input_size=16))
        assert blob[:4] == b"TMF1"

    def test_bad_magic(self):
        blob = bytearray(serialize_tmf(build_small_cnn(4, input_size=16)))
        blob[:4] = b"XXXX"
        with pytest.raises(BadMagicError):
            parse_tmf(bytes(blob))

    def test_truncated_payload(self):
        blob = serialize_tmf(build_small_cnn(4, input_size=16))
        with pytest.raises(TruncatedPayloadError):
            parse_tmf(blob[:-10])

    def test_length_disagreement(self):
        blob = serialize_tmf(build_small_cnn(4, input_size=16))
        with pytest.raises(LengthMismatchError):
            parse_tmf(blob + b"\x00" * 8)

    def test_unknown_node_kind(self):
        blob = serialize_tmf(build_small_cnn(4, input_size=16))
        with pytest.raises(UnknownNodeKindError):
            parse_tmf(blob.replace(b'"kind":"Conv2D"', b'"kind":"Conv9D"'))

    def test_too_short(self):
        with pytest.raises(TruncatedPayloadError):
            parse_tmf(b"TMF")

    def test_file_size_formula(self):
        """size = align64(8 + header_len) + sum of 64-byte-aligned tensor slots."""
        g = build_small_cnn(4, input_size=16)
        blob = serialize_tmf(g)
        header_len = int.from_bytes(blob[4:8], "little")
        payload = sum(_align(t.nbytes) for t in g.tensors.values())
        assert len(blob) == _align(8 + header_len) + payload

    def test_hundred_byte_header_arithmetic(self):
        # one F32 tensor of 16 elements (64 bytes) behind a 100-byte header:
        # 8 + 100 -> padded to 128, plus one aligned 64-byte slot = 192.
        assert _align(8 + 100) + _align(16 * 4) == 8 + 100 + 20 + 64 == 192

    def test_payload_offsets_aligned(self):
        g = random_graph(5)
        blob = serialize_tmf(g)
        header_len = int.from_bytes(blob[4:8], "little")
        header = json.loads(blob[8:8 + header_len])
        payload_start = _align(8 + header_len)
        assert payload_start % ALIGN == 0
        for entry in header["tensors"]:
            assert entry["offset"] % ALIGN == 0

    def test_payload_little_endian_row_major(self):
        g = build_small_cnn(4, input_size=16)
        blob = serialize_tmf(g)
        header_len = int.from_bytes(blob[4:8], "little")
        header = json.loads(blob[8:8 + header_len])
        start = _align(8 + header_len)
        entry = next(e for e in header["tensors"] if e["name"] == "head_out.b")
        raw = blob[start + entry["offset"]:start + entry["offset"] + entry["nbytes"]]
        assert np.frombuffer(raw, dtype="<f4").tolist() == \
            g.tensors["head_out.b"].data.tolist()

    def test_refuses_invalid_graph(self):
        g = build_small_cnn(4, input_size=16)
        g.nodes[0].weights.append("w99")
        with pytest.raises(ValueError):
            serialize_tmf(g)
