"""Step-1 backbone: causality, padding, shape and vocab contracts."""

import numpy as np
import pytest

from oneranker.backbone import Backbone, causal_mask
from oneranker.data import TokenStream
from oneranker.tensor import using_dtype

VOCABS = {"user": 20, "context": 6, "content": 8, "item": 40}


def make_backbone(seed=0, dim=16, max_len=32):
    rng = np.random.default_rng(seed)
    return Backbone(dim=dim, heads=2, layers=2, ffn_dim=32,
                    vocab_sizes=VOCABS, max_len=max_len, rng=rng)


def random_stream(rng, length):
    types = rng.integers(0, 4, size=length)
    caps = np.array([VOCABS["user"], VOCABS["context"], VOCABS["content"], VOCABS["item"]])
    ids = rng.integers(0, caps[types])
    return TokenStream(types, ids)


class TestCausalMask:
    def test_single_position(self):
        np.testing.assert_array_equal(causal_mask(1).allowed, [[True]])

    def test_three_positions(self):
        want = np.array([[1, 0, 0], [1, 1, 0], [1, 1, 1]], dtype=bool)
        np.testing.assert_array_equal(causal_mask(3).allowed, want)

    @pytest.mark.parametrize("n", [1, 2, 5, 17])
    def test_triangular_count(self, n):
        assert causal_mask(n).allowed.sum() == n * (n + 1) // 2


class TestEncodeStream:
    def test_strict_causality(self):
        rng = np.random.default_rng(1)
        bb = make_backbone()
        stream = random_stream(rng, 12)
        base = bb.encode_stream(stream).values
        for p in range(1, 12):
            perturbed = TokenStream(stream.types.copy(), stream.ids.copy())
            perturbed.ids[p] = (perturbed.ids[p] + 1) % VOCABS[
                ("user", "context", "content", "item")[perturbed.types[p]]]
            out = bb.encode_stream(perturbed).values
            assert (out[:p] == base[:p]).all()

    def test_padding_does_not_alter_real_positions(self):
        # masked pads contribute exactly zero, but the longer sequence makes
        # BLAS pick a different accumulation order, so compare at float64
        # roundoff rather than bitwise
        rng = np.random.default_rng(2)
        with using_dtype(np.float64):
            bb = make_backbone()
            stream = random_stream(rng, 10)
            base = bb.encode_stream(stream).values
            padded = bb.encode_stream(stream, pad_to=16).values
        np.testing.assert_allclose(padded, base, rtol=0, atol=1e-12)

    def test_output_shapes(self):
        rng = np.random.default_rng(3)
        bb = make_backbone(dim=16)
        for _ in range(100):
            length = int(rng.integers(1, 32))
            out = bb.encode_stream(random_stream(rng, length))
            assert out.shape == (length, 16)

    def test_unknown_token_rejected(self):
        bb = make_backbone()
        stream = TokenStream(np.array([3]), np.array([VOCABS["item"]]))
        with pytest.raises(ValueError, match="unknown item token"):
            bb.encode_stream(stream)

    def test_overlong_stream_rejected(self):
        rng = np.random.default_rng(4)
        bb = make_backbone(max_len=8)
        with pytest.raises(ValueError, match="max_len"):
            bb.encode_stream(random_stream(rng, 9))

    def test_deterministic_forward(self):
        rng = np.random.default_rng(5)
        bb = make_backbone()
        stream = random_stream(rng, 7)
        a = bb.encode_stream(stream).values
        b = bb.encode_stream(stream).values
        assert (a == b).all()
