"""Step 1: heterogeneous token embedding and the causal generator decoder.

Produces per-position hidden states H1 that later stages consume as
Key/Value.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import DecoderLayer, LayerNorm, init_param
from .data import TokenStream
from .tensor import AttentionMask, Tensor

N_TOKEN_TYPES = 4  # user / context / content / item


def causal_mask(seq_len: int) -> AttentionMask:
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    return AttentionMask(np.tril(np.ones((seq_len, seq_len), dtype=bool)))


def padded_causal_mask(seq_len: int, n_pad: int) -> AttentionMask:
    """Causal mask for a left-padded stream: real rows never see pad keys,
    pad rows see only themselves."""
    total = n_pad + seq_len
    allowed = np.tril(np.ones((total, total), dtype=bool))
    allowed[:, :n_pad] = False
    allowed[np.arange(n_pad), np.arange(n_pad)] = True
    return AttentionMask(allowed)


class HeterogeneousEmbedding:
    """Sum of per-type token, token-type, and learned positional embeddings."""

    def __init__(self, dim: int, vocab_sizes: dict, max_len: int, rng: np.random.Generator):
        self.dim = dim
        self.max_len = max_len
        self.vocab_sizes = dict(vocab_sizes)
        self.tables = {t: init_param(rng, self.vocab_sizes[t], dim)
                       for t in ("user", "context", "content", "item")}
        self._by_code = [self.tables["user"], self.tables["context"],
                         self.tables["content"], self.tables["item"]]
        self._names = ("user", "context", "content", "item")
        self.type_table = init_param(rng, N_TOKEN_TYPES, dim)
        self.pos_table = init_param(rng, max_len, dim)
        self.pad_vector = init_param(rng, 1, dim)

    def encode(self, stream: TokenStream, positions: np.ndarray) -> Tensor:
        if positions.max(initial=0) >= self.max_len:
            raise ValueError(f"position {positions.max()} exceeds max_len {self.max_len}")
        sizes = np.array([t.shape[0] for t in self._by_code])
        bad = (stream.ids < 0) | (stream.ids >= sizes[stream.types])
        if bad.any():
            i = int(np.argwhere(bad)[0][0])
            raise ValueError(
                f"unknown {self._names[stream.types[i]]} token id {int(stream.ids[i])} "
                f"(vocab {int(sizes[stream.types[i]])})")
        # one lookup into the concatenated tables; concat's backward
        # routes gradients back to the per-type tables
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        combined = T.concat(self._by_code, axis=0)
        tok = T.embedding(combined, offsets[stream.types] + stream.ids)
        typ = T.embedding(self.type_table, stream.types)
        pos = T.embedding(self.pos_table, positions)
        return T.add(T.add(tok, typ), pos)

    def item_table(self) -> Tensor:
        return self.tables["item"]

    def params(self) -> dict:
        out = {f"emb.{n}": t for n, t in self.tables.items()}
        out["emb.type"] = self.type_table
        out["emb.pos"] = self.pos_table
        out["emb.pad"] = self.pad_vector
        return out


class GDecoder:
    """Pre-norm multi-head causal self-attention stack."""

    def __init__(self, dim: int, heads: int, layers: int, ffn_dim: int,
                 rng: np.random.Generator):
        self.layers = [DecoderLayer(dim, heads, ffn_dim, rng) for _ in range(layers)]
        self.final_ln = LayerNorm(dim)

    def __call__(self, x: Tensor, mask: AttentionMask) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask)
        return self.final_ln(x)

    def params(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"backbone.l{i}"))
        out.update(self.final_ln.params("backbone.ln"))
        return out


class Backbone:
    """Embedding plus decoder; ``encode_stream`` yields H1 (seq_len x d)."""

    def __init__(self, dim: int, heads: int, layers: int, ffn_dim: int,
                 vocab_sizes: dict, max_len: int, rng: np.random.Generator):
        self.embedding = HeterogeneousEmbedding(dim, vocab_sizes, max_len, rng)
        self.decoder = GDecoder(dim, heads, layers, ffn_dim, rng)
        self.max_len = max_len

    def encode_stream(self, stream: TokenStream, pad_to: int | None = None) -> Tensor:
        n = len(stream)
        if n < 1:
            raise ValueError("empty token stream")
        if n > self.max_len:
            raise ValueError(f"stream length {n} exceeds max_len {self.max_len}; "
                             "truncation is the loader's job")
        positions = np.arange(n)
        if pad_to is None or pad_to == n:
            x = self.embedding.encode(stream, positions)
            h = self.decoder(x, causal_mask(n))
            return h
        if pad_to < n:
            raise ValueError(f"pad_to {pad_to} shorter than stream {n}")
        if pad_to > self.max_len:
            raise ValueError(f"pad_to {pad_to} exceeds max_len {self.max_len}")
        n_pad = pad_to - n
        real = self.embedding.encode(stream, positions)
        pad = T.concat([self.embedding.pad_vector] * n_pad, axis=0) if n_pad > 1 \
            else self.embedding.pad_vector
        x = T.concat([pad, real], axis=0)
        h = self.decoder(x, padded_causal_mask(n, n_pad))
        return h[n_pad:, :]

    def params(self) -> dict:
        out = self.embedding.params()
        out.update(self.decoder.params())
        return out
