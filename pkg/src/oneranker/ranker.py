"""Step 3: single-layer ranking decoder over pass-through Key/Value.

Candidates are mutually invisible (diagonal self-attention) so each score
is independent of the rest of the set; the Key/Value concatenates Step-1
states with Step-2 task and fake-item representations.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import DecoderLayer, init_param, zeros_param
from .tensor import AttentionMask, Tensor


def build_rank_mask(n: int) -> AttentionMask:
    """Rows [T_r; candidates]: T_r sees itself; candidate j sees T_r and itself."""
    if n < 1:
        raise ValueError("need at least one candidate")
    allowed = np.zeros((n + 1, n + 1), dtype=bool)
    allowed[0, 0] = True
    allowed[1:, 0] = True
    allowed[np.arange(1, n + 1), np.arange(1, n + 1)] = True
    return AttentionMask(allowed)


def fuse_kv(h1: Tensor, task_reps: Tensor | None = None,
            fake_reps: Tensor | None = None) -> Tensor:
    """Pass-through Key/Value: [H1; task reps; fake reps] along the sequence axis."""
    parts = [h1]
    for p in (task_reps, fake_reps):
        if p is None:
            continue
        if p.shape[1] != h1.shape[1]:
            raise ValueError(f"KV dim mismatch: {p.shape[1]} != {h1.shape[1]}")
        parts.append(p)
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=0)


class RDecoder:
    """Ranking task token, one decoder layer, and the scalar scoring head."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, k: int,
                 rng: np.random.Generator):
        self.token = init_param(rng, 1, dim, std=0.5)
        self.layer = DecoderLayer(dim, heads, ffn_dim, rng, cross=True)
        # learned k -> d projection folding the cosine channel into the
        # candidate token input
        self.k = k
        if k > 0:
            self.cos_proj = init_param(rng, k, dim)
        hidden = max(1, dim // 2)
        self.head_w1 = init_param(rng, dim, hidden)
        self.head_b1 = zeros_param(hidden)
        self.head_w2 = init_param(rng, hidden, 1)
        self.head_b2 = zeros_param(1)

    def candidate_inputs(self, cand_embs: Tensor, cos_channel: Tensor | None) -> Tensor:
        if cos_channel is None or self.k == 0:
            return cand_embs
        return T.add(cand_embs, T.matmul(cos_channel, self.cos_proj))

    def score(self, cand_inputs: Tensor, kv: Tensor) -> Tensor:
        """Score n candidates in one forward pass; no output normalization."""
        n = cand_inputs.shape[0]
        if n < 1:
            raise ValueError("empty candidate set")
        queries = T.concat([self.token, cand_inputs], axis=0)
        out = self.layer(queries, build_rank_mask(n), kv=kv, cross_first=True)
        cand_out = out[1:, :]
        h = T.silu(T.linear(cand_out, self.head_w1, self.head_b1))
        return T.linear(h, self.head_w2, self.head_b2)[:, 0]

    def params(self) -> dict:
        out = {"ranker.token": self.token}
        out.update(self.layer.params("ranker.l0"))
        if self.k > 0:
            out["ranker.cos_proj"] = self.cos_proj
        out.update({"ranker.head.w1": self.head_w1, "ranker.head.b1": self.head_b1,
                    "ranker.head.w2": self.head_w2, "ranker.head.b2": self.head_b2})
        return out
