"""Step 2: task/fake-item tokens, heterogeneous attention, dual-channel reps.

The decoder queries are [interest tasks; value tasks; fake items]; each
layer cross-attends to Step-1 states before self-attending under the
heterogeneous visibility mask. User and item representations carry a
target-aware channel built from the fake-item anchors.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import DecoderLayer, init_param, zeros_param
from .data import kmeans
from .tensor import AttentionMask, Tensor


class TaskTokenBank:
    """Learnable task tokens: m interest tokens then v value tokens.

    The ordering is a fixed business prior (impression, click, conversion,
    further interest dims, value last); the causal self-attention mask
    realizes it.
    """

    def __init__(self, interest: int, value: int, dim: int, rng: np.random.Generator):
        if interest < 1 or value < 0:
            raise ValueError(f"need >=1 interest and >=0 value tokens, got {interest}/{value}")
        self.m = interest
        self.v = value
        self.tokens = init_param(rng, interest + value, dim, std=0.5)

    @property
    def total(self) -> int:
        return self.m + self.v

    def query(self) -> Tensor:
        return self.tokens

    def params(self) -> dict:
        return {"task.tokens": self.tokens}


class FakeItemBank:
    """Item-space anchors; k-means centers of the item table, then trainable."""

    def __init__(self, centers: np.ndarray, trainable: bool = True):
        if centers.ndim != 2 or centers.shape[0] < 1:
            raise ValueError(f"need (k, d) centers, got {centers.shape}")
        self.centers = Tensor(centers, requires_grad=trainable)

    @classmethod
    def from_kmeans(cls, item_embeddings: np.ndarray, k: int, seed: int,
                    trainable: bool = True) -> "FakeItemBank":
        res = kmeans(np.asarray(item_embeddings, dtype=np.float64), k, seed=seed)
        return cls(res.centers.astype(item_embeddings.dtype), trainable=trainable)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    def params(self) -> dict:
        return {"fake.centers": self.centers} if self.centers.requires_grad else {}


def build_hetero_mask(m_total: int, k: int, fully_visible: bool = False) -> AttentionMask:
    """Visibility among [tasks; fakes]: tasks causal over tasks and see all
    fakes; fakes see all tasks and only themselves."""
    if m_total < 1 or k < 0:
        raise ValueError(f"need m_total >= 1, k >= 0; got {m_total}, {k}")
    n = m_total + k
    if fully_visible:
        return AttentionMask.full(n, n)
    allowed = np.zeros((n, n), dtype=bool)
    allowed[:m_total, :m_total] = np.tril(np.ones((m_total, m_total), dtype=bool))
    allowed[:m_total, m_total:] = True
    allowed[m_total:, :m_total] = True
    allowed[m_total:, m_total:] = np.eye(k, dtype=bool)
    return AttentionMask(allowed)


class HeteroDecoder:
    """Stack of cross-then-self decoder layers over the [tasks; fakes] query."""

    def __init__(self, dim: int, heads: int, layers: int, ffn_dim: int,
                 rng: np.random.Generator, cross_first: bool = True):
        if layers < 1:
            raise ValueError("need at least one layer")
        self.cross_first = cross_first
        self.layers = [DecoderLayer(dim, heads, ffn_dim, rng, cross=True)
                       for _ in range(layers)]

    def __call__(self, queries: Tensor, h1: Tensor, mask: AttentionMask):
        if queries.shape[1] != h1.shape[1]:
            raise ValueError(f"query dim {queries.shape[1]} != H1 dim {h1.shape[1]}")
        x = queries
        for layer in self.layers:
            x = layer(x, mask, kv=h1, cross_first=self.cross_first)
        return x

    def params(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"hetero.l{i}"))
        return out


def hetero_decoder_forward(bank: TaskTokenBank, fakes: FakeItemBank | None,
                           h1: Tensor, decoder: HeteroDecoder,
                           fully_visible: bool = False):
    """Run the decoder; returns (task_reps, fake_reps) split of the output."""
    k = fakes.k if fakes is not None else 0
    queries = bank.query() if k == 0 else T.concat([bank.query(), fakes.centers], axis=0)
    mask = build_hetero_mask(bank.total, k, fully_visible=fully_visible)
    out = decoder(queries, h1, mask)
    task_reps = out[:bank.total, :]
    fake_reps = out[bank.total:, :] if k else None
    return task_reps, fake_reps


class TargetChannelMLP:
    """Shared pair scorer: concat(fake_j, task_i) -> k-dim preference vector."""

    def __init__(self, dim: int, hidden: int, k: int, rng: np.random.Generator):
        self.w1 = init_param(rng, 2 * dim, hidden)
        self.b1 = zeros_param(hidden)
        self.w2 = init_param(rng, hidden, k)
        self.b2 = zeros_param(k)

    def pair_scores(self, task_rep: Tensor, fake_reps: Tensor) -> Tensor:
        k = fake_reps.shape[0]
        tiled = T.matmul(Tensor(np.ones((k, 1), dtype=task_rep.values.dtype)),
                         T.reshape(task_rep, (1, -1)))
        pairs = T.concat([fake_reps, tiled], axis=1)
        return T.linear(T.silu(T.linear(pairs, self.w1, self.b1)), self.w2, self.b2)

    def params(self) -> dict:
        return {"target.w1": self.w1, "target.b1": self.b1,
                "target.w2": self.w2, "target.b2": self.b2}


def target_channel(task_rep: Tensor, fake_reps: Tensor, mlp: TargetChannelMLP) -> Tensor:
    """Sum-pooled pair scores: the k-dim target-aware preference vector."""
    return T.tsum(mlp.pair_scores(task_rep, fake_reps), axis=0)


def user_representation(e_task: Tensor, s_target: Tensor | None) -> Tensor:
    """Dual-channel user vector: concat(semantic channel, target channel)."""
    if s_target is None:
        return e_task
    return T.concat([e_task, s_target], axis=0)


def enhance_item(e_item: Tensor, centers: Tensor | None) -> Tensor:
    """Symmetric item enhancement: append cosine similarities to the anchors.

    Accepts a single (d,) item or an (n, d) batch; zero-norm vectors get
    cosine 0 (see cosine_similarity_matrix).
    """
    if centers is None:
        return e_item
    single = e_item.ndim == 1
    mat = T.reshape(e_item, (1, -1)) if single else e_item
    cos = T.cosine_similarity_matrix(mat, centers)
    out = T.concat([mat, cos], axis=1)
    return out[0, :] if single else out


def item_cosine_channel(e_item: Tensor, centers: Tensor) -> Tensor:
    mat = T.reshape(e_item, (1, -1)) if e_item.ndim == 1 else e_item
    return T.cosine_similarity_matrix(mat, centers)


def score_user_item(e_user: Tensor, item_rep: Tensor) -> Tensor:
    """Inner product of the dual-channel vectors; equals semantic-match plus
    target-aware-match by construction."""
    if e_user.shape[-1] != item_rep.shape[-1]:
        raise ValueError(f"dim mismatch: user {e_user.shape} vs item {item_rep.shape}")
    if item_rep.ndim == 2:
        return T.matmul(item_rep, e_user)
    return T.dot(e_user, item_rep)


def bag_value_heads(value_reps: Tensor) -> Tensor:
    """Aggregate the v value-token representations by elementwise mean."""
    if value_reps.ndim != 2 or value_reps.shape[0] < 1:
        raise ValueError(f"need (v, d) value reps, got {value_reps.shape}")
    return T.tmean(value_reps, axis=0)


def mtp_generate(score_fn, level_sizes, heads, beam_width: int, n: int):
    """Beam-search the level codebooks per head; return top-n unique paths.

    ``score_fn(head, prefix, level)`` gives the level's code scores given
    the already-chosen prefix. A path's score is the sum of its per-level
    scores. Ties break by lexicographically smaller path.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    total_paths = int(np.prod(level_sizes))
    if n > total_paths:
        raise ValueError(f"n={n} exceeds {total_paths} expressible paths")

    pool: dict[tuple, tuple] = {}  # path -> (score, head)
    for head in heads:
        beams = [((), 0.0)]
        for level, vocab in enumerate(level_sizes):
            expanded = []
            for prefix, base in beams:
                scores = np.asarray(score_fn(head, prefix, level), dtype=np.float64)
                if scores.shape != (vocab,):
                    raise ValueError(f"score_fn returned {scores.shape}, expected ({vocab},)")
                top = np.argsort(-scores, kind="stable")[:beam_width]
                expanded.extend((prefix + (int(c),), base + float(scores[c])) for c in top)
            expanded.sort(key=lambda e: (-e[1], e[0]))
            if level < len(level_sizes) - 1:
                beams = expanded[:beam_width]
            else:
                beams = expanded  # keep the full final expansion as dedup fallback
        for path, score in beams:
            if path not in pool or score > pool[path][0]:
                pool[path] = (score, head)

    ranked = sorted(pool.items(), key=lambda e: (-e[1][0], e[0]))
    if len(ranked) < n:
        raise ValueError(f"beam width {beam_width} yielded only {len(ranked)} unique paths, need {n}")
    return [(path, score, head) for path, (score, head) in ranked[:n]]
