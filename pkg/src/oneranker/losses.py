"""The triadic objective: generation NLL, pairwise ranking, distribution
consistency with a detached teacher."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

# bumped when bpr_rank_loss sees a candidate set with no ordered pair
DEGENERATE_PAIR_EVENTS = 0


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    tau: float = 2.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be > 0, got {self.tau}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss coefficients must be nonnegative")
        if self.alpha == self.beta == self.gamma == 0:
            raise ValueError("at least one loss coefficient must be positive")


def mtp_loss(head_level_logits, head_targets) -> Tensor:
    """Negative log-likelihood summed over heads and semantic-id levels.

    ``head_level_logits[h][l]`` scores level l's full code vocabulary for
    head h (teacher-forced on the head's target prefix); ``head_targets``
    gives each head's code path.
    """
    if len(head_level_logits) != len(head_targets):
        raise ValueError("one target path per head required")
    total = None
    for logits_per_level, path in zip(head_level_logits, head_targets):
        if len(logits_per_level) != len(path):
            raise ValueError("one logit vector per level required")
        for logits, code in zip(logits_per_level, path):
            vocab = logits.shape[0]
            if not 0 <= code < vocab:
                raise ValueError(f"target code {code} outside vocab {vocab}")
            nll = T.neg(T.log_softmax(logits)[code])
            total = nll if total is None else T.add(total, nll)
    if total is None:
        raise ValueError("no heads given")
    return total


def bpr_rank_loss(scores: Tensor, labels) -> Tensor:
    """Mean pairwise logistic loss over all (i, j) with label_i > label_j."""
    global DEGENERATE_PAIR_EVENTS
    labels = np.asarray(labels, dtype=np.float64)
    n = labels.shape[0]
    if scores.shape != (n,):
        raise ValueError(f"scores shape {scores.shape} != labels ({n},)")
    if n < 2:
        raise ValueError("pairwise loss requires >= 2 candidates")
    hi, lo = np.nonzero(labels[:, None] > labels[None, :])
    if len(hi) == 0:
        DEGENERATE_PAIR_EVENTS += 1
        return Tensor(np.zeros(()), dtype=scores.values.dtype)
    diffs = T.sub(scores[hi], scores[lo])
    return T.tmean(T.softplus(T.neg(diffs)))


def dc_loss(ranker_scores, generator_logits: Tensor, tau: float) -> Tensor:
    """Cross-entropy from the tempered ranker distribution (teacher, no
    gradient) to the generator's candidate distribution."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    s = ranker_scores.values if isinstance(ranker_scores, Tensor) else np.asarray(ranker_scores)
    s = np.asarray(s, dtype=np.float64)
    n = s.shape[0]
    if n < 2:
        raise ValueError("consistency loss requires >= 2 candidates")
    if generator_logits.shape != (n,):
        raise ValueError(f"generator logits shape {generator_logits.shape} != ({n},)")
    z = s / tau
    z = z - z.max()
    p_target = np.exp(z) / np.exp(z).sum()
    weights = Tensor(p_target, dtype=generator_logits.values.dtype)
    return T.neg(T.tsum(T.mul(weights, T.log_softmax(generator_logits))))


def total_loss(mtp: Tensor | None, rank: Tensor | None, dc: Tensor | None,
               weights: LossWeights) -> Tensor:
    parts = []
    for term, coef in ((mtp, weights.alpha), (rank, weights.beta), (dc, weights.gamma)):
        if term is not None and coef != 0.0:
            parts.append(T.mul(term, coef))
    if not parts:
        raise ValueError("no active loss components")
    out = parts[0]
    for p in parts[1:]:
        out = T.add(out, p)
    return out
