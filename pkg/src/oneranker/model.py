"""Full pipeline assembly: backbone -> task-aware refinement -> ranking,
with the joint loss evaluated per training instance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone
from .blocks import init_param
from .data import DataConfig, TrainingInstance, rng_for, stream_from_instance
from .losses import LossWeights, bpr_rank_loss, dc_loss, mtp_loss, total_loss
from .ranker import RDecoder, fuse_kv
from .taskaware import (
    FakeItemBank,
    HeteroDecoder,
    TargetChannelMLP,
    TaskTokenBank,
    bag_value_heads,
    enhance_item,
    hetero_decoder_forward,
    item_cosine_channel,
    mtp_generate,
    score_user_item,
    user_representation,
)
from .tensor import Tensor

_TAG_BACKBONE, _TAG_TASKS, _TAG_FAKES, _TAG_HETERO, _TAG_RANKER, _TAG_CODES = range(201, 207)


@dataclass
class ModelConfig:
    dim: int = 32
    heads: int = 2
    backbone_layers: int = 2
    hetero_layers: int = 2
    interest_tokens: int = 4
    value_tokens: int = 2
    fake_items: int = 8
    ffn_mult: int = 2
    target_hidden: int = 32
    max_len: int = 160
    beam_width: int = 8
    freeze_fake_items: bool = False
    # ablation toggles
    cross_attention_first: bool = True   # False: self-attention runs first in Step 2
    hetero_mask: bool = True             # False: fully visible Step-2 self-attention
    use_ranker: bool = True              # False: rank by the Step-2 value head
    ranker_kv_s2: bool = True            # False: ranker KV carries Step-1 rows only
    use_target_channel: bool = True      # False: no fake items, no cosine channel
    multi_task_heads: bool = True        # False: one shared head, no value tokens
    level_vocab_sizes: list = field(default_factory=list)  # resolved from the manifest


class OneRankerModel:
    def __init__(self, cfg: ModelConfig, data_cfg: DataConfig, seed: int):
        if not cfg.level_vocab_sizes:
            raise ValueError("model config needs resolved level_vocab_sizes")
        self.cfg = cfg
        d = cfg.dim
        ffn = cfg.ffn_mult * d
        vocabs = {"user": data_cfg.num_users, "context": data_cfg.context_vocab,
                  "content": cfg.level_vocab_sizes[0], "item": data_cfg.num_items}
        self.backbone = Backbone(d, cfg.heads, cfg.backbone_layers, ffn, vocabs,
                                 cfg.max_len, rng_for(seed, _TAG_BACKBONE))
        m = cfg.interest_tokens if cfg.multi_task_heads else 1
        v = cfg.value_tokens if cfg.multi_task_heads else 0
        self.tasks = TaskTokenBank(m, v, d, rng_for(seed, _TAG_TASKS))
        if cfg.use_target_channel:
            self.fakes = FakeItemBank.from_kmeans(
                self.backbone.embedding.item_table().values, cfg.fake_items,
                seed=int(rng_for(seed, _TAG_FAKES).integers(2**31)),
                trainable=not cfg.freeze_fake_items)
            self.target_mlp = TargetChannelMLP(d, cfg.target_hidden, cfg.fake_items,
                                               rng_for(seed, _TAG_FAKES))
        else:
            self.fakes = None
            self.target_mlp = None
        self.hetero = HeteroDecoder(d, cfg.heads, cfg.hetero_layers, ffn,
                                    rng_for(seed, _TAG_HETERO),
                                    cross_first=cfg.cross_attention_first)
        crng = rng_for(seed, _TAG_CODES)
        self.codebooks = [init_param(crng, size, d, std=0.5)
                          for size in cfg.level_vocab_sizes]
        if cfg.use_ranker:
            k_eff = cfg.fake_items if cfg.use_target_channel else 0
            self.rdecoder = RDecoder(d, cfg.heads, ffn, k_eff, rng_for(seed, _TAG_RANKER))
        else:
            self.rdecoder = None

    # ------------------------------------------------------------------
    # forward pieces
    # ------------------------------------------------------------------

    def step1(self, inst: TrainingInstance) -> Tensor:
        return self.backbone.encode_stream(stream_from_instance(inst))

    def step2(self, h1: Tensor):
        return hetero_decoder_forward(self.tasks, self.fakes, h1, self.hetero,
                                      fully_visible=not self.cfg.hetero_mask)

    def head_reps(self, task_reps: Tensor):
        """Per-head semantic vectors: m interest reps plus the bagged value rep."""
        interest = [task_reps[i, :] for i in range(self.tasks.m)]
        value = bag_value_heads(task_reps[self.tasks.m:, :]) if self.tasks.v else None
        return interest, value

    def user_vector(self, head_rep: Tensor, fake_reps: Tensor | None,
                    prefix: tuple = ()) -> Tensor:
        """Dual-channel user vector, conditioned on already-chosen prefix codes."""
        cond = head_rep
        for level, code in enumerate(prefix):
            cond = T.add(cond, self.codebooks[level][int(code), :])
        if self.fakes is None:
            return cond
        s_target = T.tsum(self.target_mlp.pair_scores(cond, fake_reps), axis=0)
        return user_representation(cond, s_target)

    def enhanced_codebooks(self):
        centers = self.fakes.centers if self.fakes is not None else None
        return [enhance_item(cb, centers) for cb in self.codebooks]

    def enhanced_items(self, item_ids) -> tuple:
        """(enhanced reps, base embeddings, cosine channel) for a candidate set."""
        embs = T.embedding(self.backbone.embedding.item_table(), np.asarray(item_ids))
        if self.fakes is None:
            return embs, embs, None
        cos = item_cosine_channel(embs, self.fakes.centers)
        return T.concat([embs, cos], axis=1), embs, cos

    def candidate_value_logits(self, head_rep: Tensor, fake_reps: Tensor | None,
                               enhanced: Tensor) -> Tensor:
        """Step-2 scores of candidate items for the given head (value head in
        the full model)."""
        return score_user_item(self.user_vector(head_rep, fake_reps), enhanced)

    def ranking_head(self, interest, value):
        return value if value is not None else interest[0]

    def ranker_scores(self, h1: Tensor, task_reps: Tensor, fake_reps: Tensor | None,
                      cand_embs: Tensor, cos_channel: Tensor | None) -> Tensor:
        if self.rdecoder is None:
            raise ValueError("this configuration has no ranking decoder")
        if self.cfg.ranker_kv_s2:
            kv = fuse_kv(h1, task_reps, fake_reps)
        else:
            kv = fuse_kv(h1)
        inputs = self.rdecoder.candidate_inputs(cand_embs, cos_channel)
        return self.rdecoder.score(inputs, kv)

    # ------------------------------------------------------------------
    # losses
    # ------------------------------------------------------------------

    def losses_for_instance(self, inst: TrainingInstance, weights: LossWeights,
                            value_target: int | None):
        """Joint loss for one instance.

        ``value_target`` indexes the candidate the value head predicts
        (drawn value-weighted by the caller); None skips the value-head term.
        Returns (total, components dict).
        """
        h1 = self.step1(inst)
        task_reps, fake_reps = self.step2(h1)
        interest, value = self.head_reps(task_reps)
        enhanced_cbs = self.enhanced_codebooks()

        head_logits, head_paths = [], []
        for rep in interest:
            head_logits.append(self._level_logits(rep, fake_reps, inst.target_sid, enhanced_cbs))
            head_paths.append(inst.target_sid)
        if value is not None and value_target is not None:
            vt_sid = inst.candidates[value_target].sid
            head_logits.append(self._level_logits(value, fake_reps, vt_sid, enhanced_cbs))
            head_paths.append(vt_sid)
        l_mtp = mtp_loss(head_logits, head_paths)

        l_rank = l_dc = None
        if self.rdecoder is not None and (weights.beta > 0 or weights.gamma > 0):
            cand_ids = [c.item for c in inst.candidates]
            enhanced, cand_embs, cos = self.enhanced_items(cand_ids)
            scores = self.ranker_scores(h1, task_reps, fake_reps, cand_embs, cos)
            if weights.beta > 0:
                l_rank = bpr_rank_loss(scores, [c.ecpm for c in inst.candidates])
            if weights.gamma > 0:
                gen_logits = self.candidate_value_logits(
                    self.ranking_head(interest, value), fake_reps, enhanced)
                l_dc = dc_loss(scores.detach(), gen_logits, weights.tau)

        total = total_loss(l_mtp, l_rank, l_dc, weights)
        comps = {"loss_mtp": l_mtp.item(),
                 "loss_rank": l_rank.item() if l_rank is not None else 0.0,
                 "loss_dc": l_dc.item() if l_dc is not None else 0.0,
                 "loss_total": total.item()}
        return total, comps

    def _level_logits(self, head_rep, fake_reps, path, enhanced_cbs):
        """Teacher-forced per-level code logits for one head."""
        out = []
        for level in range(len(self.codebooks)):
            e_user = self.user_vector(head_rep, fake_reps, tuple(path[:level]))
            out.append(score_user_item(e_user, enhanced_cbs[level]))
        return out

    # ------------------------------------------------------------------
    # inference
    # ------------------------------------------------------------------

    def score_candidates(self, inst: TrainingInstance) -> np.ndarray:
        """Final ranking scores: Step 3 when present, else Step-2 value scores."""
        with T.no_grad():
            if self.rdecoder is None:
                return self.generation_scores(inst)
            h1 = self.step1(inst)
            task_reps, fake_reps = self.step2(h1)
            _, cand_embs, cos = self.enhanced_items([c.item for c in inst.candidates])
            return self.ranker_scores(h1, task_reps, fake_reps, cand_embs, cos).values.copy()

    def generation_scores(self, inst: TrainingInstance) -> np.ndarray:
        """Step-2 value-head scores of the instance's candidates."""
        with T.no_grad():
            h1 = self.step1(inst)
            task_reps, fake_reps = self.step2(h1)
            interest, value = self.head_reps(task_reps)
            enhanced, _, _ = self.enhanced_items([c.item for c in inst.candidates])
            logits = self.candidate_value_logits(self.ranking_head(interest, value),
                                                 fake_reps, enhanced)
            return logits.values.copy()

    def both_stage_scores(self, inst: TrainingInstance):
        """(step2 value scores, step3 ranker scores) for consistency analysis."""
        with T.no_grad():
            if self.rdecoder is None:
                raise ValueError("consistency analysis needs the ranking decoder")
            h1 = self.step1(inst)
            task_reps, fake_reps = self.step2(h1)
            interest, value = self.head_reps(task_reps)
            enhanced, cand_embs, cos = self.enhanced_items([c.item for c in inst.candidates])
            s2 = self.candidate_value_logits(self.ranking_head(interest, value),
                                             fake_reps, enhanced).values.copy()
            s3 = self.ranker_scores(h1, task_reps, fake_reps, cand_embs, cos).values.copy()
            return s2, s3

    def generate_paths(self, inst: TrainingInstance, n: int, beam_width: int | None = None):
        """Multi-path semantic-id generation from the interest heads."""
        beam = beam_width or self.cfg.beam_width
        with T.no_grad():
            h1 = self.step1(inst)
            task_reps, fake_reps = self.step2(h1)
            interest, _ = self.head_reps(task_reps)
            enhanced_cbs = self.enhanced_codebooks()

            def score_fn(head, prefix, level):
                e_user = self.user_vector(interest[head], fake_reps, prefix)
                return score_user_item(e_user, enhanced_cbs[level]).values

            return mtp_generate(score_fn, [cb.shape[0] for cb in self.codebooks],
                                heads=range(len(interest)), beam_width=beam, n=n)

    # ------------------------------------------------------------------

    def params(self) -> dict:
        out = self.backbone.params()
        out.update(self.tasks.params())
        if self.fakes is not None:
            out.update(self.fakes.params())
            out.update(self.target_mlp.params())
        out.update(self.hetero.params())
        for i, cb in enumerate(self.codebooks):
            out[f"codebook.l{i}"] = cb
        if self.rdecoder is not None:
            out.update(self.rdecoder.params())
        return out
