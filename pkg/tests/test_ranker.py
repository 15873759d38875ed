"""Step-3 R-Decoder: mask rules, score independence, KV pass-through."""

import numpy as np
import pytest

from oneranker import tensor as T
from oneranker.ranker import RDecoder, build_rank_mask, fuse_kv
from oneranker.tensor import Tensor


class TestRankMask:
    def test_two_candidates(self):
        want = np.array([[1, 0, 0], [1, 1, 0], [1, 0, 1]], dtype=bool)
        np.testing.assert_array_equal(build_rank_mask(2).allowed, want)

    @pytest.mark.parametrize("n", [1, 2, 5, 30])
    def test_candidate_rows_have_two_keys(self, n):
        allowed = build_rank_mask(n).allowed
        assert (allowed[1:].sum(axis=1) == 2).all()

    def test_single_candidate(self):
        want = np.array([[1, 0], [1, 1]], dtype=bool)
        np.testing.assert_array_equal(build_rank_mask(1).allowed, want)


class TestFuseKV:
    def test_lengths_add(self):
        rng = np.random.default_rng(0)
        h1 = Tensor(rng.standard_normal((64, 8)))
        tasks = Tensor(rng.standard_normal((8, 8)))
        fakes = Tensor(rng.standard_normal((8, 8)))
        assert fuse_kv(h1, tasks, fakes).shape == (80, 8)

    def test_without_step2_equals_h1(self):
        h1 = Tensor(np.arange(12).reshape(3, 4).astype(np.float32))
        out = fuse_kv(h1)
        np.testing.assert_array_equal(out.values, h1.values)

    def test_pass_through_rows_exact(self):
        rng = np.random.default_rng(1)
        h1 = Tensor(rng.standard_normal((10, 6)))
        tasks = Tensor(rng.standard_normal((3, 6)))
        out = fuse_kv(h1, tasks)
        assert (out.values[:10] == h1.values).all()
        assert (out.values[10:] == tasks.values).all()

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            fuse_kv(Tensor(np.zeros((4, 6))), Tensor(np.zeros((2, 5))))


def setup_ranker(seed=0, dim=8, k=3, n=5, kv_len=9):
    rng = np.random.default_rng(seed)
    rd = RDecoder(dim=dim, heads=2, ffn_dim=16, k=k, rng=rng)
    kv = Tensor(rng.standard_normal((kv_len, dim)))
    cand = rng.standard_normal((n, dim))
    cos = rng.uniform(-1, 1, size=(n, k))
    return rd, kv, cand, cos


class TestRDecoderScore:
    def test_candidate_independence(self):
        rd, kv, cand, cos = setup_ranker()
        base = rd.score(rd.candidate_inputs(Tensor(cand), Tensor(cos)), kv).values
        for j in range(len(cand)):
            pert = cand.copy()
            pert[j] += 5.0
            out = rd.score(rd.candidate_inputs(Tensor(pert), Tensor(cos)), kv).values
            for i in range(len(cand)):
                if i != j:
                    assert out[i] == base[i]

    def test_permutation_equivariance(self):
        rd, kv, cand, cos = setup_ranker(seed=2)
        base = rd.score(rd.candidate_inputs(Tensor(cand), Tensor(cos)), kv).values
        perm = np.array([3, 0, 4, 1, 2])
        out = rd.score(rd.candidate_inputs(Tensor(cand[perm]), Tensor(cos[perm])), kv).values
        np.testing.assert_array_equal(out, base[perm])

    def test_duplicate_candidates_equal_scores(self):
        rd, kv, cand, cos = setup_ranker(seed=3)
        cand[1] = cand[0]
        cos[1] = cos[0]
        out = rd.score(rd.candidate_inputs(Tensor(cand), Tensor(cos)), kv).values
        assert out[0] == out[1]

    def test_empty_candidate_set_rejected(self):
        rd, kv, _, _ = setup_ranker()
        with pytest.raises(ValueError, match="empty|one candidate"):
            rd.score(Tensor(np.zeros((0, 8))), kv)

    def test_scores_depend_on_step2_kv_rows(self):
        rng = np.random.default_rng(4)
        rd, _, cand, cos = setup_ranker(seed=4)
        h1 = Tensor(rng.standard_normal((6, 8)))
        s2 = Tensor(rng.standard_normal((4, 8)))
        with_s2 = rd.score(rd.candidate_inputs(Tensor(cand), Tensor(cos)),
                           fuse_kv(h1, s2)).values
        zeroed = rd.score(rd.candidate_inputs(Tensor(cand), Tensor(cos)),
                          fuse_kv(h1, Tensor(np.zeros((4, 8))))).values
        assert not np.array_equal(with_s2, zeroed)
