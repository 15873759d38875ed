"""Step-2 mechanics: hetero mask rules, per-layer isolation, dual channels,
scoring identity, beam generation."""

import itertools

import numpy as np
import pytest

from oneranker import tensor as T
from oneranker import taskaware as TA
from oneranker.taskaware import (
    FakeItemBank,
    HeteroDecoder,
    TargetChannelMLP,
    TaskTokenBank,
    bag_value_heads,
    build_hetero_mask,
    enhance_item,
    hetero_decoder_forward,
    mtp_generate,
    score_user_item,
    target_channel,
    user_representation,
)
from oneranker.tensor import Tensor, using_dtype


class TestHeteroMask:
    def test_two_by_two_rule_table(self):
        want = np.array([
            [1, 0, 1, 1],
            [1, 1, 1, 1],
            [1, 1, 1, 0],
            [1, 1, 0, 1],
        ], dtype=bool)
        np.testing.assert_array_equal(build_hetero_mask(2, 2).allowed, want)

    def test_no_fakes_is_pure_causal(self):
        got = build_hetero_mask(3, 0).allowed
        np.testing.assert_array_equal(got, np.tril(np.ones((3, 3), dtype=bool)))

    @pytest.mark.parametrize("m,k", [(1, 1), (3, 4), (6, 8)])
    def test_fake_rows_see_tasks_plus_self(self, m, k):
        allowed = build_hetero_mask(m, k).allowed
        assert (allowed[m:].sum(axis=1) == m + 1).all()

    def test_fully_visible_variant(self):
        assert build_hetero_mask(2, 3, fully_visible=True).allowed.all()


def setup_step2(seed=0, dim=8, m=3, v=1, k=4, layers=1, seq=6):
    rng = np.random.default_rng(seed)
    bank = TaskTokenBank(interest=m, value=v, dim=dim, rng=rng)
    fakes = FakeItemBank(rng.standard_normal((k, dim)))
    decoder = HeteroDecoder(dim=dim, heads=2, layers=layers, ffn_dim=16, rng=rng)
    h1 = Tensor(rng.standard_normal((seq, dim)))
    return bank, fakes, decoder, h1


class TestHeteroDecoder:
    def test_output_shapes(self):
        bank, fakes, decoder, h1 = setup_step2(layers=2)
        task_reps, fake_reps = hetero_decoder_forward(bank, fakes, h1, decoder)
        assert task_reps.shape == (4, 8)
        assert fake_reps.shape == (4, 8)

    def test_fake_mutual_invisibility_single_layer(self):
        bank, fakes, decoder, h1 = setup_step2(layers=1)
        _, base = hetero_decoder_forward(bank, fakes, h1, decoder)
        for j in range(fakes.k):
            centers = fakes.centers.values.copy()
            centers[j] += 3.0
            perturbed = FakeItemBank(centers)
            _, out = hetero_decoder_forward(bank, perturbed, h1, decoder)
            for i in range(fakes.k):
                if i != j:
                    assert (out.values[i] == base.values[i]).all()

    def test_task_causality_single_layer(self):
        bank, fakes, decoder, h1 = setup_step2(layers=1)
        base, _ = hetero_decoder_forward(bank, fakes, h1, decoder)
        for j in range(bank.total):
            tokens = bank.tokens.values.copy()
            tokens[j] += 3.0
            bumped = TaskTokenBank(bank.m, bank.v, tokens.shape[1], np.random.default_rng(0))
            bumped.tokens = Tensor(tokens, requires_grad=True)
            out, _ = hetero_decoder_forward(bumped, fakes, h1, decoder)
            for i in range(j):
                assert (out.values[i] == base.values[i]).all()

    def test_dim_mismatch_rejected(self):
        bank, fakes, decoder, _ = setup_step2()
        bad_h1 = Tensor(np.zeros((5, 12)))
        with pytest.raises(ValueError, match="dim"):
            hetero_decoder_forward(bank, fakes, bad_h1, decoder)


class _StubMLP:
    def __init__(self, rows):
        self.rows = np.asarray(rows, dtype=np.float64)

    def pair_scores(self, task_rep, fake_reps):
        return Tensor(self.rows)


class TestTargetChannel:
    def test_sum_pooling(self):
        mlp = _StubMLP([[0.1, 0.2], [0.3, -0.2]])
        out = target_channel(Tensor(np.zeros(4)), Tensor(np.zeros((2, 4))), mlp)
        np.testing.assert_allclose(out.values, [0.4, 0.0], atol=1e-12)

    def test_zero_final_layer_gives_k_times_bias(self):
        rng = np.random.default_rng(1)
        k, dim = 3, 6
        mlp = TargetChannelMLP(dim=dim, hidden=8, k=k, rng=rng)
        mlp.w2 = Tensor(np.zeros((8, k)), requires_grad=True)
        mlp.b2 = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
        out = target_channel(Tensor(rng.standard_normal(dim)),
                             Tensor(rng.standard_normal((k, dim))), mlp)
        np.testing.assert_allclose(out.values, k * mlp.b2.values, rtol=1e-6)

    def test_fake_order_permutation_invariant(self):
        rng = np.random.default_rng(2)
        mlp = TargetChannelMLP(dim=5, hidden=7, k=4, rng=rng)
        task = Tensor(rng.standard_normal(5))
        fakes = rng.standard_normal((4, 5))
        base = target_channel(task, Tensor(fakes), mlp).values
        perm = target_channel(task, Tensor(fakes[[2, 0, 3, 1]]), mlp).values
        np.testing.assert_allclose(perm, base, atol=1e-6)


class TestUserRepresentation:
    def test_concat(self):
        out = user_representation(Tensor([1.0, 2.0]), Tensor([3.0]))
        np.testing.assert_array_equal(out.values, [1.0, 2.0, 3.0])

    def test_dims_and_slicing(self):
        rng = np.random.default_rng(3)
        with using_dtype(np.float64):
            e_task = rng.standard_normal(6)
            s_target = rng.standard_normal(4)
            out = user_representation(Tensor(e_task), Tensor(s_target))
        assert out.shape == (10,)
        np.testing.assert_array_equal(out.values[:6], e_task)
        np.testing.assert_array_equal(out.values[6:], s_target)


class TestEnhanceItem:
    def test_self_similarity(self):
        rng = np.random.default_rng(4)
        centers = rng.standard_normal((3, 5))
        out = enhance_item(Tensor(centers[1].copy()), Tensor(centers))
        assert out.values[5 + 1] == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_center(self):
        centers = Tensor(np.array([[0.0, 1.0], [1.0, 0.0]]))
        out = enhance_item(Tensor([2.0, 0.0]), centers)
        np.testing.assert_allclose(out.values, [2.0, 0.0, 0.0, 1.0], atol=1e-7)

    def test_scale_invariant_cosines(self):
        rng = np.random.default_rng(5)
        with using_dtype(np.float64):
            centers = Tensor(rng.standard_normal((4, 6)))
            e = rng.standard_normal(6)
            a = enhance_item(Tensor(e), centers).values[6:]
            b = enhance_item(Tensor(e * 5.0), centers).values[6:]
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestScoreUserItem:
    def test_worked_example(self):
        with using_dtype(np.float64):
            u = user_representation(Tensor([1.0, 0.0]), Tensor([0.2, 0.1]))
            item = T.concat([Tensor([0.5, -0.5]), Tensor([1.0, -1.0])], axis=0)
            assert score_user_item(u, item).item() == pytest.approx(0.6, abs=1e-12)

    def test_zero_target_channel_reduces_to_semantic_dot(self):
        rng = np.random.default_rng(6)
        e_task = rng.standard_normal(8)
        e_item = rng.standard_normal(8)
        c = rng.standard_normal(3)
        u = user_representation(Tensor(e_task), Tensor(np.zeros(3)))
        item = T.concat([Tensor(e_item), Tensor(c)], axis=0)
        assert score_user_item(u, item).item() == pytest.approx(float(e_task @ e_item), rel=1e-5)

    def test_decomposition_identity_64bit(self):
        rng = np.random.default_rng(7)
        with using_dtype(np.float64):
            for _ in range(200):
                d, k = int(rng.integers(2, 10)), int(rng.integers(1, 6))
                e_task, e_item = rng.standard_normal(d), rng.standard_normal(d)
                s, c = rng.standard_normal(k), rng.standard_normal(k)
                u = user_representation(Tensor(e_task), Tensor(s))
                rep = T.concat([Tensor(e_item), Tensor(c)], axis=0)
                whole = score_user_item(u, rep).item()
                parts = float(e_task @ e_item) + float(s @ c)
                assert abs(whole - parts) < 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            score_user_item(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


class TestBagValueHeads:
    def test_single_rep_identity(self):
        rep = np.array([[1.0, -2.0, 3.0]])
        np.testing.assert_array_equal(bag_value_heads(Tensor(rep)).values, rep[0])

    def test_equal_reps(self):
        rep = np.array([1.0, 2.0])
        out = bag_value_heads(Tensor(np.stack([rep, rep])))
        np.testing.assert_allclose(out.values, rep)

    def test_mean(self):
        out = bag_value_heads(Tensor([[0.0, 2.0], [2.0, 0.0]]))
        np.testing.assert_allclose(out.values, [1.0, 1.0])


class TestMtpGenerate:
    def test_single_level_argmax(self):
        scores = np.array([0.1, 0.9, -0.3, 0.4])
        got = mtp_generate(lambda h, p, l: scores, [4], heads=[0], beam_width=1, n=1)
        assert got[0][0] == (1,)
        assert got[0][1] == pytest.approx(0.9)

    def test_paths_pairwise_distinct(self):
        rng = np.random.default_rng(8)
        table = {h: rng.standard_normal((2, 5)) for h in range(3)}
        got = mtp_generate(lambda h, p, l: table[h][l], [5, 5],
                           heads=[0, 1, 2], beam_width=3, n=6)
        paths = [p for p, _, _ in got]
        assert len(set(paths)) == len(paths) == 6

    def test_wide_beam_matches_exhaustive_search(self):
        rng = np.random.default_rng(9)
        # prefix-dependent scores so conditioning matters
        weights = {h: rng.standard_normal((4, 4, 4)) for h in range(2)}

        def score_fn(h, prefix, level):
            if level == 0:
                return weights[h][0, 0]
            return weights[h][1 + prefix[0] % 3, prefix[-1]]

        got = mtp_generate(score_fn, [4, 4], heads=[0, 1], beam_width=16, n=8)

        exhaustive = {}
        for h in range(2):
            for path in itertools.product(range(4), repeat=2):
                s = float(score_fn(h, (), 0)[path[0]]) + float(score_fn(h, path[:1], 1)[path[1]])
                if path not in exhaustive or s > exhaustive[path]:
                    exhaustive[path] = s
        want = sorted(exhaustive.items(), key=lambda e: (-e[1], e[0]))[:8]
        assert [(p, pytest.approx(s)) for p, s, _ in got] == [(p, pytest.approx(s)) for p, s in want]

    def test_too_many_paths_requested(self):
        with pytest.raises(ValueError, match="expressible"):
            mtp_generate(lambda h, p, l: np.zeros(2), [2], heads=[0], beam_width=2, n=3)
