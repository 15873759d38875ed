"""Loss components against independent brute-force oracles."""

import math

import numpy as np
import pytest

from oneranker import losses as L
from oneranker import tensor as T
from oneranker.losses import LossWeights, bpr_rank_loss, dc_loss, mtp_loss, total_loss
from oneranker.tensor import Tensor, reverse_accumulate, using_dtype


class TestLossWeights:
    def test_valid(self):
        LossWeights(1.0, 1.0, 0.5, 2.0)

    def test_bad_temperature(self):
        with pytest.raises(ValueError, match="temperature"):
            LossWeights(tau=0.0)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            LossWeights(alpha=0.0, beta=0.0, gamma=0.0)

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            LossWeights(alpha=-1.0)


def nll_oracle(logits: np.ndarray, target: int) -> float:
    """Independent log-sum-exp negative log-likelihood."""
    m = logits.max()
    return float(math.log(np.exp(logits - m).sum()) + m - logits[target])


class TestMtpLoss:
    def test_vocab_of_one_contributes_zero(self):
        out = mtp_loss([[Tensor([2.5])]], [(0,)])
        assert out.item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_two_level_loss(self):
        logits = [Tensor([0.3, 0.3]), Tensor([-1.0, -1.0])]
        out = mtp_loss([logits], [(0, 1)])
        assert out.item() == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        with using_dtype(np.float64):
            for _ in range(1000):
                heads = int(rng.integers(1, 4))
                levels = int(rng.integers(1, 4))
                logits, targets, want = [], [], 0.0
                for _ in range(heads):
                    per_level, path = [], []
                    for _ in range(levels):
                        vocab = int(rng.integers(2, 9))
                        raw = rng.standard_normal(vocab) * 3
                        gt = int(rng.integers(vocab))
                        per_level.append(Tensor(raw))
                        path.append(gt)
                        want += nll_oracle(raw, gt)
                    logits.append(per_level)
                    targets.append(tuple(path))
                got = mtp_loss(logits, targets).item()
                assert abs(got - want) < 1e-9

    def test_target_outside_vocab(self):
        with pytest.raises(ValueError, match="outside vocab"):
            mtp_loss([[Tensor([1.0, 2.0])]], [(2,)])


class TestBprRankLoss:
    def test_equal_scores_give_log_two(self):
        out = bpr_rank_loss(Tensor([0.7, 0.7]), [2.0, 1.0])
        assert out.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_saturated_pair(self):
        out = bpr_rank_loss(Tensor([20.0, 0.0]), [5.0, 1.0])
        assert out.item() < 1e-8

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        with using_dtype(np.float64):
            for _ in range(1000):
                n = 10
                scores = rng.standard_normal(n) * 2
                labels = rng.choice([0.5, 1.0, 2.0, 3.0], size=n)
                pair_losses = []
                for i in range(n):
                    for j in range(n):
                        if labels[i] > labels[j]:
                            pair_losses.append(-math.log(1.0 / (1.0 + math.exp(-(scores[i] - scores[j])))))
                if not pair_losses:
                    continue
                got = bpr_rank_loss(Tensor(scores), labels).item()
                assert abs(got - float(np.mean(pair_losses))) < 1e-9

    def test_no_valid_pair_returns_zero_and_counts(self):
        before = L.DEGENERATE_PAIR_EVENTS
        out = bpr_rank_loss(Tensor([1.0, 2.0, 3.0]), [4.0, 4.0, 4.0])
        assert out.item() == 0.0
        assert L.DEGENERATE_PAIR_EVENTS == before + 1

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        with using_dtype(np.float64):
            scores = rng.standard_normal(8)
            labels = rng.random(8)
            a = bpr_rank_loss(Tensor(scores), labels).item()
            b = bpr_rank_loss(Tensor(scores + 42.0), labels).item()
        assert a == pytest.approx(b, abs=1e-9)

    def test_too_few_candidates(self):
        with pytest.raises(ValueError, match=">= 2"):
            bpr_rank_loss(Tensor([1.0]), [1.0])


class TestDcLoss:
    def test_uniform_cross_entropy(self):
        out = dc_loss(Tensor([1.0] * 4), Tensor([0.0] * 4), tau=1.0)
        assert out.item() == pytest.approx(math.log(4), abs=1e-6)

    def test_closed_form_two_candidates(self):
        out = dc_loss(Tensor([math.log(3), 0.0]), Tensor([0.5, 0.5]), tau=1.0)
        assert out.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_high_temperature_limit(self):
        rng = np.random.default_rng(3)
        with using_dtype(np.float64):
            s = rng.standard_normal(6)
            logits = rng.standard_normal(6) * 0.5
            got = dc_loss(Tensor(s), Tensor(logits), tau=1e6).item()
            log_pi = logits - (np.log(np.exp(logits - logits.max()).sum()) + logits.max())
            want = -float(log_pi.mean())
        assert abs(got - want) < 1e-6

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        with using_dtype(np.float64):
            for _ in range(1000):
                n = int(rng.integers(2, 12))
                s = rng.standard_normal(n) * 3
                logits = rng.standard_normal(n) * 3
                tau = float(rng.uniform(0.5, 4.0))
                z = s / tau
                p = np.exp(z - z.max())
                p /= p.sum()
                lse = np.log(np.exp(logits - logits.max()).sum()) + logits.max()
                want = -float((p * (logits - lse)).sum())
                got = dc_loss(Tensor(s), Tensor(logits), tau=tau).item()
                assert abs(got - want) < 1e-9

    def test_teacher_detachment_zero_ranker_grads(self):
        with using_dtype(np.float64):
            ranker_w = Tensor(np.array([0.4, -0.2, 0.9]), requires_grad=True)
            scores = T.mul(ranker_w, 2.0)  # pretend ranker forward
            gen_logits = Tensor(np.array([0.1, 0.2, 0.3]), requires_grad=True)
            reverse_accumulate(dc_loss(scores, gen_logits, tau=2.0))
        assert (ranker_w.grad == 0.0).all()
        assert (gen_logits.grad != 0.0).any()

    def test_minimized_exactly_at_target_distribution(self):
        rng = np.random.default_rng(5)
        with using_dtype(np.float64):
            s = rng.standard_normal(5)
            tau = 1.7
            z = s / tau
            p = np.exp(z - z.max())
            p /= p.sum()
            logits = Tensor(np.log(p), requires_grad=True)
            reverse_accumulate(dc_loss(Tensor(s), logits, tau=tau))
        assert np.abs(logits.grad).max() < 1e-12

    def test_too_few_candidates(self):
        with pytest.raises(ValueError, match=">= 2"):
            dc_loss(Tensor([1.0]), Tensor([1.0]), tau=1.0)


class TestTotalLoss:
    def test_mtp_only(self):
        w = LossWeights(alpha=1.0, beta=0.0, gamma=0.0)
        out = total_loss(Tensor(2.0), Tensor(5.0), Tensor(7.0), w)
        assert out.item() == pytest.approx(2.0)

    def test_without_dc_variant(self):
        w = LossWeights(alpha=1.0, beta=1.0, gamma=0.0)
        out = total_loss(Tensor(2.0), Tensor(5.0), Tensor(7.0), w)
        assert out.item() == pytest.approx(7.0)

    def test_linearity(self):
        a = total_loss(Tensor(1.0), Tensor(2.0), Tensor(3.0), LossWeights(1.0, 1.0, 1.0)).item()
        b = total_loss(Tensor(1.0), Tensor(2.0), Tensor(3.0), LossWeights(2.0, 2.0, 2.0)).item()
        assert b == pytest.approx(2 * a)

    def test_nonnegative_on_real_components(self):
        rng = np.random.default_rng(6)
        logits = [[Tensor(rng.standard_normal(5))]]
        mtp = mtp_loss(logits, [(2,)])
        rank = bpr_rank_loss(Tensor(rng.standard_normal(4)), rng.random(4))
        dc = dc_loss(Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4)), tau=2.0)
        for part in (mtp, rank, dc):
            assert part.item() >= 0.0
            assert np.isfinite(part.item())
        assert total_loss(mtp, rank, dc, LossWeights()).item() >= 0.0
