"""BLEU fixtures: clipping, geometric mean, brevity penalty."""

import math

import pytest

from dynaprompt.bleu import bleu


class TestBleu:
    def test_identical_sentences_score_one(self):
        tokens = [5, 9, 9, 12, 3, 7]
        result = bleu(tokens, list(tokens))
        assert result.brevity_penalty == 1.0
        for n in range(4):
            assert result.precisions[n] == 1.0
            assert result.cumulative[n] == 1.0

    def test_disjoint_vocabularies_near_zero(self):
        result = bleu([1, 2, 3, 4], [10, 11, 12, 13])
        assert result.precisions == (0.0, 0.0, 0.0, 0.0)
        for score in result.cumulative:
            assert score < 1e-8  # epsilon-smoothed, not an exception

    def test_brevity_penalty_hand_case(self):
        # "the cat sat" vs "the cat sat down"
        cand = [101, 102, 103]
        ref = [101, 102, 103, 104]
        result = bleu(cand, ref)
        assert result.precisions[0] == 1.0
        assert result.cumulative[0] == pytest.approx(math.exp(1.0 - 4.0 / 3.0),
                                                     abs=1e-6)
        assert result.brevity_penalty == pytest.approx(0.7165313, abs=1e-6)

    def test_clipping_counts_repeated_ngrams(self):
        # candidate repeats a unigram more often than the reference holds it
        result = bleu([7, 7, 7, 7], [7, 8])
        assert result.precisions[0] == pytest.approx(1.0 / 4.0)

    def test_longer_candidate_has_no_brevity_penalty(self):
        result = bleu([1, 2, 3, 4, 5], [1, 2, 3])
        assert result.brevity_penalty == 1.0

    def test_precision_orders_above_length_are_zero(self):
        result = bleu([4, 5], [4, 5], n_max=4)
        assert result.precisions[:2] == (1.0, 1.0)
        assert result.precisions[2:] == (0.0, 0.0)

    def test_empty_candidate_all_zero(self):
        result = bleu([], [1, 2, 3])
        assert result.precisions == (0.0,) * 4
        assert result.cumulative == (0.0,) * 4
        assert result.brevity_penalty == 0.0

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError):
            bleu([1, 2], [])

    def test_cumulative_is_geometric_mean_with_bp(self):
        cand = [1, 2, 3, 9, 5, 6]
        ref = [1, 2, 3, 4, 5, 6, 7]
        result = bleu(cand, ref)
        bp = math.exp(1.0 - 7.0 / 6.0)
        assert result.brevity_penalty == pytest.approx(bp, abs=1e-12)
        for n in range(1, 5):
            logs = [math.log(max(p, 1e-9)) for p in result.precisions[:n]]
            expect = bp * math.exp(sum(logs) / n)
            assert result.cumulative[n - 1] == pytest.approx(expect, abs=1e-12)
