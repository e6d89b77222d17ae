import math

import numpy as np
import pytest

from ctcsqueeze.ctc import (
    FramePosteriors,
    LabelSequence,
    Vocabulary,
    ctc_collapse,
    ctc_log_likelihood,
    ctc_loss,
    ctc_loss_batch,
    ctc_loss_bruteforce,
    greedy_decode,
    logit_grad_from_log_prob_grad,
    min_alignable_frames,
)
from ctcsqueeze.errors import InvalidInputError, OracleSizeError

BLANK = 0
A, B = 1, 2


def random_posteriors(rng, T, C):
    logits = rng.normal(size=(T, C)) * 2.0
    return FramePosteriors.from_logits(logits)


def random_target(rng, L, C):
    # labels 1..C-1 (0 is blank)
    return [int(x) for x in rng.integers(1, C, size=L)]


class TestVocabulary:
    def test_from_labels_reserves_blank_at_zero(self):
        v = Vocabulary.from_labels(["a", "b"])
        assert v.blank_index == 0
        assert v.blank_symbol == "<blank>"
        assert v.size == 3
        assert v.index("b") == 2

    def test_duplicate_labels_rejected(self):
        with pytest.raises(InvalidInputError):
            Vocabulary(labels=("<blank>", "a", "a"))

    def test_blank_index_must_be_valid(self):
        with pytest.raises(InvalidInputError):
            Vocabulary(labels=("<blank>", "a"), blank_index=5)


class TestFramePosteriors:
    def test_rows_must_normalize(self):
        bad = np.log(np.array([[0.5, 0.2]]))
        with pytest.raises(InvalidInputError):
            FramePosteriors(bad)

    def test_nan_rejected(self):
        arr = np.log(np.full((2, 2), 0.5))
        arr[0, 0] = np.nan
        with pytest.raises(InvalidInputError):
            FramePosteriors(arr)

    def test_padded_rows_ignored_by_validation(self):
        arr = np.vstack([np.log(np.full((1, 2), 0.5)), np.full((1, 2), 7.0)])
        p = FramePosteriors(arr, length=1)
        assert p.length == 1


class TestCollapse:
    def test_merges_runs_and_drops_blanks(self):
        assert ctc_collapse([A, A, BLANK, B, B], BLANK).ids == (A, B)

    def test_all_blank(self):
        assert ctc_collapse([BLANK, BLANK, BLANK], BLANK).ids == ()

    def test_blank_separates_repeats(self):
        assert ctc_collapse([A, BLANK, A], BLANK).ids == (A, A)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(InvalidInputError):
            ctc_collapse([0, 3], BLANK, vocab_size=3)

    def test_monotone(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            T = int(rng.integers(0, 12))
            x = [int(i) for i in rng.integers(0, 4, size=T)]
            assert len(ctc_collapse(x, BLANK)) <= len(x)

    def test_idempotent_on_blank_free_input(self):
        # collapsing a blank-free sequence yields a fixed point; inputs with
        # blanks need not ([a, blank, a] -> [a, a] -> [a])
        rng = np.random.default_rng(1)
        for _ in range(200):
            T = int(rng.integers(0, 12))
            x = [int(i) for i in rng.integers(1, 4, size=T)]
            collapsed = ctc_collapse(x, BLANK)
            assert ctc_collapse(collapsed.ids, BLANK).ids == collapsed.ids


class TestGreedyDecode:
    def test_argmax_then_collapse(self):
        p = FramePosteriors.from_logits(np.array([[0.0, 3.0], [0.0, 3.0], [3.0, 0.0]]))
        frame_labels, collapsed = greedy_decode(p, BLANK)
        assert frame_labels == [1, 1, 0]
        assert collapsed.ids == (1,)

    def test_tie_breaks_to_lowest_index(self):
        p = FramePosteriors.from_logits(np.zeros((2, 3)))
        frame_labels, _ = greedy_decode(p, BLANK)
        assert frame_labels == [0, 0]

    def test_empty_input(self):
        p = FramePosteriors(np.zeros((0, 3)))
        frame_labels, collapsed = greedy_decode(p, BLANK)
        assert frame_labels == []
        assert collapsed.ids == ()


def posteriors_from_probs(rows):
    return FramePosteriors(np.log(np.asarray(rows, dtype=np.float64)))


class TestCtcLossExamples:
    def test_single_frame_single_alignment(self):
        p = posteriors_from_probs([[0.4, 0.6]])
        loss, grad = ctc_loss(p, [A])
        assert loss == pytest.approx(-math.log(0.6), abs=1e-12)
        # the single path puts all its mass on label a at t=0
        np.testing.assert_allclose(grad, [[0.0, -1.0]], atol=1e-12)

    def test_empty_target_is_all_blank_path(self):
        p = posteriors_from_probs([[0.7, 0.3], [0.2, 0.8]])
        loss, _ = ctc_loss(p, [])
        assert loss == pytest.approx(-(math.log(0.7) + math.log(0.2)), abs=1e-12)

    def test_three_path_sum(self):
        # paths {aa, a-, -a} each 0.25: P = 0.75
        p = posteriors_from_probs([[0.5, 0.5], [0.5, 0.5]])
        loss, _ = ctc_loss(p, [A])
        assert loss == pytest.approx(-math.log(0.75), abs=1e-12)
        assert ctc_loss_bruteforce(p, [A]) == pytest.approx(-math.log(0.75), abs=1e-12)

    def test_infeasible_target_is_inf_with_zero_grad(self):
        p = posteriors_from_probs([[0.5, 0.5]])
        loss, grad = ctc_loss(p, [A, A])
        assert math.isinf(loss)
        np.testing.assert_array_equal(grad, np.zeros((1, 2)))

    def test_duplicate_needs_blank_frame(self):
        assert min_alignable_frames([A, A]) == 3
        assert min_alignable_frames([A, B]) == 2
        assert min_alignable_frames([]) == 0

    def test_blank_in_target_rejected(self):
        p = posteriors_from_probs([[0.5, 0.5]])
        with pytest.raises(InvalidInputError):
            ctc_loss(p, [BLANK])

    def test_loss_zero_only_for_certain_alignment(self):
        sure = FramePosteriors(np.log(np.array([[1e-300, 1.0]])), length=1)
        loss, _ = ctc_loss(sure, [A])
        assert loss == pytest.approx(0.0, abs=1e-9)


class TestBruteforceOracle:
    def test_matches_dp_on_spec_example(self):
        p = posteriors_from_probs([[0.4, 0.6]])
        assert ctc_loss_bruteforce(p, [A]) == pytest.approx(-math.log(0.6), abs=1e-12)

    def test_unproducible_target_is_inf(self):
        p = posteriors_from_probs([[0.5, 0.5]])
        assert math.isinf(ctc_loss_bruteforce(p, [A, A]))

    def test_size_guard(self):
        p = FramePosteriors.from_logits(np.zeros((30, 4)))
        with pytest.raises(OracleSizeError):
            ctc_loss_bruteforce(p, [1])

    def test_oracle_equivalence_randomized(self):
        rng = np.random.default_rng(7)
        for _ in range(120):
            T = int(rng.integers(1, 7))
            C = int(rng.integers(2, 4))
            L = int(rng.integers(0, 4))
            p = random_posteriors(rng, T, C)
            target = random_target(rng, L, C)
            dp_loss, _ = ctc_loss(p, target)
            bf_loss = ctc_loss_bruteforce(p, target)
            if math.isinf(bf_loss):
                assert math.isinf(dp_loss)
            else:
                assert dp_loss == pytest.approx(bf_loss, abs=1e-6)


class TestForwardBackwardConsistency:
    def test_directions_agree(self):
        rng = np.random.default_rng(21)
        checked = 0
        while checked < 150:
            T = int(rng.integers(1, 21))
            C = int(rng.integers(2, 7))
            L = int(rng.integers(0, 9))
            p = random_posteriors(rng, T, C)
            target = random_target(rng, L, C)
            fwd = ctc_log_likelihood(p, target, direction="forward")
            bwd = ctc_log_likelihood(p, target, direction="backward")
            if math.isinf(fwd) or math.isinf(bwd):
                assert fwd == bwd
                continue
            assert fwd == pytest.approx(bwd, abs=1e-9)
            checked += 1


class TestGradient:
    def test_finite_differences_through_logits(self):
        rng = np.random.default_rng(3)
        h = 1e-6
        for _ in range(25):
            T = int(rng.integers(2, 8))
            C = int(rng.integers(2, 5))
            L = int(rng.integers(1, 4))
            target = random_target(rng, L, C)
            if min_alignable_frames(target) > T:
                continue
            logits = rng.normal(size=(T, C))
            p = FramePosteriors.from_logits(logits)
            _, grad_lp = ctc_loss(p, target)
            analytic = logit_grad_from_log_prob_grad(p.log_probs, grad_lp)

            def loss_at(u):
                return ctc_loss(FramePosteriors.from_logits(u), target)[0]

            for t in range(T):
                for c in range(C):
                    up = logits.copy()
                    up[t, c] += h
                    dn = logits.copy()
                    dn[t, c] -= h
                    fd = (loss_at(up) - loss_at(dn)) / (2 * h)
                    denom = max(abs(fd), abs(analytic[t, c]), 1e-4)
                    assert abs(fd - analytic[t, c]) / denom < 1e-4

    def test_grad_rows_are_negated_posteriors(self):
        rng = np.random.default_rng(5)
        p = random_posteriors(rng, 6, 3)
        loss, grad = ctc_loss(p, [1, 2])
        assert loss >= 0.0
        np.testing.assert_allclose(grad.sum(axis=1), -np.ones(6), atol=1e-9)
        assert (grad <= 1e-12).all()


class TestBatchApi:
    def test_padded_frames_ignored(self):
        rng = np.random.default_rng(11)
        p1 = random_posteriors(rng, 4, 3)
        p2 = random_posteriors(rng, 6, 3)
        stack = np.full((2, 6, 3), np.log(1.0 / 3.0))
        stack[0, :4] = p1.log_probs
        stack[1] = p2.log_probs
        losses, grads = ctc_loss_batch(stack, [4, 6], [[1], [2, 1]])
        l1, g1 = ctc_loss(p1, [1])
        l2, g2 = ctc_loss(p2, [2, 1])
        assert losses[0] == pytest.approx(l1)
        assert losses[1] == pytest.approx(l2)
        np.testing.assert_allclose(grads[0, :4], g1)
        np.testing.assert_array_equal(grads[0, 4:], 0.0)
        np.testing.assert_allclose(grads[1], g2)

    def test_batch_independent_of_company(self):
        # an item's loss must not depend on what it is batched with
        rng = np.random.default_rng(13)
        p = random_posteriors(rng, 5, 3)
        solo, _ = ctc_loss_batch(p.log_probs[None], [5], [[1, 2]])
        other = random_posteriors(rng, 5, 3)
        pair, _ = ctc_loss_batch(
            np.stack([p.log_probs, other.log_probs]), [5, 5], [[1, 2], [1]]
        )
        assert solo[0] == pair[0]


class TestLabelSequence:
    def test_validate_against_vocab(self):
        v = Vocabulary.from_labels(["a"])
        LabelSequence((1,)).validate_against(v)
        with pytest.raises(InvalidInputError):
            LabelSequence((0,)).validate_against(v)
        with pytest.raises(InvalidInputError):
            LabelSequence((9,)).validate_against(v)
