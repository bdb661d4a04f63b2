"""Gumbel-Softmax question attack: sampling fidelity, penalties, decoding."""

import types

import numpy as np
import pytest

from coattack.encoders import AnswerEncoder, EncoderConfig, InputError, SurrogateEncoder
from coattack.lm import BigramLanguageModel, LMConfig, TransformerLanguageModel
from coattack.optim import Adam
from coattack.tensor import ParameterError, Tensor, cosine_similarity, grad_check, matmul
from coattack.text_attack import (
    AdversarialDistribution,
    TextAttackConfig,
    decode_question,
    sample_gumbel,
    sample_soft_tokens,
    semantic_divergence,
    soft_embed,
    text_objective,
    update_theta,
)


class TestSampling:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        theta = Tensor(rng.standard_normal((6, 9)))
        pi = sample_soft_tokens(theta, tau=0.5, rng=rng)
        assert np.all(np.abs(pi.values.sum(axis=1) - 1.0) <= 1e-9)
        assert pi.values.min() >= 0.0

    def test_low_temperature_peaks_on_gapped_logits(self):
        # logit gap 6 at tau 0.01: the max entry should exceed 0.99 in well
        # over 99% of draws
        rng = np.random.default_rng(1)
        theta = Tensor(np.tile(np.array([6.0, 0.0, 0.0]), (10_000, 1)))
        pi = sample_soft_tokens(theta, tau=0.01, rng=rng)
        frac = float(np.mean(pi.values.max(axis=1) > 0.99))
        assert frac > 0.99

    def test_argmax_frequencies_match_softmax(self):
        # the Gumbel-max property, checked by Monte Carlo over 1e5 draws
        rng = np.random.default_rng(2)
        logits = np.array([1.2, -0.3, 0.0, 2.0, 0.5])
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        draws = 100_000
        pi = sample_soft_tokens(Tensor(np.tile(logits, (draws, 1))), tau=0.7, rng=rng)
        counts = np.bincount(np.argmax(pi.values, axis=1), minlength=5) / draws
        assert np.max(np.abs(counts - probs)) < 0.02

    def test_reparameterization_with_frozen_noise(self):
        rng = np.random.default_rng(3)
        noise = sample_gumbel(rng, (2, 4))
        theta = np.zeros((2, 4))
        a = sample_soft_tokens(Tensor(theta), tau=0.5, noise=noise).values
        b = sample_soft_tokens(Tensor(theta), tau=0.5, noise=noise).values
        assert np.array_equal(a, b)

    def test_needs_rng_or_noise(self):
        with pytest.raises(ParameterError):
            sample_soft_tokens(Tensor(np.zeros((2, 3))), tau=0.5)


class TestSoftEmbed:
    def test_one_hot_equals_hard_lookup(self):
        rng = np.random.default_rng(4)
        table = Tensor(rng.standard_normal((7, 5)))
        onehot = np.zeros((3, 7))
        ids = [2, 0, 6]
        onehot[np.arange(3), ids] = 1.0
        out = soft_embed(Tensor(onehot), table).values
        assert np.array_equal(out, table.values[ids])

    def test_uniform_row_is_mean_embedding(self):
        rng = np.random.default_rng(5)
        table = Tensor(rng.standard_normal((4, 3)))
        out = soft_embed(Tensor(np.full((1, 4), 0.25)), table).values
        assert np.allclose(out[0], table.values.mean(axis=0), atol=1e-12)

    def test_two_token_hand_mixture(self):
        e0, e1 = np.array([1.0, 2.0]), np.array([-3.0, 0.5])
        table = Tensor(np.stack([e0, e1]))
        out = soft_embed(Tensor(np.array([[0.3, 0.7]])), table).values
        assert np.allclose(out[0], 0.3 * e0 + 0.7 * e1, atol=1e-12)

    def test_rows_must_be_distributions(self):
        with pytest.raises(InputError, match="row 0"):
            soft_embed(Tensor(np.array([[0.5, 0.6]])), Tensor(np.zeros((2, 2))))


class _FixedEmbeddingLM:
    """Contextual embeddings read from a fixed table; enough for divergence."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.float64)

    def contextual_embeddings(self, ids):
        from coattack.tensor import gather_rows

        return gather_rows(Tensor(self.table), np.asarray(ids))

    def contextual_embeddings_soft(self, probs):
        return matmul(probs, Tensor(self.table))


class TestSemanticDivergence:
    def test_identical_sequences_diverge_zero(self):
        lm = TransformerLanguageModel(LMConfig(vocab_size=9, hidden_size=16, depth=1, heads=2, mlp_size=24), seed=0)
        ids = [1, 2, 3]
        assert semantic_divergence(ids, ids, lm).item() == pytest.approx(0.0, abs=1e-9)

    def test_orthogonal_single_tokens_diverge_one(self):
        lm = _FixedEmbeddingLM(np.eye(3))
        assert semantic_divergence([0], [1], lm).item() == pytest.approx(1.0, abs=1e-12)

    def test_greedy_matching_hand_case(self):
        # pairwise cosines [[1, 0], [0, 0.5]] -> P = R = 0.75, divergence 0.25
        table = np.array(
            [
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.5, np.sqrt(0.75)],
            ]
        )
        lm = _FixedEmbeddingLM(table)
        rho = semantic_divergence([0, 1], [0, 2], lm).item()
        assert rho == pytest.approx(0.25, abs=1e-12)

    def test_range_bound(self):
        lm = _FixedEmbeddingLM(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]))
        rho = semantic_divergence([0], [1], lm).item()
        assert rho == pytest.approx(2.0, abs=1e-12)

    def test_empty_sequence_rejected(self):
        lm = _FixedEmbeddingLM(np.eye(2))
        with pytest.raises(InputError):
            semantic_divergence([], [0], lm)
        with pytest.raises(InputError):
            semantic_divergence([0], [], lm)


def _attack_stack(seed=0):
    cfg = EncoderConfig(vocab_size=14, hidden_size=16, depth=1, heads=2, mlp_size=24,
                        patch_size=8, max_seq_len=6, height=16, width=16)
    surrogate = SurrogateEncoder(cfg, seed=seed)
    answer_encoder = AnswerEncoder(cfg, seed=seed + 1)
    lm = TransformerLanguageModel(LMConfig(vocab_size=14, hidden_size=16, depth=1, heads=2, mlp_size=24), seed=seed + 2)
    for m in (surrogate, answer_encoder, lm):
        m.freeze()
    rng = np.random.default_rng(seed + 3)
    sample = types.SimpleNamespace(
        sample_id=0,
        image=rng.uniform(0.1, 0.9, (3, 16, 16)),
        question_ids=np.array([1, 2, 3]),
        answer_ids=np.array([4, 5]),
    )
    return surrogate, answer_encoder, lm, sample, rng


class TestObjective:
    def test_zero_weights_reduce_to_cosine(self):
        surrogate, answer_encoder, lm, sample, rng = _attack_stack()
        answer_vec = answer_encoder.forward(sample.answer_ids)
        cfg = TextAttackConfig(lm_weight=0.0, sim_weight=0.0)
        pi = sample_soft_tokens(Tensor(np.zeros((3, 14))), tau=0.5, rng=rng)
        objective, parts = text_objective(pi, sample, surrogate, answer_vec, lm, cfg)
        assert objective.item() == parts["cosine"]
        assert parts["nll"] is None and parts["divergence"] is None

    def test_clean_one_hot_matches_clean_similarity(self):
        surrogate, answer_encoder, lm, sample, _ = _attack_stack(seed=5)
        answer_vec = answer_encoder.forward(sample.answer_ids)
        onehot = np.zeros((3, 14))
        onehot[np.arange(3), sample.question_ids] = 1.0
        cfg = TextAttackConfig(lm_weight=0.0, sim_weight=1.0)
        objective, parts = text_objective(Tensor(onehot), sample, surrogate, answer_vec, lm, cfg)
        clean = cosine_similarity(surrogate.joint_forward(sample.image, sample.question_ids), answer_vec).item()
        assert parts["cosine"] == pytest.approx(clean, abs=1e-12)
        assert parts["divergence"] == pytest.approx(0.0, abs=1e-9)

    def test_objective_is_sum_of_terms(self):
        surrogate, answer_encoder, lm, sample, rng = _attack_stack(seed=7)
        answer_vec = answer_encoder.forward(sample.answer_ids)
        cfg = TextAttackConfig(lm_weight=0.37, sim_weight=1.21)
        pi = sample_soft_tokens(Tensor(rng.standard_normal((3, 14))), tau=0.5, rng=rng)
        objective, parts = text_objective(pi, sample, surrogate, answer_vec, lm, cfg)
        cosine = cosine_similarity(
            surrogate.joint_forward(Tensor(sample.image), soft_embed(pi, surrogate.tok_embed)), answer_vec
        ).item()
        nll = lm.nll_soft(pi).item()
        rho = semantic_divergence(sample.question_ids, pi, lm).item()
        assert objective.item() == pytest.approx(cosine + 0.37 * nll + 1.21 * rho, abs=1e-10)

    def test_reparameterized_gradient_matches_finite_differences(self):
        # n = 3 positions over a 5-token vocabulary, noise frozen
        cfg = EncoderConfig(vocab_size=5, hidden_size=16, depth=1, heads=2, mlp_size=24,
                            patch_size=8, max_seq_len=6, height=16, width=16)
        surrogate = SurrogateEncoder(cfg, seed=1)
        answer_encoder = AnswerEncoder(cfg, seed=2)
        lm = TransformerLanguageModel(LMConfig(vocab_size=5, hidden_size=16, depth=1, heads=2, mlp_size=24), seed=3)
        for m in (surrogate, answer_encoder, lm):
            m.freeze()
        rng = np.random.default_rng(9)
        image = rng.uniform(0.2, 0.8, (3, 16, 16))
        question = np.array([0, 3, 1])
        answer_vec = answer_encoder.forward([2, 4])
        noise = sample_gumbel(rng, (3, 5))
        tcfg = TextAttackConfig(lm_weight=0.1, sim_weight=1.0)
        sample = types.SimpleNamespace(sample_id=0, image=image, question_ids=question, answer_ids=[2, 4])

        def f(theta):
            pi = sample_soft_tokens(theta, tau=0.5, noise=noise)
            objective, _ = text_objective(pi, sample, surrogate, answer_vec, lm, tcfg)
            return objective

        theta0 = np.zeros((3, 5))
        theta0[np.arange(3), question] = 2.0
        assert grad_check(f, Tensor(theta0), step=1e-5) < 1e-4


class TestUpdateTheta:
    def test_zero_gradient_exactly_no_move(self):
        theta = Tensor(np.ones((2, 3)), requires_grad=True)
        opt = Adam([theta], lr=0.5)
        for _ in range(3):
            theta.grad = np.zeros((2, 3))
            assert update_theta(theta, opt)
        assert np.array_equal(theta.values, np.ones((2, 3)))

    def test_non_finite_gradient_flags_abort(self):
        theta = Tensor(np.ones((2, 3)), requires_grad=True)
        opt = Adam([theta], lr=0.5)
        theta.grad = np.full((2, 3), np.nan)
        assert not update_theta(theta, opt)

    def test_deterministic(self):
        def run():
            theta = Tensor(np.zeros((2, 2)), requires_grad=True)
            opt = Adam([theta], lr=0.1)
            for i in range(4):
                theta.grad = np.full((2, 2), 0.1 * (i + 1))
                update_theta(theta, opt)
            return theta.values.copy()

        assert np.array_equal(run(), run())


class TestDecode:
    def test_argmax_on_peaked_logits(self):
        theta = np.zeros((3, 6))
        theta[0, 4] = 9.0
        theta[1, 1] = 9.0
        theta[2, 5] = 9.0
        assert decode_question(theta, "argmax").ids.tolist() == [4, 1, 5]

    def test_tie_breaks_to_lowest_id(self):
        assert decode_question(np.zeros((2, 5)), "argmax").ids.tolist() == [0, 0]

    def test_sample_mode_returns_min_scoring_candidate(self):
        rng = np.random.default_rng(11)
        theta = np.zeros((2, 4))

        def score_fn(ids):
            return float(ids.sum())

        result = decode_question(theta, "sample", k=8, rng=rng, score_fn=score_fn)
        scores = sorted(s for _, s in result.candidates)
        assert float(score_fn(result.ids)) == scores[0]
        assert scores[0] <= scores[len(scores) // 2]

    def test_unknown_mode_rejected(self):
        with pytest.raises(ParameterError):
            decode_question(np.zeros((1, 2)), "beam")


class TestDistributionInit:
    def test_starts_near_clean_question(self):
        rng = np.random.default_rng(13)
        cfg = TextAttackConfig()
        dist = AdversarialDistribution.from_clean_question([3, 1, 2], 6, cfg, rng)
        assert dist.length == 3
        assert decode_question(dist.logits, "argmax").ids.tolist() == [3, 1, 2]

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            TextAttackConfig(tau=0.0)
        with pytest.raises(ParameterError):
            TextAttackConfig(lm_weight=-0.1)
        with pytest.raises(ParameterError):
            TextAttackConfig(inner_steps=0)
