"""Language model scoring: table-lookup oracles and the soft path."""

import math

import numpy as np
import pytest

from coattack.encoders import InputError
from coattack.lm import (
    BigramLanguageModel,
    LMConfig,
    TransformerLanguageModel,
    build_language_model,
    lm_config_dict,
    lm_from_checkpoint,
)
from coattack.tensor import Tensor


class TestBigram:
    def test_uniform_model_scores_log_vocab(self):
        lm = BigramLanguageModel.uniform(7)
        for seq in ([0, 1], [3, 3, 3, 3], [6, 0, 2]):
            assert lm.nll(seq).item() == pytest.approx(math.log(7), abs=1e-12)

    def test_deterministic_model_scores_zero(self):
        table = np.zeros((3, 3))
        table[0, 1] = 1.0
        table[1, 2] = 1.0
        table[2, 0] = 1.0
        lm = BigramLanguageModel(table)
        assert lm.nll([0, 1, 2, 0]).item() == pytest.approx(0.0, abs=1e-12)

    def test_hand_built_table_oracle(self):
        # three tokens; sequence "a b" scores -log p(b|a) by table lookup
        table = np.array([[0.2, 0.5, 0.3], [0.1, 0.6, 0.3], [0.3, 0.3, 0.4]])
        lm = BigramLanguageModel(table)
        assert lm.nll([0, 1]).item() == pytest.approx(-math.log(0.5), abs=1e-12)
        # longer sequence: mean of per-transition terms
        expected = -(math.log(0.5) + math.log(0.3)) / 2.0
        assert lm.nll([0, 1, 2]).item() == pytest.approx(expected, abs=1e-12)

    def test_single_token_scores_zero(self):
        lm = BigramLanguageModel.uniform(4)
        assert lm.nll([2]).item() == 0.0

    def test_rows_must_sum_to_one(self):
        with pytest.raises(InputError):
            BigramLanguageModel(np.full((2, 2), 0.4))

    def test_soft_path_reduces_to_hard_on_one_hot(self):
        table = np.array([[0.25, 0.75], [0.6, 0.4]])
        lm = BigramLanguageModel(table)
        onehot = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        soft = lm.nll_soft(Tensor(onehot)).item()
        hard = lm.nll([0, 1, 1]).item()
        assert soft == pytest.approx(hard, abs=1e-12)

    def test_counts_fit_normalizes(self):
        lm = BigramLanguageModel.fit_counts([[0, 1, 1], [1, 1]], vocab_size=3, smoothing=0.5)
        assert np.allclose(lm.probs.sum(axis=1), 1.0)
        assert lm.probs[1, 1] > lm.probs[1, 0]

    def test_next_distribution_sums_to_one(self):
        lm = BigramLanguageModel.uniform(5)
        assert lm.next_distribution([1, 2]).sum() == pytest.approx(1.0, abs=1e-12)


@pytest.fixture(scope="module")
def toy_lm():
    return TransformerLanguageModel(LMConfig(vocab_size=12, hidden_size=16, depth=1, heads=2, mlp_size=24), seed=5)


class TestTransformerLM:
    def test_nll_finite_nonnegative(self, toy_lm):
        for seq in ([0, 1, 2], [5, 5], [1, 2, 3, 4, 5]):
            value = toy_lm.nll(seq).item()
            assert np.isfinite(value) and value >= 0.0

    def test_single_token_scores_zero(self, toy_lm):
        assert toy_lm.nll([3]).item() == 0.0

    def test_empty_sequence_rejected(self, toy_lm):
        with pytest.raises(InputError):
            toy_lm.nll([])

    def test_next_distribution_sums_to_one(self, toy_lm):
        dist = toy_lm.next_distribution([1, 2, 3])
        assert dist.shape == (12,)
        assert dist.sum() == pytest.approx(1.0, abs=1e-12)
        assert dist.min() >= 0.0

    def test_contextual_embeddings_shapes(self, toy_lm):
        out = toy_lm.contextual_embeddings([4])
        assert out.shape == (1, 16)
        out3 = toy_lm.contextual_embeddings([4, 5, 6])
        assert out3.shape == (3, 16)
        assert np.array_equal(out3.values, toy_lm.contextual_embeddings([4, 5, 6]).values)

    def test_embeddings_are_contextual(self, toy_lm):
        # the same token after different prefixes embeds differently
        a = toy_lm.contextual_embeddings([1, 2, 7]).values[2]
        b = toy_lm.contextual_embeddings([5, 9, 7]).values[2]
        assert not np.allclose(a, b)

    def test_causality(self, toy_lm):
        # changing a later token never changes an earlier embedding
        a = toy_lm.contextual_embeddings([1, 2, 3]).values[0]
        b = toy_lm.contextual_embeddings([1, 9, 9]).values[0]
        assert np.array_equal(a, b)

    def test_soft_path_matches_hard_on_one_hot(self, toy_lm):
        ids = [2, 7, 4]
        onehot = np.zeros((3, 12))
        onehot[np.arange(3), ids] = 1.0
        assert toy_lm.nll_soft(Tensor(onehot)).item() == pytest.approx(toy_lm.nll(ids).item(), abs=1e-14)
        soft_ctx = toy_lm.contextual_embeddings_soft(Tensor(onehot)).values
        assert np.array_equal(soft_ctx, toy_lm.contextual_embeddings(ids).values)

    def test_fit_reduces_nll(self):
        rng = np.random.default_rng(0)
        lm = TransformerLanguageModel(LMConfig(vocab_size=8, hidden_size=16, depth=1, heads=2, mlp_size=24), seed=1)
        corpus = [rng.permutation([0, 1, 2, 3])[:3] for _ in range(40)] + [[4, 5, 6]] * 40
        history = lm.fit([np.asarray(c) for c in corpus], epochs=4, lr=3e-3, seed=0)
        assert history[-1] < history[0]


class TestFactoryAndCheckpoint:
    def test_factory_kinds(self):
        assert isinstance(build_language_model(LMConfig(vocab_size=5, kind="bigram")), BigramLanguageModel)
        assert isinstance(build_language_model(LMConfig(vocab_size=5)), TransformerLanguageModel)
        with pytest.raises(InputError):
            LMConfig(vocab_size=5, kind="rnn")

    def test_round_trip_transformer(self, toy_lm):
        payload = lm_config_dict(toy_lm)
        rebuilt = lm_from_checkpoint(payload, toy_lm.state_arrays())
        assert np.array_equal(
            rebuilt.contextual_embeddings([1, 2]).values, toy_lm.contextual_embeddings([1, 2]).values
        )

    def test_round_trip_bigram(self):
        lm = BigramLanguageModel.fit_counts([[0, 1], [1, 0]], vocab_size=3)
        rebuilt = lm_from_checkpoint(lm_config_dict(lm), lm.state_arrays())
        assert np.allclose(rebuilt.probs, lm.probs)
