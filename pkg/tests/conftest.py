"""Shared fixtures: a small but fully trained stack for integration tests."""

import numpy as np
import pytest

from coattack.align import AlignmentConfig, align, load_aligned_checkpoint, save_aligned_checkpoint
from coattack.dataset import DatasetSpec, generate_dataset, split_samples
from coattack.encoders import AnswerEncoder, EncoderConfig, SurrogateEncoder
from coattack.lm import LMConfig, TransformerLanguageModel
from coattack.victims import VictimConfig, save_victim, train_toy_victim
from coattack.vocab import ANSWER_WORDS, Vocabulary


@pytest.fixture(scope="session")
def mini_stack(tmp_path_factory):
    """Dataset (500), aligned encoders, language model, one trained victim.

    Deliberately small: thresholds asserted against it are directional;
    the acceptance suite owns the full-scale targets.
    """
    root = tmp_path_factory.mktemp("mini_stack")
    data_dir = root / "data"
    samples = generate_dataset(DatasetSpec(n_samples=500, seed=11), data_dir)
    train = split_samples(samples, "train")
    val = split_samples(samples, "val")
    test = split_samples(samples, "test")
    vocab = Vocabulary()

    enc_cfg = EncoderConfig(vocab_size=len(vocab), hidden_size=48, depth=2, heads=4, mlp_size=96)
    surrogate = SurrogateEncoder(enc_cfg, seed=1)
    answer_encoder = AnswerEncoder(enc_cfg, seed=2)
    lm = TransformerLanguageModel(LMConfig(vocab_size=len(vocab)), seed=3)
    lm.fit([s.question_ids for s in train], epochs=4, lr=3e-3, seed=3)
    result = align(
        train,
        val,
        surrogate,
        answer_encoder,
        AlignmentConfig(temperature=0.1, seed=4, epochs=16, early_stop_accuracy=0.88),
    )
    ckpt = root / "aligned.cawb"
    save_aligned_checkpoint(ckpt, surrogate, answer_encoder, lm)
    surrogate.freeze()
    answer_encoder.freeze()
    lm.freeze()

    victim_cfg = VictimConfig(
        name="mini_victim",
        encoder=EncoderConfig(vocab_size=len(vocab), hidden_size=48, depth=2, heads=4, mlp_size=96),
        seed=101,
        lr=1e-3,
        max_epochs=16,
        target_accuracy=0.7,
        early_stop_accuracy=0.92,
    )
    victim = train_toy_victim(train, val, victim_cfg, len(ANSWER_WORDS))
    victim_path = root / "victim.cawb"
    save_victim(victim_path, victim)

    return {
        "root": root,
        "data_dir": data_dir,
        "samples": samples,
        "train": train,
        "val": val,
        "test": test,
        "vocab": vocab,
        "surrogate": surrogate,
        "answer_encoder": answer_encoder,
        "lm": lm,
        "victim": victim,
        "align_metrics": result.metrics,
        "checkpoint": ckpt,
        "victim_path": victim_path,
    }
