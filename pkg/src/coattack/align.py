"""Contrastive alignment of the surrogate encoder with the answer encoder.

Matched (joint, answer) embeddings are pulled together against two pools
of in-batch negatives: the anchor's joint embedding versus every other
answer, and every other joint embedding versus the anchor's answer.  The
positive term is excluded from both negative sums.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_checkpoint, load_checkpoint
from .encoders import AnswerEncoder, EncoderConfig, InputError, SurrogateEncoder
from .lm import LMConfig, lm_config_dict, lm_from_checkpoint
from .optim import Adam
from .tensor import (
    DomainError,
    ParameterError,
    Tensor,
    div,
    exp,
    log,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    sqrt,
    stack_rows,
    transpose,
)

ANSWER_TEMPLATE = "the answer is {}"


def expand_answer(answer_word: str, question: str, vocab) -> np.ndarray:
    """Token ids of the fixed answer sentence for a ground-truth word.

    The question argument is accepted for interface symmetry but ignored:
    the template is deliberately question-independent.
    """
    if answer_word not in vocab:
        raise InputError(f"answer word {answer_word!r} not in vocabulary")
    del question
    return np.asarray(vocab.encode(ANSWER_TEMPLATE.format(answer_word)), dtype=np.int64)


@dataclass(frozen=True)
class AlignmentConfig:
    batch_size: int = 32
    epochs: int = 30
    lr: float = 5e-4
    seed: int = 0
    checkpoint_path: str = ""
    temperature: float = 1.0
    eval_batch: int = 16
    early_stop_accuracy: float = 0.95

    def __post_init__(self):
        if self.batch_size < 2:
            raise ParameterError("alignment batch size must be at least 2 (negatives required)")
        if self.epochs < 0:
            raise ParameterError("epochs must be non-negative")
        if self.lr <= 0 or self.temperature <= 0:
            raise ParameterError("learning rate and temperature must be positive")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    retrieval_accuracy: float


@dataclass
class AlignmentResult:
    metrics: list
    aborted: bool
    epochs_run: int


def _normalize_rows(m: Tensor, label: str) -> Tensor:
    norms = np.linalg.norm(m.values, axis=1)
    if np.any(norms == 0.0):
        idx = int(np.argmax(norms == 0.0))
        raise DomainError(f"{label} embedding {idx} has zero norm")
    return div(m, sqrt(reduce_sum(mul(m, m), axis=1, keepdims=True)))


def contrastive_loss(pairs: Sequence[tuple[Tensor, Tensor]], temperature: float = 1.0) -> Tensor:
    """Batch-mean alignment loss over matched (joint, answer) pairs.

    ``temperature`` scales the cosine before exponentiation; 1 reproduces
    the plain objective and is the default everywhere.
    """
    if len(pairs) < 1:
        raise InputError("contrastive_loss needs at least one pair")
    if temperature <= 0:
        raise ParameterError("temperature must be positive")
    b = len(pairs)
    joint = _normalize_rows(stack_rows([p[0] for p in pairs]), "joint")
    answer = _normalize_rows(stack_rows([p[1] for p in pairs]), "answer")
    sims = matmul(joint, transpose(answer)) * (1.0 / temperature)
    eye = Tensor(np.eye(b))
    matched = reduce_sum(sims * eye, axis=1)
    scores = exp(sims)
    matched_scores = reduce_sum(scores * eye, axis=1)
    denom = reduce_sum(scores, axis=1) + reduce_sum(scores, axis=0) - matched_scores
    return reduce_mean(log(denom) - matched)


def retrieval_accuracy(surrogate: SurrogateEncoder, answer_encoder: AnswerEncoder, samples: Sequence) -> float:
    """Fraction of anchors whose own answer tops the batch's unique answers.

    Duplicate answer sentences within the batch collapse to one candidate,
    so a 15-word answer space still yields a meaningful ranking; ties go
    to the lowest candidate index and only count when that is the match.
    """
    if len(samples) < 2:
        raise InputError("retrieval_accuracy needs a batch of at least 2 samples")
    keys: list[tuple] = []
    columns: dict[tuple, int] = {}
    for s in samples:
        key = tuple(np.asarray(s.answer_ids).tolist())
        keys.append(key)
        if key not in columns:
            columns[key] = len(columns)
    answer_rows = np.zeros((len(columns), surrogate.config.hidden_size))
    for key, idx in columns.items():
        answer_rows[idx] = answer_encoder.forward(np.asarray(key, dtype=np.int64)).values
    answer_rows = answer_rows / np.linalg.norm(answer_rows, axis=1, keepdims=True)
    hits = 0
    for s, key in zip(samples, keys):
        anchor = surrogate.joint_forward(s.image, s.question_ids).values
        anchor = anchor / np.linalg.norm(anchor)
        if int(np.argmax(answer_rows @ anchor)) == columns[key]:
            hits += 1
    return hits / len(samples)


def mean_retrieval_accuracy(surrogate, answer_encoder, samples, batch_size: int = 16) -> float:
    """Average retrieval accuracy over consecutive evaluation batches."""
    accs = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        if len(batch) >= 2:
            accs.append(retrieval_accuracy(surrogate, answer_encoder, batch))
    if not accs:
        raise InputError("no evaluation batch of size >= 2 available")
    return float(np.mean(accs))


def _batch_pairs(surrogate, answer_encoder, batch) -> list[tuple[Tensor, Tensor]]:
    cache: dict[tuple, Tensor] = {}
    pairs = []
    for s in batch:
        key = tuple(np.asarray(s.answer_ids).tolist())
        if key not in cache:
            cache[key] = answer_encoder.forward(s.answer_ids)
        pairs.append((surrogate.joint_forward(s.image, s.question_ids), cache[key]))
    return pairs


def align(
    train_samples: Sequence,
    val_samples: Sequence,
    surrogate: SurrogateEncoder,
    answer_encoder: AnswerEncoder,
    config: AlignmentConfig,
) -> AlignmentResult:
    """Train both encoders on the contrastive objective.

    Emits one metrics row per epoch and stops early once held-out
    retrieval accuracy clears ``early_stop_accuracy``.  A non-finite loss
    aborts and restores the last end-of-epoch parameters.
    """
    if not train_samples:
        raise InputError("alignment needs a non-empty training set")
    params = surrogate.parameter_list() + answer_encoder.parameter_list()
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    snapshot = [p.values.copy() for p in params]
    metrics: list[EpochMetrics] = []
    aborted = False
    epochs_run = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[start : start + config.batch_size]]
            if len(batch) < 2:
                continue
            loss = contrastive_loss(_batch_pairs(surrogate, answer_encoder, batch), config.temperature)
            value = loss.item()
            if not np.isfinite(value):
                for p, saved in zip(params, snapshot):
                    p.values = saved
                aborted = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
        if aborted:
            break
        snapshot = [p.values.copy() for p in params]
        epochs_run = epoch + 1
        acc = mean_retrieval_accuracy(surrogate, answer_encoder, list(val_samples), config.eval_batch)
        metrics.append(EpochMetrics(epoch, float(np.mean(losses)), acc))
        if acc >= config.early_stop_accuracy:
            break
    if config.checkpoint_path:
        save_aligned_checkpoint(config.checkpoint_path, surrogate, answer_encoder)
    return AlignmentResult(metrics=metrics, aborted=aborted, epochs_run=epochs_run)


def write_metrics_csv(path, metrics: Sequence[EpochMetrics]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "retrieval_accuracy"])
        for row in metrics:
            writer.writerow([row.epoch, repr(row.loss), repr(row.retrieval_accuracy)])


def save_aligned_checkpoint(path, surrogate, answer_encoder, lm=None) -> None:
    """Bundle the frozen attack assets into one named-tensor archive."""
    from dataclasses import asdict

    config: dict = {
        "format": "aligned-v1",
        "surrogate": {"config": asdict(surrogate.config), "seed": surrogate.seed},
        "answer": {"config": asdict(answer_encoder.config), "seed": answer_encoder.seed},
    }
    tensors: dict[str, np.ndarray] = {}
    for name, arr in surrogate.state_arrays().items():
        tensors[f"surrogate.{name}"] = arr
    for name, arr in answer_encoder.state_arrays().items():
        tensors[f"answer.{name}"] = arr
    if lm is not None:
        config["lm"] = lm_config_dict(lm)
        for name, arr in lm.state_arrays().items():
            tensors[f"lm.{name}"] = arr
    save_checkpoint(path, config, tensors)


def load_aligned_checkpoint(path):
    """Rebuild (surrogate, answer_encoder, lm_or_None) from an archive."""
    config, tensors = load_checkpoint(path)
    if config.get("format") != "aligned-v1":
        raise InputError(f"unexpected checkpoint format {config.get('format')!r}")
    surrogate = SurrogateEncoder(
        EncoderConfig(**config["surrogate"]["config"]), seed=config["surrogate"]["seed"]
    )
    surrogate.load_state_arrays(_strip(tensors, "surrogate."))
    answer_encoder = AnswerEncoder(
        EncoderConfig(**config["answer"]["config"]), seed=config["answer"]["seed"]
    )
    answer_encoder.load_state_arrays(_strip(tensors, "answer."))
    lm = None
    if "lm" in config:
        lm = lm_from_checkpoint(config["lm"], _strip(tensors, "lm."))
    return surrogate, answer_encoder, lm


def _strip(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
