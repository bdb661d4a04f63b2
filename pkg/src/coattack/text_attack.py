"""Distributional adversarial question generation.

A logit matrix over token positions parameterizes a distribution of
questions.  Sampling goes through the Gumbel-Softmax relaxation so the
draw stays differentiable with the noise held fixed; the sampled rows are
embedded as expected word vectors and pushed through the surrogate.  The
objective combines the embedding cosine with a fluency penalty (language
model NLL) and a semantic divergence penalty (one minus the greedy-match
F1 of contextual-embedding cosines).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import InputError
from .optim import Adam
from .tensor import (
    ParameterError,
    Tensor,
    cosine_similarity,
    div,
    matmul,
    max_along,
    mul,
    reduce_mean,
    reduce_sum,
    softmax,
    sqrt,
    transpose,
)

__all__ = [
    "TextAttackConfig",
    "AdversarialDistribution",
    "DecodeResult",
    "sample_gumbel",
    "sample_soft_tokens",
    "soft_embed",
    "semantic_divergence",
    "text_objective",
    "update_theta",
    "decode_question",
]


@dataclass(frozen=True)
class TextAttackConfig:
    tau: float = 0.5
    lm_weight: float = 0.1
    sim_weight: float = 1.0
    lr: float = 5e-4
    inner_steps: int = 1
    decode_samples: int = 8
    init_scale: float = 5.0
    init_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ParameterError(f"temperature must be positive, got {self.tau}")
        if self.lm_weight < 0 or self.sim_weight < 0:
            raise ParameterError("penalty weights must be non-negative")
        if self.lr <= 0:
            raise ParameterError("learning rate must be positive")
        if self.inner_steps < 1 or self.decode_samples < 1:
            raise ParameterError("inner_steps and decode_samples must be at least 1")


@dataclass
class AdversarialDistribution:
    """Trainable logits over vocabulary entries, one row per position."""

    logits: Tensor
    tau: float

    @property
    def length(self) -> int:
        return self.logits.shape[0]

    @classmethod
    def from_clean_question(cls, clean_ids, vocab_size: int, config: TextAttackConfig, rng) -> "AdversarialDistribution":
        """Start near the clean question: scaled one-hot plus small noise."""
        clean_ids = np.asarray(clean_ids, dtype=np.int64)
        if clean_ids.size == 0:
            raise InputError("cannot build a distribution over an empty question")
        base = np.zeros((len(clean_ids), vocab_size))
        base[np.arange(len(clean_ids)), clean_ids] = config.init_scale
        base += rng.normal(0.0, config.init_noise, size=base.shape)
        return cls(logits=Tensor(base, requires_grad=True), tau=config.tau)


def sample_gumbel(rng, shape) -> np.ndarray:
    u = np.clip(rng.uniform(size=shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def sample_soft_tokens(theta: Tensor, tau: float, rng=None, noise: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax((theta + gumbel) / tau); reparameterized in theta.

    Pass ``noise`` to freeze the Gumbel draw (finite-difference checks);
    otherwise it is drawn from ``rng``.
    """
    if noise is None:
        if rng is None:
            raise ParameterError("sample_soft_tokens needs an rng or explicit noise")
        noise = sample_gumbel(rng, theta.shape)
    return softmax(theta + Tensor(noise), tau=tau, axis=-1)


def soft_embed(pi: Tensor, embedding: Tensor) -> Tensor:
    """Expected word embeddings of distribution rows: pi @ embedding."""
    rows = pi.values.sum(axis=1)
    bad = np.abs(rows - 1.0) > 1e-6
    if np.any(bad):
        raise InputError(f"distribution row {int(np.argmax(bad))} sums to {rows[np.argmax(bad)]:.8f}, not 1")
    return matmul(pi, embedding)


def _normalize_rows(m: Tensor) -> Tensor:
    norms = np.linalg.norm(m.values, axis=1)
    if np.any(norms == 0.0):
        raise InputError("contextual embedding with zero norm")
    return div(m, sqrt(reduce_sum(mul(m, m), axis=1, keepdims=True)))


def semantic_divergence(reference_ids, candidate, lm) -> Tensor:
    """One minus greedy-match F1 of contextual-embedding cosines, in [0, 2].

    ``candidate`` is either hard token ids or a tensor of distribution
    rows; the soft path keeps the result differentiable.
    """
    reference_ids = np.asarray(reference_ids, dtype=np.int64)
    if reference_ids.size == 0:
        raise InputError("semantic_divergence needs a non-empty reference")
    if isinstance(candidate, Tensor):
        cand_emb = lm.contextual_embeddings_soft(candidate)
    else:
        candidate = np.asarray(candidate, dtype=np.int64)
        if candidate.size == 0:
            raise InputError("semantic_divergence needs a non-empty candidate")
        cand_emb = lm.contextual_embeddings(candidate)
    ref_emb = lm.contextual_embeddings(reference_ids)
    sims = matmul(_normalize_rows(ref_emb), transpose(_normalize_rows(cand_emb)))
    recall = reduce_mean(max_along(sims, axis=1))
    precision = reduce_mean(max_along(sims, axis=0))
    denom = precision.item() + recall.item()
    if abs(denom) < 1e-12:
        return Tensor(1.0)
    return 1.0 - div(2.0 * mul(precision, recall), precision + recall)


def text_objective(pi: Tensor, sample, surrogate, answer_vec: Tensor, lm, config: TextAttackConfig, adv_image=None):
    """Weighted attack objective and its per-term breakdown.

    Uses the current (possibly perturbed) image when ``adv_image`` is
    given, so image and text gradients come from one graph.  Terms whose
    weight is zero are skipped entirely.
    """
    image = adv_image if adv_image is not None else Tensor(sample.image)
    cosine = cosine_similarity(
        surrogate.joint_forward(image, soft_embed(pi, surrogate.tok_embed)), answer_vec
    )
    parts = {"cosine": cosine.item(), "nll": None, "divergence": None}
    objective = cosine
    if config.lm_weight > 0:
        nll = lm.nll_soft(pi)
        parts["nll"] = nll.item()
        objective = objective + config.lm_weight * nll
    if config.sim_weight > 0:
        divergence = semantic_divergence(sample.question_ids, pi, lm)
        parts["divergence"] = divergence.item()
        objective = objective + config.sim_weight * divergence
    parts["objective"] = objective.item()
    return objective, parts


def update_theta(theta: Tensor, optimizer: Adam) -> bool:
    """Adaptive-moment step on the logits; False flags a non-finite gradient."""
    if theta.grad is not None and not np.isfinite(theta.grad).all():
        return False
    optimizer.step()
    return True


@dataclass
class DecodeResult:
    ids: np.ndarray
    candidates: list = field(default_factory=list)


def decode_question(theta, mode: str = "argmax", k: int = 1, rng=None, score_fn=None) -> DecodeResult:
    """Hard token ids from the logits.

    argmax mode takes the per-position maximum (ties resolve to the lowest
    id).  sample mode draws ``k`` hard sequences by Gumbel-max and returns
    the one whose ``score_fn`` (the cosine term) is smallest.
    """
    values = theta.values if isinstance(theta, Tensor) else np.asarray(theta, dtype=np.float64)
    if mode == "argmax":
        return DecodeResult(ids=np.argmax(values, axis=1).astype(np.int64))
    if mode == "sample":
        if rng is None or score_fn is None:
            raise ParameterError("sample mode needs an rng and a score function")
        candidates = []
        for _ in range(k):
            ids = np.argmax(values + sample_gumbel(rng, values.shape), axis=1).astype(np.int64)
            candidates.append((ids, float(score_fn(ids))))
        best = min(range(len(candidates)), key=lambda i: candidates[i][1])
        return DecodeResult(ids=candidates[best][0], candidates=candidates)
    raise ParameterError(f"unknown decode mode {mode!r}")
