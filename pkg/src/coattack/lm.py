"""Toy external language model: fluency scoring and contextual embeddings.

Two interchangeable backends share one interface.  The causal transformer
is the default; it yields genuinely contextual per-token embeddings and a
soft path that stays differentiable when fed token distributions.  The
bigram table backend exists for hand-checkable likelihoods; its
"contextual" embeddings are the static next-token log-probability rows.

Likelihood convention, both backends: the mean negative log-probability
over predicted positions 2..n given their prefixes.  A single-token
sequence therefore scores 0 (nothing is predicted).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .encoders import InputError, TransformerBlock, _orthogonal, _uniform, _zeros, _ones
from .optim import Adam
from .tensor import (
    LOG_FLOOR,
    Tensor,
    gather_rows,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    narrow,
    reduce_mean,
    reduce_sum,
    stack_rows,
)


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    kind: str = "transformer"
    hidden_size: int = 32
    depth: int = 1
    heads: int = 2
    mlp_size: int = 64
    max_seq_len: int = 8

    def __post_init__(self):
        if self.kind not in ("transformer", "bigram"):
            raise InputError(f"unknown language model kind {self.kind!r}")


def _check_ids(ids, vocab_size: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or len(ids) == 0:
        raise InputError("language model input must be a non-empty 1-d id sequence")
    for pos, tok in enumerate(ids):
        if tok < 0 or tok >= vocab_size:
            raise InputError(f"token id {int(tok)} at position {pos} outside vocabulary")
    return ids


class TransformerLanguageModel:
    """Small causal transformer over the shared vocabulary."""

    def __init__(self, config: LMConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        hd = config.hidden_size
        self.tok_embed = _uniform(rng, (config.vocab_size, hd))
        self.pos = _uniform(rng, (config.max_seq_len, hd))
        self.blocks = [
            TransformerBlock(hd, config.heads, config.mlp_size, rng) for _ in range(config.depth)
        ]
        self.final_gain = _ones((hd,))
        self.final_bias = _zeros((hd,))
        self.out_w = _orthogonal(rng, hd, config.vocab_size)
        self.out_b = _zeros((config.vocab_size,))
        params: dict[str, Tensor] = {"tok_embed": self.tok_embed, "pos": self.pos}
        for i, block in enumerate(self.blocks):
            params.update(block.named_parameters(f"blocks.{i}"))
        params.update(
            {
                "final_gain": self.final_gain,
                "final_bias": self.final_bias,
                "out_w": self.out_w,
                "out_b": self.out_b,
            }
        )
        self._params = params

    @property
    def embedding_dim(self) -> int:
        return self.config.hidden_size

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def parameter_list(self) -> list[Tensor]:
        return list(self._params.values())

    def freeze(self) -> None:
        for p in self._params.values():
            p.requires_grad = False

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self._params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            p.values = np.array(arrays[name], dtype=np.float64, copy=True)

    def _hidden(self, word_rows: Tensor) -> Tensor:
        n = word_rows.shape[0]
        if n > self.config.max_seq_len:
            raise InputError(f"sequence of {n} tokens exceeds max_seq_len {self.config.max_seq_len}")
        bias = np.triu(np.full((n, n), -1e9), k=1)
        z = word_rows + narrow(self.pos, 0, 0, n)
        for block in self.blocks:
            z = block.forward(z, attn_bias=bias)
        return layer_norm(z, self.final_gain, self.final_bias)

    def _logits(self, hidden: Tensor) -> Tensor:
        return linear(hidden, self.out_w, self.out_b)

    def contextual_embeddings(self, ids) -> Tensor:
        """One hidden-state row per token; depends on the causal prefix."""
        ids = _check_ids(ids, self.config.vocab_size)
        return self._hidden(gather_rows(self.tok_embed, ids))

    def contextual_embeddings_soft(self, probs: Tensor) -> Tensor:
        _check_probs(probs, self.config.vocab_size)
        return self._hidden(matmul(probs, self.tok_embed))

    def nll(self, ids) -> Tensor:
        ids = _check_ids(ids, self.config.vocab_size)
        n = len(ids)
        if n == 1:
            return Tensor(0.0)
        hidden = self._hidden(gather_rows(self.tok_embed, ids))
        logits = self._logits(narrow(hidden, 0, 0, n - 1))
        lsm = log_softmax(logits)
        target = np.zeros((n - 1, self.config.vocab_size))
        target[np.arange(n - 1), ids[1:]] = 1.0
        return -reduce_sum(lsm * Tensor(target)) / float(n - 1)

    def nll_soft(self, probs: Tensor) -> Tensor:
        """Expected NLL of token distributions fed in as expected embeddings."""
        _check_probs(probs, self.config.vocab_size)
        n = probs.shape[0]
        if n == 1:
            return Tensor(0.0)
        hidden = self._hidden(matmul(probs, self.tok_embed))
        logits = self._logits(narrow(hidden, 0, 0, n - 1))
        lsm = log_softmax(logits)
        return -reduce_sum(lsm * narrow(probs, 0, 1, n - 1)) / float(n - 1)

    def next_distribution(self, ids) -> np.ndarray:
        ids = _check_ids(ids, self.config.vocab_size)
        hidden = self._hidden(gather_rows(self.tok_embed, ids))
        logits = self._logits(narrow(hidden, 0, len(ids) - 1, 1))
        z = logits.values[0] - logits.values[0].max()
        e = np.exp(z)
        return e / e.sum()

    def fit(self, corpus: list[np.ndarray], epochs: int = 8, lr: float = 3e-3, batch_size: int = 16, seed: int = 0) -> list[float]:
        """Next-token training on id sequences; returns per-epoch mean NLL."""
        rng = np.random.default_rng(seed)
        usable = [np.asarray(c, dtype=np.int64) for c in corpus if len(c) >= 2]
        if not usable:
            raise InputError("language model training needs sequences of length >= 2")
        opt = Adam(self.parameter_list(), lr=lr)
        history = []
        for _ in range(epochs):
            order = rng.permutation(len(usable))
            total, count = 0.0, 0
            for start in range(0, len(order), batch_size):
                chunk = order[start : start + batch_size]
                loss = reduce_mean(stack_rows([self.nll(usable[j]) for j in chunk]))
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(chunk)
                count += len(chunk)
            history.append(total / count)
        return history


class BigramLanguageModel:
    """Explicit transition table; likelihoods are table lookups."""

    def __init__(self, probs: np.ndarray):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[0] != probs.shape[1]:
            raise InputError(f"bigram table must be square, got shape {probs.shape}")
        rows = probs.sum(axis=1)
        if not np.allclose(rows, 1.0, atol=1e-9):
            raise InputError("bigram table rows must sum to 1")
        self.probs = probs
        self.log_probs = np.log(np.maximum(probs, LOG_FLOOR))

    @property
    def vocab_size(self) -> int:
        return self.probs.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.probs.shape[0]

    @property
    def frozen(self) -> bool:
        return True

    def freeze(self) -> None:
        pass

    @classmethod
    def uniform(cls, vocab_size: int) -> "BigramLanguageModel":
        return cls(np.full((vocab_size, vocab_size), 1.0 / vocab_size))

    @classmethod
    def fit_counts(cls, corpus: list[np.ndarray], vocab_size: int, smoothing: float = 1.0) -> "BigramLanguageModel":
        counts = np.full((vocab_size, vocab_size), smoothing, dtype=np.float64)
        for seq in corpus:
            seq = np.asarray(seq, dtype=np.int64)
            for a, b in zip(seq[:-1], seq[1:]):
                counts[a, b] += 1.0
        return cls(counts / counts.sum(axis=1, keepdims=True))

    def nll(self, ids) -> Tensor:
        ids = _check_ids(ids, self.vocab_size)
        if len(ids) == 1:
            return Tensor(0.0)
        terms = [-self.log_probs[a, b] for a, b in zip(ids[:-1], ids[1:])]
        return Tensor(float(np.mean(terms)))

    def nll_soft(self, probs: Tensor) -> Tensor:
        """Expected transition log-likelihood under independent positions."""
        _check_probs(probs, self.vocab_size)
        n = probs.shape[0]
        if n == 1:
            return Tensor(0.0)
        prev = narrow(probs, 0, 0, n - 1)
        nxt = narrow(probs, 0, 1, n - 1)
        expected = reduce_sum(matmul(prev, Tensor(self.log_probs)) * nxt)
        return -expected / float(n - 1)

    def contextual_embeddings(self, ids) -> Tensor:
        """Static next-token log-probability rows; no actual context."""
        ids = _check_ids(ids, self.vocab_size)
        return gather_rows(Tensor(self.log_probs), ids)

    def contextual_embeddings_soft(self, probs: Tensor) -> Tensor:
        _check_probs(probs, self.vocab_size)
        return matmul(probs, Tensor(self.log_probs))

    def next_distribution(self, ids) -> np.ndarray:
        ids = _check_ids(ids, self.vocab_size)
        return self.probs[ids[-1]].copy()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"table": self.probs.copy()}


def _check_probs(probs: Tensor, vocab_size: int) -> None:
    if not isinstance(probs, Tensor) or probs.ndim != 2 or probs.shape[1] != vocab_size:
        shape = getattr(probs, "shape", None)
        raise InputError(f"expected (n, {vocab_size}) distribution rows, got {shape}")
    if probs.shape[0] == 0:
        raise InputError("language model input must be non-empty")


def build_language_model(config: LMConfig, seed: int = 0):
    if config.kind == "transformer":
        return TransformerLanguageModel(config, seed=seed)
    return BigramLanguageModel.uniform(config.vocab_size)


def lm_from_checkpoint(config_payload: dict, arrays: dict[str, np.ndarray]):
    config = LMConfig(**config_payload)
    if config.kind == "bigram":
        return BigramLanguageModel(arrays["table"])
    model = TransformerLanguageModel(config)
    model.load_state_arrays(arrays)
    return model


def lm_config_dict(model) -> dict:
    if isinstance(model, TransformerLanguageModel):
        return asdict(model.config)
    return {"vocab_size": model.vocab_size, "kind": "bigram"}
