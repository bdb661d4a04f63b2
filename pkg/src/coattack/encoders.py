"""Multimodal surrogate encoder and its text-only answer twin.

Both encoders are pre-norm transformer stacks over the shared engine.
The surrogate consumes a class row, position/type-tagged question tokens,
and projected image patches as one sequence; the pooled output is the
class position pushed through a learned projection and tanh.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tensor import (
    Tensor,
    concat,
    extract_patches,
    gather_rows,
    gelu,
    layer_norm,
    linear,
    matmul,
    multi_head_attention,
    narrow,
    reshape,
    tanh,
)


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_size: int = 64
    depth: int = 2
    heads: int = 4
    mlp_size: int = 128
    patch_size: int = 8
    max_seq_len: int = 8
    channels: int = 3
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if min(self.hidden_size, self.depth, self.heads, self.mlp_size, self.max_seq_len) < 1:
            raise ConfigError("all encoder dimensions must be positive")
        if self.hidden_size % self.heads:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by heads {self.heads}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(
                f"image {self.height}x{self.width} not divisible by patch size {self.patch_size}"
            )

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @classmethod
    def full_scale(cls, vocab_size: int, max_seq_len: int = 40) -> "EncoderConfig":
        """ViT-B/32-sized preset: 768 wide, 12 deep, 12 heads, 32px patches."""
        return cls(
            vocab_size=vocab_size,
            hidden_size=768,
            depth=12,
            heads=12,
            mlp_size=3072,
            patch_size=32,
            max_seq_len=max_seq_len,
            channels=3,
            height=224,
            width=224,
        )


def _uniform(rng, shape, scale: float = 0.02) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, shape), requires_grad=True)


def _orthogonal(rng, rows: int, cols: int) -> Tensor:
    """Orthogonal (or orthonormal-row/column) init with canonical signs."""
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.where(np.diag(r) >= 0, 1.0, -1.0)
    return Tensor(q if rows >= cols else q.T, requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class TransformerBlock:
    """Pre-norm multi-head self-attention followed by a gelu MLP."""

    def __init__(self, hidden: int, heads: int, mlp: int, rng):
        self.hidden = hidden
        self.heads = heads
        self.head_dim = hidden // heads
        self.ln1_gain = _ones((hidden,))
        self.ln1_bias = _zeros((hidden,))
        self.qkv_w = _orthogonal(rng, hidden, 3 * hidden)
        self.qkv_b = _zeros((3 * hidden,))
        self.out_w = _orthogonal(rng, hidden, hidden)
        self.out_b = _zeros((hidden,))
        self.ln2_gain = _ones((hidden,))
        self.ln2_bias = _zeros((hidden,))
        self.fc1_w = _orthogonal(rng, hidden, mlp)
        self.fc1_b = _zeros((mlp,))
        self.fc2_w = _orthogonal(rng, mlp, hidden)
        self.fc2_b = _zeros((hidden,))

    def forward(self, x: Tensor, attn_bias: np.ndarray | None = None) -> Tensor:
        h = layer_norm(x, self.ln1_gain, self.ln1_bias)
        qkv = linear(h, self.qkv_w, self.qkv_b)
        context = multi_head_attention(qkv, self.heads, bias=attn_bias)
        x = x + linear(context, self.out_w, self.out_b)
        h2 = layer_norm(x, self.ln2_gain, self.ln2_bias)
        return x + linear(gelu(linear(h2, self.fc1_w, self.fc1_b)), self.fc2_w, self.fc2_b)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        names = (
            "ln1_gain", "ln1_bias", "qkv_w", "qkv_b", "out_w", "out_b",
            "ln2_gain", "ln2_bias", "fc1_w", "fc1_b", "fc2_w", "fc2_b",
        )
        return {f"{prefix}.{n}": getattr(self, n) for n in names}


class _EncoderBase:
    """Shared parameter bookkeeping for both encoder variants."""

    _params: dict[str, Tensor]

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
            src = arrays[name]
            if src.shape != p.values.shape:
                raise ConfigError(f"checkpoint tensor {name} has shape {src.shape}, expected {p.values.shape}")
            p.values = np.array(src, dtype=np.float64, copy=True)

    def parameter_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(self._params[name].values.tobytes())
        return h.hexdigest()


class SurrogateEncoder(_EncoderBase):
    """Image+question encoder; differentiable w.r.t. pixels and soft tokens."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        hd = config.hidden_size
        self.tok_embed = _uniform(rng, (config.vocab_size, hd))
        # Row 0 of the text position table belongs to the class token; the
        # image table keeps the matching extra row unused.
        self.text_pos = _uniform(rng, (config.max_seq_len + 1, hd))
        self.patch_proj = _orthogonal(rng, config.patch_dim, hd)
        self.patch_pos = _uniform(rng, (config.num_patches + 1, hd))
        self.type_text = _uniform(rng, (hd,))
        self.type_image = _uniform(rng, (hd,))
        self.cls_embed = _uniform(rng, (hd,))
        self.blocks = [
            TransformerBlock(hd, config.heads, config.mlp_size, rng) for _ in range(config.depth)
        ]
        self.final_gain = _ones((hd,))
        self.final_bias = _zeros((hd,))
        self.pool_w = _orthogonal(rng, hd, hd)
        self.pool_b = _zeros((hd,))
        params: dict[str, Tensor] = {
            "tok_embed": self.tok_embed,
            "text_pos": self.text_pos,
            "patch_proj": self.patch_proj,
            "patch_pos": self.patch_pos,
            "type_text": self.type_text,
            "type_image": self.type_image,
            "cls_embed": self.cls_embed,
        }
        for i, block in enumerate(self.blocks):
            params.update(block.named_parameters(f"blocks.{i}"))
        params.update(
            {
                "final_gain": self.final_gain,
                "final_bias": self.final_bias,
                "pool_w": self.pool_w,
                "pool_b": self.pool_b,
            }
        )
        self._params = params

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise InputError(f"question ids must be 1-d, got shape {ids.shape}")
        for pos, tok in enumerate(ids):
            if tok < 0 or tok >= self.config.vocab_size:
                raise InputError(f"token id {int(tok)} at position {pos} outside vocabulary")
        if len(ids) > self.config.max_seq_len:
            raise ConfigError(f"question of {len(ids)} tokens exceeds max_seq_len {self.config.max_seq_len}")
        return ids

    def embed_question(self, ids) -> Tensor:
        """Word embedding + token position row + text type vector per token."""
        ids = self._check_ids(ids)
        emb = gather_rows(self.tok_embed, ids)
        return emb + narrow(self.text_pos, 0, 1, len(ids)) + self.type_text

    def patchify_and_embed(self, image) -> Tensor:
        """Row-major patches through the linear projection, plus positions."""
        img = image if isinstance(image, Tensor) else Tensor(image)
        expected = (self.config.channels, self.config.height, self.config.width)
        if img.shape != expected:
            raise ConfigError(f"image shape {img.shape} does not match configured {expected}")
        patches = extract_patches(img, self.config.patch_size)
        n = self.config.num_patches
        return matmul(patches, self.patch_proj) + narrow(self.patch_pos, 0, 1, n) + self.type_image

    def _class_row(self) -> Tensor:
        row = self.cls_embed + narrow(self.text_pos, 0, 0, 1) + self.type_text
        return reshape(row, (1, self.config.hidden_size))

    def joint_forward(self, image, question) -> Tensor:
        """Pooled joint embedding of an image and a (hard or soft) question.

        ``question`` is either a sequence of token ids or a (n, hidden)
        tensor of word-embedding rows (the soft path); position and type
        vectors are added here in both cases, so ids and their exact
        one-hot mixtures produce identical outputs.
        """
        if isinstance(question, Tensor):
            n = question.shape[0]
            if question.ndim != 2 or question.shape[1] != self.config.hidden_size:
                raise InputError(f"soft question must be (n, {self.config.hidden_size}), got {question.shape}")
            if n > self.config.max_seq_len:
                raise ConfigError(
                    f"question of {n} tokens exceeds max_seq_len {self.config.max_seq_len}"
                )
            text = question + narrow(self.text_pos, 0, 1, n) + self.type_text
        else:
            text = self.embed_question(question)
        z = concat([self._class_row(), text, self.patchify_and_embed(image)], axis=0)
        for block in self.blocks:
            z = block.forward(z)
        z = layer_norm(z, self.final_gain, self.final_bias)
        pooled = tanh(linear(narrow(z, 0, 0, 1), self.pool_w, self.pool_b))
        return reshape(pooled, (self.config.hidden_size,))


class AnswerEncoder(_EncoderBase):
    """Text-only twin of the surrogate, pooling a class position."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        hd = config.hidden_size
        self.tok_embed = _uniform(rng, (config.vocab_size, hd))
        self.pos = _uniform(rng, (config.max_seq_len + 1, hd))
        self.cls_embed = _uniform(rng, (hd,))
        self.blocks = [
            TransformerBlock(hd, config.heads, config.mlp_size, rng) for _ in range(config.depth)
        ]
        self.final_gain = _ones((hd,))
        self.final_bias = _zeros((hd,))
        self.pool_w = _orthogonal(rng, hd, hd)
        self.pool_b = _zeros((hd,))
        params: dict[str, Tensor] = {
            "tok_embed": self.tok_embed,
            "pos": self.pos,
            "cls_embed": self.cls_embed,
        }
        for i, block in enumerate(self.blocks):
            params.update(block.named_parameters(f"blocks.{i}"))
        params.update(
            {
                "final_gain": self.final_gain,
                "final_bias": self.final_bias,
                "pool_w": self.pool_w,
                "pool_b": self.pool_b,
            }
        )
        self._params = params

    def forward(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or len(ids) == 0:
            raise InputError("answer ids must be a non-empty 1-d sequence")
        for pos, tok in enumerate(ids):
            if tok < 0 or tok >= self.config.vocab_size:
                raise InputError(f"token id {int(tok)} at position {pos} outside vocabulary")
        if len(ids) > self.config.max_seq_len:
            raise ConfigError(f"answer of {len(ids)} tokens exceeds max_seq_len {self.config.max_seq_len}")
        hd = self.config.hidden_size
        cls_row = reshape(self.cls_embed + narrow(self.pos, 0, 0, 1), (1, hd))
        text = gather_rows(self.tok_embed, ids) + narrow(self.pos, 0, 1, len(ids))
        z = concat([cls_row, text], axis=0)
        for block in self.blocks:
            z = block.forward(z)
        z = layer_norm(z, self.final_gain, self.final_bias)
        pooled = tanh(linear(narrow(z, 0, 0, 1), self.pool_w, self.pool_b))
        return reshape(pooled, (hd,))


def config_to_dict(config: EncoderConfig) -> dict:
    return asdict(config)


def config_from_dict(payload: dict) -> EncoderConfig:
    return EncoderConfig(**payload)
