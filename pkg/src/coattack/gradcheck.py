"""Finite-difference verification of every primitive and the attack path.

Each primitive gets a scalar-valued composite (output contracted against
fixed random cotangents) checked at many random points; the end-to-end
cases differentiate the attack cosine with respect to pixels, soft text
rows, and the distribution logits with the Gumbel noise frozen.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .encoders import EncoderConfig, SurrogateEncoder, AnswerEncoder
from .tensor import Tensor, grad_check
from .text_attack import sample_soft_tokens, soft_embed

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
DEFAULT_POINTS = 25


@dataclass(frozen=True)
class CheckCase:
    name: str
    primitive: str
    build: Callable[[int], tuple]  # seed -> (f, [input arrays])


def _rng(seed: int):
    return np.random.default_rng(1_000_003 + seed)


def _contract(out, w) -> Tensor:
    return T.reduce_sum(T.mul(out, Tensor(w)))


def primitive_cases() -> list[CheckCase]:
    cases: list[CheckCase] = []

    def case(name, primitive):
        def wrap(builder):
            cases.append(CheckCase(name, primitive, builder))
            return builder

        return wrap

    @case("add", "add")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((3, 4))
        return (lambda a, b: _contract(T.add(a, b), w)), [r.standard_normal((3, 4)), r.standard_normal((3, 4))]

    @case("add_broadcast", "add")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((3, 4))
        return (lambda a, b: _contract(T.add(a, b), w)), [r.standard_normal((3, 4)), r.standard_normal((4,))]

    @case("sub", "sub")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((3, 4))
        return (lambda a, b: _contract(T.sub(a, b), w)), [r.standard_normal((3, 4)), r.standard_normal((3, 4))]

    @case("mul", "mul")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((3, 4))
        return (lambda a, b: _contract(T.mul(a, b), w)), [r.standard_normal((3, 4)), r.standard_normal((4,))]

    @case("div", "div")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((3, 4))
        denom = r.uniform(0.7, 1.7, (3, 4)) * np.where(r.uniform(size=(3, 4)) < 0.5, -1.0, 1.0)
        return (lambda a, b: _contract(T.div(a, b), w)), [r.standard_normal((3, 4)), denom]

    @case("neg", "neg")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((5,))
        return (lambda a: _contract(T.neg(a), w)), [r.standard_normal((5,))]

    @case("exp", "exp")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((6,))
        return (lambda a: _contract(T.exp(a), w)), [r.standard_normal((6,))]

    @case("log", "log")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((6,))
        return (lambda a: _contract(T.log(a), w)), [r.uniform(0.2, 2.0, (6,))]

    @case("sqrt", "sqrt")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((6,))
        return (lambda a: _contract(T.sqrt(a), w)), [r.uniform(0.3, 3.0, (6,))]

    @case("tanh", "tanh")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((6,))
        return (lambda a: _contract(T.tanh(a), w)), [r.standard_normal((6,))]

    @case("gelu", "gelu")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((8,))
        return (lambda a: _contract(T.gelu(a), w)), [r.standard_normal((8,))]

    @case("clamp", "clamp")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((12,))
        return (lambda a: _contract(T.clamp(a, -0.25, 0.25), w)), [r.uniform(-0.5, 0.5, (12,))]

    @case("sum_all", "sum")
    def _(seed):
        r = _rng(seed)
        x = r.standard_normal((3, 4))
        return (lambda a: T.reduce_sum(T.mul(a, a))), [x]

    @case("sum_axis", "sum")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((4,))
        return (lambda a: _contract(T.reduce_sum(a, axis=0), w)), [r.standard_normal((3, 4))]

    @case("mean_all", "mean")
    def _(seed):
        r = _rng(seed)
        return (lambda a: T.reduce_mean(T.exp(a))), [r.standard_normal((3, 4))]

    @case("mean_axis", "mean")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((3, 1))
        return (lambda a: _contract(T.reduce_mean(a, axis=1, keepdims=True), w)), [r.standard_normal((3, 4))]

    @case("max_along", "max_along")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((3,))
        return (lambda a: _contract(T.max_along(a, axis=1), w)), [r.standard_normal((3, 5))]

    @case("matmul", "matmul")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((3, 2))
        return (lambda a, b: _contract(T.matmul(a, b), w)), [r.standard_normal((3, 4)), r.standard_normal((4, 2))]

    @case("matmul_vec_left", "matmul")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((2,))
        return (lambda a, b: _contract(T.matmul(a, b), w)), [r.standard_normal((4,)), r.standard_normal((4, 2))]

    @case("matmul_vec_right", "matmul")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((3,))
        return (lambda a, b: _contract(T.matmul(a, b), w)), [r.standard_normal((3, 4)), r.standard_normal((4,))]

    @case("linear", "linear")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((3, 2))
        return (lambda x, m, b: _contract(T.linear(x, m, b), w)), [
            r.standard_normal((3, 4)),
            r.standard_normal((4, 2)),
            r.standard_normal((2,)),
        ]

    @case("multi_head_attention", "multi_head_attention")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((5, 6))
        return (lambda qkv: _contract(T.multi_head_attention(qkv, 2), w)), [r.standard_normal((5, 18))]

    @case("multi_head_attention_masked", "multi_head_attention")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((4, 6))
        bias = np.triu(np.full((4, 4), -1e9), k=1)
        return (lambda qkv: _contract(T.multi_head_attention(qkv, 3, bias=bias), w)), [
            r.standard_normal((4, 18))
        ]

    @case("transpose", "transpose")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((4, 3))
        return (lambda a: _contract(T.transpose(a), w)), [r.standard_normal((3, 4))]

    @case("reshape", "reshape")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((12,))
        return (lambda a: _contract(T.reshape(a, (12,)), w)), [r.standard_normal((3, 4))]

    @case("narrow", "narrow")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((3, 2))
        return (lambda a: _contract(T.narrow(a, 1, 1, 2), w)), [r.standard_normal((3, 4))]

    @case("concat", "concat")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((5, 3))
        return (lambda a, b: _contract(T.concat([a, b], axis=0), w)), [
            r.standard_normal((2, 3)),
            r.standard_normal((3, 3)),
        ]

    @case("gather_rows", "gather_rows")
    def _(seed):
        r = _rng(seed)
        ids = np.array([0, 2, 2, 1])
        w = r.standard_normal((4, 3))
        return (lambda t: _contract(T.gather_rows(t, ids), w)), [r.standard_normal((3, 3))]

    @case("extract_patches", "extract_patches")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((4, 8))
        return (lambda img: _contract(T.extract_patches(img, 2), w)), [r.standard_normal((2, 4, 4))]

    @case("softmax", "softmax")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((3, 5))
        return (lambda a: _contract(T.softmax(a, tau=0.7), w)), [r.standard_normal((3, 5))]

    @case("layer_norm", "layer_norm")
    def _(seed):
        r = _rng(seed)
        w = r.standard_normal((3, 6))
        return (lambda a, g, b: _contract(T.layer_norm(a, g, b), w)), [
            r.standard_normal((3, 6)),
            r.uniform(0.5, 1.5, (6,)),
            r.standard_normal((6,)),
        ]

    return cases


def run_primitive_checks(points: int = DEFAULT_POINTS, step: float = DEFAULT_STEP) -> list[tuple[str, float]]:
    rows = []
    for case in primitive_cases():
        worst = 0.0
        for seed in range(points):
            f, arrays = case.build(seed)
            worst = max(worst, grad_check(f, [Tensor(a) for a in arrays], step=step))
        rows.append((f"primitive/{case.name}", worst))
    return rows


def _toy_stack(vocab_size: int = 31):
    config = EncoderConfig(
        vocab_size=vocab_size, hidden_size=32, depth=1, heads=2, mlp_size=48,
        patch_size=8, max_seq_len=8, channels=3, height=16, width=16,
    )
    surrogate = SurrogateEncoder(config, seed=11)
    answer_encoder = AnswerEncoder(config, seed=12)
    surrogate.freeze()
    answer_encoder.freeze()
    rng = np.random.default_rng(13)
    image = rng.uniform(0.0, 1.0, (3, 16, 16))
    question = rng.integers(0, vocab_size, size=6)
    answer = rng.integers(0, vocab_size, size=4)
    answer_vec = answer_encoder.forward(answer)
    return surrogate, image, question, answer_vec


def end_to_end_cases() -> list[tuple[str, Callable[[], float], float]]:
    """(name, runner, step) triples for the attack-path derivatives."""
    surrogate, image, question, answer_vec = _toy_stack()
    vocab_size = surrogate.config.vocab_size
    rng = np.random.default_rng(17)
    soft_rows = rng.standard_normal((6, surrogate.config.hidden_size)) * 0.05
    theta = np.zeros((6, vocab_size))
    theta[np.arange(6), question] = 5.0
    theta += rng.normal(0.0, 0.1, theta.shape)
    noise = -np.log(-np.log(np.clip(rng.uniform(size=theta.shape), 1e-12, 1 - 1e-12)))

    def pixels() -> float:
        def f(img):
            return T.cosine_similarity(surrogate.joint_forward(img, question), answer_vec)

        return grad_check(f, Tensor(image), step=DEFAULT_STEP)

    def soft_text() -> float:
        def f(rows):
            return T.cosine_similarity(surrogate.joint_forward(Tensor(image), rows), answer_vec)

        return grad_check(f, Tensor(soft_rows), step=DEFAULT_STEP)

    def theta_chain() -> float:
        def f(logits):
            pi = sample_soft_tokens(logits, tau=0.5, noise=noise)
            rows = soft_embed(pi, surrogate.tok_embed)
            return T.cosine_similarity(surrogate.joint_forward(Tensor(image), rows), answer_vec)

        return grad_check(f, Tensor(theta), step=DEFAULT_STEP)

    return [
        ("end_to_end/pixels", pixels, DEFAULT_STEP),
        ("end_to_end/soft_text_rows", soft_text, DEFAULT_STEP),
        ("end_to_end/theta", theta_chain, DEFAULT_STEP),
    ]


def run_all(points: int = DEFAULT_POINTS, tolerance: float = DEFAULT_TOLERANCE) -> tuple[list[tuple[str, float]], bool]:
    rows = run_primitive_checks(points=points)
    for name, runner, _ in end_to_end_cases():
        rows.append((name, runner()))
    ok = all(err < tolerance for _, err in rows)
    return rows, ok


def covered_primitives() -> set[str]:
    return {case.primitive for case in primitive_cases()}
