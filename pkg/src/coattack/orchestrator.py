"""Interleaved image and text perturbation with joint best tracking.

Per outer iteration: sample a soft question from the current logits,
encode it jointly with the currently perturbed image, record the cosine
against the frozen answer embedding, keep the best (perturbation, logits)
pair seen so far, then take one adaptive-moment step on the text logits
and one signed-gradient step on the image perturbation, both from the
same graph.  The best tracker starts from the clean inputs, so the best
similarity can never exceed the clean one.

Victim models are deliberately absent from this module: adversarial
examples are crafted from the surrogate, answer encoder, and language
model alone, and evaluated elsewhere.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .image_attack import ImageAttackConfig, project
from .tensor import ParameterError, Tensor, clamp, cosine_similarity
from .text_attack import (
    AdversarialDistribution,
    TextAttackConfig,
    decode_question,
    sample_soft_tokens,
    semantic_divergence,
    text_objective,
    update_theta,
)
from .optim import Adam

MODES = ("coordinated", "image_only", "text_only")


@dataclass(frozen=True)
class CoordinatedAttackConfig:
    image: ImageAttackConfig = ImageAttackConfig()
    text: TextAttackConfig = TextAttackConfig()
    outer_steps: int = 20
    mode: str = "coordinated"
    decode_mode: str = "argmax"
    decode_score_image: str = "clean"

    def __post_init__(self):
        if self.outer_steps < 1:
            raise ParameterError("outer_steps must be at least 1")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.decode_mode not in ("argmax", "sample"):
            raise ParameterError(f"unknown decode mode {self.decode_mode!r}")
        if self.decode_score_image not in ("clean", "adversarial", "both"):
            raise ParameterError(f"unknown decode score image {self.decode_score_image!r}")


@dataclass
class AdversarialExample:
    sample_id: int
    mode: str
    adv_image: np.ndarray
    delta: np.ndarray
    final_delta: np.ndarray
    decoded_ids: np.ndarray
    clean_similarity: float
    best_similarity: float
    trace: list = field(default_factory=list)
    seed: int = 0
    aborted: bool = False
    decoded_nll: float | None = None
    decoded_divergence: float | None = None

    def validate(self, sample, epsilon: float) -> None:
        if np.max(np.abs(self.adv_image - sample.image)) > epsilon:
            raise ParameterError(f"sample {self.sample_id}: perturbation left the epsilon ball")
        if self.adv_image.min() < 0.0 or self.adv_image.max() > 1.0:
            raise ParameterError(f"sample {self.sample_id}: adversarial image outside [0, 1]")
        if len(self.decoded_ids) != len(sample.question_ids):
            raise ParameterError(f"sample {self.sample_id}: decoded question changed length")
        if not self.aborted and self.best_similarity > self.clean_similarity:
            raise ParameterError(f"sample {self.sample_id}: best similarity exceeds clean similarity")


def derive_sample_seed(global_seed: int, sample_id: int) -> int:
    """Stable per-sample seed so parallel runs reproduce bit-for-bit."""
    digest = hashlib.sha256(f"{global_seed}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def run_coordinated_attack(sample, surrogate, answer_encoder, lm, config: CoordinatedAttackConfig, seed: int) -> AdversarialExample:
    if not surrogate.frozen or not answer_encoder.frozen:
        raise ParameterError("attack requires frozen encoders")
    text_active = config.mode in ("coordinated", "text_only")
    image_active = config.mode in ("coordinated", "image_only")
    tcfg, icfg = config.text, config.image
    if text_active and lm is None and (tcfg.lm_weight > 0 or tcfg.sim_weight > 0):
        raise ParameterError("text attack penalties need a language model")
    if lm is not None and not lm.frozen:
        raise ParameterError("attack requires a frozen language model")

    rng = np.random.default_rng(seed)
    answer_vec = answer_encoder.forward(sample.answer_ids)
    clean_similarity = cosine_similarity(
        surrogate.joint_forward(sample.image, sample.question_ids), answer_vec
    ).item()

    delta = np.zeros_like(sample.image)
    dist = None
    theta_opt = None
    if text_active:
        dist = AdversarialDistribution.from_clean_question(
            sample.question_ids, surrogate.config.vocab_size, tcfg, rng
        )
        theta_opt = Adam([dist.logits], lr=tcfg.lr)

    best_similarity = clean_similarity
    best_delta = delta.copy()
    best_theta = dist.logits.values.copy() if text_active else None
    trace: list[dict] = []
    aborted = False

    def evaluate(with_image_grad: bool):
        """One forward pass at the current delta and a fresh soft sample."""
        if image_active and with_image_grad:
            leaf = Tensor(delta, requires_grad=True)
            adv = clamp(Tensor(sample.image) + leaf, 0.0, 1.0)
        else:
            leaf = None
            adv = clamp(Tensor(sample.image + delta), 0.0, 1.0)
        if text_active:
            pi = sample_soft_tokens(dist.logits, tcfg.tau, rng)
            objective, parts = text_objective(pi, sample, surrogate, answer_vec, lm, tcfg, adv_image=adv)
        else:
            cos = cosine_similarity(surrogate.joint_forward(adv, sample.question_ids), answer_vec)
            objective = cos
            parts = {"cosine": cos.item(), "nll": None, "divergence": None, "objective": cos.item()}
        return objective, parts, leaf

    for outer in range(config.outer_steps):
        objective, parts, leaf = evaluate(with_image_grad=True)
        trace.append({"iteration": outer, "inner": 0, **parts})
        if parts["cosine"] < best_similarity:
            best_similarity = parts["cosine"]
            best_delta = delta.copy()
            if text_active:
                best_theta = dist.logits.values.copy()
        if text_active:
            dist.logits.zero_grad()
        objective.backward()
        if text_active and not update_theta(dist.logits, theta_opt):
            aborted = True
            break
        if image_active:
            grad = leaf.grad if leaf is not None and leaf.grad is not None else np.zeros_like(delta)
            if not np.isfinite(grad).all():
                aborted = True
                break
            delta = project(delta + icfg.alpha * np.sign(-grad), icfg.epsilon)
        # Optional extra text refinements against the freshly moved image.
        if text_active:
            for inner in range(1, tcfg.inner_steps):
                objective, parts, _ = evaluate(with_image_grad=False)
                trace.append({"iteration": outer, "inner": inner, **parts})
                if parts["cosine"] < best_similarity:
                    best_similarity = parts["cosine"]
                    best_delta = delta.copy()
                    best_theta = dist.logits.values.copy()
                dist.logits.zero_grad()
                objective.backward()
                if not update_theta(dist.logits, theta_opt):
                    aborted = True
                    break
        if aborted:
            break

    adv_image = np.clip(sample.image + best_delta, 0.0, 1.0)
    if text_active:
        if config.decode_mode == "argmax":
            decoded = decode_question(best_theta, "argmax").ids
        else:
            # Ranking candidates against the perturbed image alone washes
            # out their differences (every candidate already scores low),
            # so the clean view is included by default.
            if config.decode_score_image == "clean":
                views = [sample.image]
            elif config.decode_score_image == "adversarial":
                views = [adv_image]
            else:
                views = [sample.image, adv_image]

            def score_fn(ids) -> float:
                return sum(
                    cosine_similarity(surrogate.joint_forward(view, ids), answer_vec).item()
                    for view in views
                )

            decoded = decode_question(
                best_theta, "sample", k=tcfg.decode_samples, rng=rng, score_fn=score_fn
            ).ids
    else:
        decoded = np.asarray(sample.question_ids, dtype=np.int64).copy()

    decoded_nll = decoded_divergence = None
    if lm is not None:
        decoded_nll = lm.nll(decoded).item()
        decoded_divergence = semantic_divergence(sample.question_ids, decoded, lm).item()

    example = AdversarialExample(
        sample_id=sample.sample_id,
        mode=config.mode,
        adv_image=adv_image,
        delta=best_delta,
        final_delta=delta,
        decoded_ids=decoded,
        clean_similarity=clean_similarity,
        best_similarity=best_similarity,
        trace=trace,
        seed=seed,
        aborted=aborted,
        decoded_nll=decoded_nll,
        decoded_divergence=decoded_divergence,
    )
    example.validate(sample, icfg.epsilon)
    return example


def penalty_sweep(
    samples,
    surrogate,
    answer_encoder,
    lm,
    config: CoordinatedAttackConfig,
    vary: str,
    values,
    seeds,
) -> dict:
    """Mean decoded divergence and NLL as one penalty weight varies.

    Runs the text-only attack with argmax decoding for every (sample,
    seed) pair at each weight; everything else in ``config`` is held
    fixed.  Used to demonstrate that strengthening a constraint does not
    worsen the quantity it constrains.
    """
    from dataclasses import replace

    if vary not in ("sim", "lm"):
        raise ParameterError(f"vary must be 'sim' or 'lm', got {vary!r}")
    out: dict = {}
    for value in values:
        text = replace(
            config.text,
            sim_weight=value if vary == "sim" else config.text.sim_weight,
            lm_weight=value if vary == "lm" else config.text.lm_weight,
        )
        sweep_config = replace(config, text=text, mode="text_only", decode_mode="argmax")
        rhos, nlls = [], []
        for sample in samples:
            for seed in seeds:
                ex = run_coordinated_attack(
                    sample, surrogate, answer_encoder, lm, sweep_config,
                    derive_sample_seed(seed, sample.sample_id),
                )
                rhos.append(ex.decoded_divergence)
                nlls.append(ex.decoded_nll)
        out[value] = {"divergence": float(np.mean(rhos)), "nll": float(np.mean(nlls))}
    return out


_WORKER_STATE: dict = {}


def _init_attack_worker(surrogate, answer_encoder, lm, config, global_seed) -> None:
    _WORKER_STATE["args"] = (surrogate, answer_encoder, lm, config, global_seed)


def _attack_one(sample) -> AdversarialExample:
    surrogate, answer_encoder, lm, config, global_seed = _WORKER_STATE["args"]
    return run_coordinated_attack(
        sample, surrogate, answer_encoder, lm, config, derive_sample_seed(global_seed, sample.sample_id)
    )


def run_attacks(samples, surrogate, answer_encoder, lm, config: CoordinatedAttackConfig, global_seed: int, workers: int = 1) -> list[AdversarialExample]:
    """Per-sample attacks with stable hashed seeds; optionally pooled.

    Results are ordered by sample id either way, so the worker count never
    changes the output bytes.
    """
    if workers <= 1 or len(samples) <= 1:
        return [
            run_coordinated_attack(
                s, surrogate, answer_encoder, lm, config, derive_sample_seed(global_seed, s.sample_id)
            )
            for s in samples
        ]
    import multiprocessing as mp

    ctx = mp.get_context("fork")
    with ctx.Pool(
        processes=workers,
        initializer=_init_attack_worker,
        initargs=(surrogate, answer_encoder, lm, config, global_seed),
    ) as pool:
        results = pool.map(_attack_one, samples, chunksize=4)
    return sorted(results, key=lambda ex: ex.sample_id)
