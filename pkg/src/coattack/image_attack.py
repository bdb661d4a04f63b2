"""Sign-gradient projected perturbation of the image modality.

Each step evaluates the cosine between the joint embedding of the
perturbed image and the frozen answer embedding, then moves the
perturbation one signed-gradient step downhill and clips it back into the
L-infinity ball.  The perturbation that produced the lowest similarity is
tracked and returned; the final iterate is kept alongside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import save_png
from .tensor import ParameterError, Tensor, clamp, cosine_similarity

__all__ = [
    "ImageAttackConfig",
    "PerturbationState",
    "ImageAttackResult",
    "random_init",
    "project",
    "attack_step",
    "run_image_attack",
    "save_adversarial_image",
]


@dataclass(frozen=True)
class ImageAttackConfig:
    epsilon: float = 8.0 / 255.0
    alpha: float = 2.0 / 255.0
    steps: int = 20
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.alpha <= self.epsilon):
            raise ParameterError(f"need 0 < alpha <= epsilon, got alpha={self.alpha}, epsilon={self.epsilon}")
        if self.epsilon > 1.0:
            raise ParameterError(f"epsilon {self.epsilon} exceeds the pixel scale")
        if self.steps < 1:
            raise ParameterError("steps must be at least 1")


@dataclass
class PerturbationState:
    delta: np.ndarray
    best_delta: np.ndarray
    best_similarity: float = np.inf
    iteration: int = 0
    trace: list = field(default_factory=list)
    aborted: bool = False


@dataclass
class ImageAttackResult:
    best_delta: np.ndarray
    best_similarity: float
    final_delta: np.ndarray
    trace: list
    aborted: bool


def random_init(shape, epsilon: float, seed: int) -> np.ndarray:
    """Uniform draw from the epsilon ball; epsilon 0 gives the zero tensor."""
    if epsilon < 0:
        raise ParameterError(f"epsilon must be non-negative, got {epsilon}")
    rng = np.random.default_rng(seed)
    return rng.uniform(-epsilon, epsilon, size=shape)


def project(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Entrywise clip into [-epsilon, epsilon]; idempotent."""
    return np.clip(delta, -epsilon, epsilon)


def similarity_at(delta: np.ndarray, sample, surrogate, answer_vec: Tensor, *, track_grad: bool):
    """Cosine at the clamped perturbed image; optionally with a grad leaf."""
    leaf = Tensor(delta, requires_grad=track_grad)
    adv = clamp(Tensor(sample.image) + leaf, 0.0, 1.0)
    sim = cosine_similarity(surrogate.joint_forward(adv, sample.question_ids), answer_vec)
    return sim, leaf


def attack_step(state: PerturbationState, sample, surrogate, answer_vec: Tensor, config: ImageAttackConfig) -> PerturbationState:
    """One evaluate-then-move update of the perturbation state."""
    sim, leaf = similarity_at(state.delta, sample, surrogate, answer_vec, track_grad=True)
    value = sim.item()
    state.trace.append(value)
    if value < state.best_similarity:
        state.best_similarity = value
        state.best_delta = state.delta.copy()
    (-sim).backward()
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(state.delta)
    if not np.isfinite(grad).all():
        state.aborted = True
        return state
    state.delta = project(state.delta + config.alpha * np.sign(grad), config.epsilon)
    state.iteration += 1
    return state


def run_image_attack(sample, surrogate, answer_encoder, config: ImageAttackConfig) -> ImageAttackResult:
    """Full attack from a random in-ball start; frozen encoders required."""
    if not surrogate.frozen or not answer_encoder.frozen:
        raise ParameterError("attack requires frozen encoders")
    answer_vec = answer_encoder.forward(sample.answer_ids)
    delta0 = random_init(sample.image.shape, config.epsilon, config.seed)
    state = PerturbationState(delta=delta0, best_delta=delta0.copy())
    for _ in range(config.steps):
        state = attack_step(state, sample, surrogate, answer_vec, config)
        if state.aborted:
            break
    return ImageAttackResult(
        best_delta=state.best_delta,
        best_similarity=state.best_similarity,
        final_delta=state.delta,
        trace=state.trace,
        aborted=state.aborted,
    )


def save_adversarial_image(png_path, image: np.ndarray) -> None:
    """8-bit preview of a perturbed image; the float tensor is authoritative
    since sub-1/255 perturbations do not survive quantization."""
    save_png(png_path, image)
