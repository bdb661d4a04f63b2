"""Independently initialized victim models for transfer evaluation.

A victim is a multimodal encoder of its own width/depth/seed with a
linear classification head over the answer-word vocabulary.  Victims are
trained with cross entropy on the synthetic triplets and must clear a
held-out accuracy bar before they may be used for success-rate numbers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .encoders import EncoderConfig, SurrogateEncoder, _orthogonal, _zeros
from .optim import Adam
from .tensor import Tensor, log_softmax, matmul, narrow, reduce_mean, reshape, stack_rows


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class VictimConfig:
    name: str
    encoder: EncoderConfig
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 40
    target_accuracy: float = 0.95
    early_stop_accuracy: float = 0.97


class ToyVictim:
    def __init__(self, config: VictimConfig, n_answers: int):
        self.config = config
        self.n_answers = n_answers
        self.encoder = SurrogateEncoder(config.encoder, seed=config.seed)
        rng = np.random.default_rng(config.seed + 104729)
        self.head_w = _orthogonal(rng, config.encoder.hidden_size, n_answers)
        self.head_b = _zeros((n_answers,))

    def parameter_list(self) -> list[Tensor]:
        return self.encoder.parameter_list() + [self.head_w, self.head_b]

    def freeze(self) -> None:
        self.encoder.freeze()
        self.head_w.requires_grad = False
        self.head_b.requires_grad = False

    def logits(self, image, question_ids) -> Tensor:
        pooled = self.encoder.joint_forward(image, question_ids)
        return matmul(pooled, self.head_w) + self.head_b

    def response(self, image, question_ids) -> int:
        """Deterministic argmax answer id."""
        return int(np.argmax(self.logits(image, question_ids).values))

    def accuracy(self, samples) -> float:
        hits = sum(1 for s in samples if self.response(s.image, s.question_ids) == s.label)
        return hits / len(samples)

    def parameter_hash(self) -> str:
        import hashlib

        h = hashlib.sha256(self.encoder.parameter_hash().encode())
        h.update(self.head_w.values.tobytes())
        h.update(self.head_b.values.tobytes())
        return h.hexdigest()

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"encoder.{k}": v for k, v in self.encoder.state_arrays().items()}
        arrays["head_w"] = self.head_w.values.copy()
        arrays["head_b"] = self.head_b.values.copy()
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.encoder.load_state_arrays(
            {k[len("encoder.") :]: v for k, v in arrays.items() if k.startswith("encoder.")}
        )
        self.head_w.values = np.array(arrays["head_w"], copy=True)
        self.head_b.values = np.array(arrays["head_b"], copy=True)


def victim_response(victim: ToyVictim, image, question_ids) -> int:
    return victim.response(image, question_ids)


def train_toy_victim(train_samples, val_samples, config: VictimConfig, n_answers: int) -> ToyVictim:
    """Cross-entropy training to the held-out accuracy target.

    Raises TrainingError naming the achieved accuracy if the target is
    still unmet after ``max_epochs``.
    """
    victim = ToyVictim(config, n_answers)
    opt = Adam(victim.parameter_list(), lr=config.lr)
    rng = np.random.default_rng(config.seed + 7)
    accuracy = 0.0
    decay_epoch = max(1, int(config.max_epochs * 0.55))
    for epoch in range(config.max_epochs):
        if epoch == decay_epoch:
            opt.lr = config.lr / 3.0
        order = rng.permutation(len(train_samples))
        for start in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[start : start + config.batch_size]]
            losses = []
            for s in batch:
                lsm = log_softmax(victim.logits(s.image, s.question_ids))
                losses.append(-reshape(narrow(lsm, 0, s.label, 1), ()))
            loss = reduce_mean(stack_rows(losses))
            opt.zero_grad()
            loss.backward()
            opt.step()
        accuracy = victim.accuracy(val_samples)
        if accuracy >= config.early_stop_accuracy:
            break
    if accuracy < config.target_accuracy:
        raise TrainingError(
            f"victim {config.name!r} reached held-out accuracy {accuracy:.4f}, "
            f"below the required {config.target_accuracy:.2f}"
        )
    victim.freeze()
    return victim


def save_victim(path, victim: ToyVictim) -> None:
    config = {
        "format": "victim-v1",
        "name": victim.config.name,
        "seed": victim.config.seed,
        "encoder": asdict(victim.config.encoder),
        "n_answers": victim.n_answers,
    }
    save_checkpoint(path, config, victim.state_arrays())


def load_victim(path) -> ToyVictim:
    config, tensors = load_checkpoint(path)
    if config.get("format") != "victim-v1":
        raise TrainingError(f"unexpected victim checkpoint format {config.get('format')!r}")
    vcfg = VictimConfig(
        name=config["name"], encoder=EncoderConfig(**config["encoder"]), seed=config["seed"]
    )
    victim = ToyVictim(vcfg, config["n_answers"])
    victim.load_state_arrays(tensors)
    victim.freeze()
    return victim
