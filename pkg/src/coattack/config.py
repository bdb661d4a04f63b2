"""Workbench run configuration: flat key=value sections on disk.

The file format is plain INI (section headers, key = value lines) parsed
with the standard library.  Fractions like ``8/255`` are accepted
wherever a float is expected, since perturbation budgets read better that
way.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .align import AlignmentConfig
from .dataset import DatasetSpec
from .encoders import EncoderConfig
from .image_attack import ImageAttackConfig
from .lm import LMConfig
from .orchestrator import CoordinatedAttackConfig
from .text_attack import TextAttackConfig
from .victims import VictimConfig
from .vocab import Vocabulary


class ConfigFileError(ValueError):
    pass


def parse_number(text: str) -> float:
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


@dataclass(frozen=True)
class EncoderDims:
    hidden_size: int = 64
    depth: int = 2
    heads: int = 4
    mlp_size: int = 128
    patch_size: int = 8
    max_seq_len: int = 8


@dataclass(frozen=True)
class VictimDims:
    name: str
    hidden_size: int
    depth: int
    heads: int
    mlp_size: int
    seed: int


@dataclass(frozen=True)
class LMSettings:
    kind: str = "transformer"
    hidden_size: int = 32
    depth: int = 1
    heads: int = 2
    mlp_size: int = 64
    epochs: int = 8
    lr: float = 3e-3


@dataclass(frozen=True)
class EvalSettings:
    n_eval: int = 100
    victim_lr: float = 1e-3
    victim_batch_size: int = 32
    victim_max_epochs: int = 40
    victim_target_accuracy: float = 0.95
    victim_early_stop: float = 0.97


@dataclass(frozen=True)
class RunConfig:
    data_dir: str = "data"
    checkpoint_dir: str = "ckpt"
    report_dir: str = "out"
    global_seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    encoder: EncoderDims = field(default_factory=EncoderDims)
    lm: LMSettings = field(default_factory=LMSettings)
    # Temperature 0.1 inside the similarity exponent: the plain objective
    # (temperature 1) trains an order of magnitude slower at this scale.
    alignment: AlignmentConfig = field(
        default_factory=lambda: AlignmentConfig(temperature=0.1, seed=4)
    )
    # The text-attack module default lr follows the aligned-training value;
    # at workbench scale the logits start five units from any flip, so the
    # pipeline default uses a larger step, several inner refinements, and
    # sampled decoding scored by the cosine term.
    attack: CoordinatedAttackConfig = field(
        default_factory=lambda: CoordinatedAttackConfig(
            text=TextAttackConfig(lr=0.18, inner_steps=4, decode_samples=12),
            decode_mode="sample",
        )
    )
    victims: tuple = (
        VictimDims("vilt_toy", 64, 2, 4, 128, 101),
        VictimDims("blip_toy", 48, 3, 4, 96, 202),
        VictimDims("git_toy", 80, 2, 4, 160, 303),
    )
    evaluation: EvalSettings = field(default_factory=EvalSettings)

    # Derived seeds for the pipeline stages, all rooted at global_seed.
    @property
    def dataset_seed(self) -> int:
        return self.global_seed

    @property
    def surrogate_seed(self) -> int:
        return self.global_seed + 1

    @property
    def answer_seed(self) -> int:
        return self.global_seed + 2

    @property
    def lm_seed(self) -> int:
        return self.global_seed + 3

    @property
    def align_seed(self) -> int:
        return self.global_seed + 4

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            global_seed=seed,
            dataset=replace(self.dataset, seed=seed),
            alignment=replace(self.alignment, seed=seed + 4),
        )

    def encoder_config(self, vocab_size: int | None = None) -> EncoderConfig:
        vocab_size = vocab_size if vocab_size is not None else len(Vocabulary())
        return EncoderConfig(
            vocab_size=vocab_size,
            hidden_size=self.encoder.hidden_size,
            depth=self.encoder.depth,
            heads=self.encoder.heads,
            mlp_size=self.encoder.mlp_size,
            patch_size=self.encoder.patch_size,
            max_seq_len=self.encoder.max_seq_len,
            channels=3,
            height=self.dataset.image_size,
            width=self.dataset.image_size,
        )

    def lm_config(self, vocab_size: int | None = None) -> LMConfig:
        vocab_size = vocab_size if vocab_size is not None else len(Vocabulary())
        return LMConfig(
            vocab_size=vocab_size,
            kind=self.lm.kind,
            hidden_size=self.lm.hidden_size,
            depth=self.lm.depth,
            heads=self.lm.heads,
            mlp_size=self.lm.mlp_size,
            max_seq_len=self.encoder.max_seq_len,
        )

    def victim_configs(self, vocab_size: int | None = None) -> list[VictimConfig]:
        vocab_size = vocab_size if vocab_size is not None else len(Vocabulary())
        out = []
        for dims in self.victims:
            enc = EncoderConfig(
                vocab_size=vocab_size,
                hidden_size=dims.hidden_size,
                depth=dims.depth,
                heads=dims.heads,
                mlp_size=dims.mlp_size,
                patch_size=self.encoder.patch_size,
                max_seq_len=self.encoder.max_seq_len,
                channels=3,
                height=self.dataset.image_size,
                width=self.dataset.image_size,
            )
            out.append(
                VictimConfig(
                    name=dims.name,
                    encoder=enc,
                    seed=dims.seed,
                    lr=self.evaluation.victim_lr,
                    batch_size=self.evaluation.victim_batch_size,
                    max_epochs=self.evaluation.victim_max_epochs,
                    target_accuracy=self.evaluation.victim_target_accuracy,
                    early_stop_accuracy=self.evaluation.victim_early_stop,
                )
            )
        return out

    def snapshot(self) -> dict:
        """Plain-dict view for report embedding; paths kept as configured."""
        return {
            "paths": {
                "data_dir": self.data_dir,
                "checkpoint_dir": self.checkpoint_dir,
                "report_dir": self.report_dir,
            },
            "global_seed": self.global_seed,
            "dataset": asdict(self.dataset),
            "encoder": asdict(self.encoder),
            "lm": asdict(self.lm),
            "alignment": asdict(self.alignment),
            "attack": asdict(self.attack),
            "victims": [asdict(v) for v in self.victims],
            "evaluation": asdict(self.evaluation),
        }


def load_run_config(path) -> RunConfig:
    """Overlay a key=value file onto the defaults."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = parser.read(path)
    if not read:
        raise ConfigFileError(f"config file {path} not found or unreadable")
    base = RunConfig()

    def get(section, key, cast, fallback):
        if parser.has_option(section, key):
            raw = parser.get(section, key)
            if cast is bool:
                return parser.getboolean(section, key)
            if cast is float:
                return parse_number(raw)
            return cast(raw)
        return fallback

    data_dir = get("paths", "data_dir", str, base.data_dir)
    checkpoint_dir = get("paths", "checkpoint_dir", str, base.checkpoint_dir)
    report_dir = get("paths", "report_dir", str, base.report_dir)
    global_seed = get("run", "global_seed", int, base.global_seed)

    dataset = DatasetSpec(
        n_samples=get("dataset", "n_samples", int, base.dataset.n_samples),
        image_size=get("dataset", "image_size", int, base.dataset.image_size),
        grid=get("dataset", "grid", int, base.dataset.grid),
        distractor_rate=get("dataset", "distractor_rate", float, base.dataset.distractor_rate),
        seed=get("dataset", "seed", int, global_seed),
    )
    encoder = EncoderDims(
        hidden_size=get("encoder", "hidden_size", int, base.encoder.hidden_size),
        depth=get("encoder", "depth", int, base.encoder.depth),
        heads=get("encoder", "heads", int, base.encoder.heads),
        mlp_size=get("encoder", "mlp_size", int, base.encoder.mlp_size),
        patch_size=get("encoder", "patch_size", int, base.encoder.patch_size),
        max_seq_len=get("encoder", "max_seq_len", int, base.encoder.max_seq_len),
    )
    lm = LMSettings(
        kind=get("lm", "kind", str, base.lm.kind),
        hidden_size=get("lm", "hidden_size", int, base.lm.hidden_size),
        depth=get("lm", "depth", int, base.lm.depth),
        heads=get("lm", "heads", int, base.lm.heads),
        mlp_size=get("lm", "mlp_size", int, base.lm.mlp_size),
        epochs=get("lm", "epochs", int, base.lm.epochs),
        lr=get("lm", "lr", float, base.lm.lr),
    )
    alignment = AlignmentConfig(
        batch_size=get("alignment", "batch_size", int, base.alignment.batch_size),
        epochs=get("alignment", "epochs", int, base.alignment.epochs),
        lr=get("alignment", "lr", float, base.alignment.lr),
        seed=get("alignment", "seed", int, global_seed + 4),
        temperature=get("alignment", "temperature", float, base.alignment.temperature),
        eval_batch=get("alignment", "eval_batch", int, base.alignment.eval_batch),
        early_stop_accuracy=get("alignment", "early_stop_accuracy", float, base.alignment.early_stop_accuracy),
    )
    image_attack = ImageAttackConfig(
        epsilon=get("image_attack", "epsilon", float, base.attack.image.epsilon),
        alpha=get("image_attack", "alpha", float, base.attack.image.alpha),
        steps=get("image_attack", "steps", int, base.attack.image.steps),
    )
    text_attack = TextAttackConfig(
        tau=get("text_attack", "tau", float, base.attack.text.tau),
        lm_weight=get("text_attack", "lm_weight", float, base.attack.text.lm_weight),
        sim_weight=get("text_attack", "sim_weight", float, base.attack.text.sim_weight),
        lr=get("text_attack", "lr", float, base.attack.text.lr),
        inner_steps=get("text_attack", "inner_steps", int, base.attack.text.inner_steps),
        decode_samples=get("text_attack", "decode_samples", int, base.attack.text.decode_samples),
        init_scale=get("text_attack", "init_scale", float, base.attack.text.init_scale),
        init_noise=get("text_attack", "init_noise", float, base.attack.text.init_noise),
    )
    attack = CoordinatedAttackConfig(
        image=image_attack,
        text=text_attack,
        outer_steps=get("attack", "outer_steps", int, base.attack.outer_steps),
        mode=get("attack", "mode", str, base.attack.mode),
        decode_mode=get("attack", "decode_mode", str, base.attack.decode_mode),
    )
    victims: list[VictimDims] = []
    count = get("victims", "count", int, len(base.victims))
    for i in range(1, count + 1):
        default = base.victims[i - 1] if i <= len(base.victims) else base.victims[-1]
        victims.append(
            VictimDims(
                name=get("victims", f"name_{i}", str, default.name),
                hidden_size=get("victims", f"hidden_{i}", int, default.hidden_size),
                depth=get("victims", f"depth_{i}", int, default.depth),
                heads=get("victims", f"heads_{i}", int, default.heads),
                mlp_size=get("victims", f"mlp_{i}", int, default.mlp_size),
                seed=get("victims", f"seed_{i}", int, default.seed),
            )
        )
    evaluation = EvalSettings(
        n_eval=get("eval", "n_eval", int, base.evaluation.n_eval),
        victim_lr=get("eval", "victim_lr", float, base.evaluation.victim_lr),
        victim_batch_size=get("eval", "victim_batch", int, base.evaluation.victim_batch_size),
        victim_max_epochs=get("eval", "victim_max_epochs", int, base.evaluation.victim_max_epochs),
        victim_target_accuracy=get("eval", "victim_target_accuracy", float, base.evaluation.victim_target_accuracy),
        victim_early_stop=get("eval", "victim_early_stop", float, base.evaluation.victim_early_stop),
    )
    return RunConfig(
        data_dir=data_dir,
        checkpoint_dir=checkpoint_dir,
        report_dir=report_dir,
        global_seed=global_seed,
        dataset=dataset,
        encoder=encoder,
        lm=lm,
        alignment=alignment,
        attack=attack,
        victims=tuple(victims),
        evaluation=evaluation,
    )


def write_run_config(path, config: RunConfig) -> None:
    """Emit the full flat key=value view of a RunConfig."""
    lines = [
        "[paths]",
        f"data_dir = {config.data_dir}",
        f"checkpoint_dir = {config.checkpoint_dir}",
        f"report_dir = {config.report_dir}",
        "",
        "[run]",
        f"global_seed = {config.global_seed}",
        "",
        "[dataset]",
        f"n_samples = {config.dataset.n_samples}",
        f"image_size = {config.dataset.image_size}",
        f"grid = {config.dataset.grid}",
        f"distractor_rate = {config.dataset.distractor_rate}",
        f"seed = {config.dataset.seed}",
        "",
        "[encoder]",
        f"hidden_size = {config.encoder.hidden_size}",
        f"depth = {config.encoder.depth}",
        f"heads = {config.encoder.heads}",
        f"mlp_size = {config.encoder.mlp_size}",
        f"patch_size = {config.encoder.patch_size}",
        f"max_seq_len = {config.encoder.max_seq_len}",
        "",
        "[lm]",
        f"kind = {config.lm.kind}",
        f"hidden_size = {config.lm.hidden_size}",
        f"depth = {config.lm.depth}",
        f"heads = {config.lm.heads}",
        f"mlp_size = {config.lm.mlp_size}",
        f"epochs = {config.lm.epochs}",
        f"lr = {config.lm.lr}",
        "",
        "[alignment]",
        f"batch_size = {config.alignment.batch_size}",
        f"epochs = {config.alignment.epochs}",
        f"lr = {config.alignment.lr}",
        f"seed = {config.alignment.seed}",
        f"temperature = {config.alignment.temperature}",
        f"eval_batch = {config.alignment.eval_batch}",
        f"early_stop_accuracy = {config.alignment.early_stop_accuracy}",
        "",
        "[image_attack]",
        f"epsilon = {config.attack.image.epsilon}",
        f"alpha = {config.attack.image.alpha}",
        f"steps = {config.attack.image.steps}",
        "",
        "[text_attack]",
        f"tau = {config.attack.text.tau}",
        f"lm_weight = {config.attack.text.lm_weight}",
        f"sim_weight = {config.attack.text.sim_weight}",
        f"lr = {config.attack.text.lr}",
        f"inner_steps = {config.attack.text.inner_steps}",
        f"decode_samples = {config.attack.text.decode_samples}",
        f"init_scale = {config.attack.text.init_scale}",
        f"init_noise = {config.attack.text.init_noise}",
        "",
        "[attack]",
        f"outer_steps = {config.attack.outer_steps}",
        f"mode = {config.attack.mode}",
        f"decode_mode = {config.attack.decode_mode}",
        "",
        "[victims]",
        f"count = {len(config.victims)}",
    ]
    for i, v in enumerate(config.victims, start=1):
        lines.extend(
            [
                f"name_{i} = {v.name}",
                f"hidden_{i} = {v.hidden_size}",
                f"depth_{i} = {v.depth}",
                f"heads_{i} = {v.heads}",
                f"mlp_{i} = {v.mlp_size}",
                f"seed_{i} = {v.seed}",
            ]
        )
    lines.extend(
        [
            "",
            "[eval]",
            f"n_eval = {config.evaluation.n_eval}",
            f"victim_lr = {config.evaluation.victim_lr}",
            f"victim_batch = {config.evaluation.victim_batch_size}",
            f"victim_max_epochs = {config.evaluation.victim_max_epochs}",
            f"victim_target_accuracy = {config.evaluation.victim_target_accuracy}",
            f"victim_early_stop = {config.evaluation.victim_early_stop}",
            "",
        ]
    )
    Path(path).write_text("\n".join(lines), encoding="utf-8")
