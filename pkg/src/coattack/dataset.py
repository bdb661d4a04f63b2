"""Synthetic grid-of-shapes VQA triplets: images, questions, answers.

Each image is a grid of colored shapes on a black background.  Questions
come from three templates (color of a unique shape, count of a shape,
presence of a color+shape pair); answers are drawn answer-first through
round-robin queues so the answer marginal stays near uniform within each
template family.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .align import ANSWER_TEMPLATE, expand_answer
from .tensor import read_tensor, write_tensor
from .vocab import ANSWER_WORDS, COLOR_WORDS, COUNT_WORDS, SHAPE_PLURALS, SHAPE_WORDS, Vocabulary

# Two color pairs (red/orange and blue/purple) sit a small single-channel
# gap apart, comparable to the attack's pixel budget, so pixel-space
# perturbations can cross real decision boundaries the way they do against
# full-scale models; the remaining colors stay far apart.
COLOR_RGB = {
    "red": (0.90, 0.100, 0.10),
    "orange": (0.90, 0.155, 0.10),
    "yellow": (0.85, 0.85, 0.10),
    "green": (0.10, 0.80, 0.10),
    "cyan": (0.10, 0.80, 0.86),
    "blue": (0.10, 0.14, 0.900),
    "purple": (0.155, 0.14, 0.900),
    "magenta": (0.85, 0.10, 0.85),
}

MAX_SCENE_RETRIES = 100


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    n_samples: int = 2000
    image_size: int = 32
    grid: int = 2
    shapes: tuple = SHAPE_WORDS
    colors: tuple = COLOR_WORDS
    templates: tuple = ("color", "count", "presence")
    split_fractions: tuple = (0.8, 0.1, 0.1)
    distractor_rate: float = 0.5
    max_count: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 0:
            raise DatasetError("n_samples must be non-negative")
        if self.image_size % self.grid:
            raise DatasetError(f"image_size {self.image_size} not divisible by grid {self.grid}")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise DatasetError("split fractions must sum to 1")
        unknown = set(self.colors) - set(COLOR_RGB)
        if unknown:
            raise DatasetError(f"unknown colors {sorted(unknown)}")
        if set(self.shapes) - set(SHAPE_WORDS):
            raise DatasetError(f"unknown shapes {set(self.shapes) - set(SHAPE_WORDS)}")
        if not (1 <= self.max_count <= min(self.grid * self.grid, len(COUNT_WORDS) - 1)):
            raise DatasetError(f"max_count {self.max_count} outside the representable range")
        if not set(self.templates) <= {"color", "count", "presence"}:
            raise DatasetError(f"unknown templates in {self.templates}")

    @property
    def cell(self) -> int:
        return self.image_size // self.grid


@dataclass
class TripletSample:
    """One (image, question, answer) triple plus the victim label."""

    sample_id: int
    split: str
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    question: str
    question_ids: np.ndarray
    answer_word: str
    answer_text: str
    answer_ids: np.ndarray
    label: int
    template: str
    scene: list = field(default_factory=list)

    def validate(self) -> None:
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise DatasetError(f"sample {self.sample_id}: pixels outside [0, 1]")
        if len(self.question_ids) == 0 or len(self.answer_ids) == 0:
            raise DatasetError(f"sample {self.sample_id}: empty question or answer")
        if self.answer_word not in ANSWER_WORDS:
            raise DatasetError(f"sample {self.sample_id}: answer {self.answer_word!r} not a known answer word")


@lru_cache(maxsize=None)
def _shape_mask(shape: str, cell: int) -> np.ndarray:
    m = np.zeros((cell, cell), dtype=bool)
    if shape == "square":
        m[1 : cell - 1, 1 : cell - 1] = True
    elif shape == "circle":
        c = (cell - 1) / 2.0
        yy, xx = np.mgrid[0:cell, 0:cell]
        m[(yy - c) ** 2 + (xx - c) ** 2 <= (0.33 * cell) ** 2] = True
    elif shape == "triangle":
        top, bottom = 2, cell - 3
        center = (cell - 1) / 2.0
        max_half = center - 1.5
        for r in range(top, bottom + 1):
            half = max_half * (r - top) / (bottom - top)
            lo = int(np.ceil(center - half))
            hi = int(np.floor(center + half))
            m[r, lo : hi + 1] = True
    else:
        raise DatasetError(f"unknown shape {shape!r}")
    return m


def render_scene(scene, spec: DatasetSpec) -> np.ndarray:
    """Paint (cell_index, shape, color) objects onto a black canvas."""
    img = np.zeros((3, spec.image_size, spec.image_size), dtype=np.float64)
    for cell_idx, shape, color in scene:
        gy, gx = divmod(int(cell_idx), spec.grid)
        y0, x0 = gy * spec.cell, gx * spec.cell
        mask = _shape_mask(shape, spec.cell)
        rgb = COLOR_RGB[color]
        for ch in range(3):
            img[ch, y0 : y0 + spec.cell, x0 : x0 + spec.cell][mask] = rgb[ch]
    return img


def scene_answer(template: str, asked_shape, asked_color, scene) -> str | None:
    """Ground truth for a question against a scene; None if unanswerable."""
    if template == "color":
        hits = {color for _, shape, color in scene if shape == asked_shape}
        return hits.pop() if len(hits) == 1 else None
    if template == "count":
        return COUNT_WORDS[sum(1 for _, shape, _ in scene if shape == asked_shape)]
    if template == "presence":
        found = any(shape == asked_shape and color == asked_color for _, shape, color in scene)
        return "yes" if found else "no"
    raise DatasetError(f"unknown template {template!r}")


class _RoundRobin:
    """Cycles through items in a freshly shuffled order per pass."""

    def __init__(self, items, rng):
        self._items = list(items)
        self._rng = rng
        self._queue: list = []

    def next(self):
        if not self._queue:
            self._queue = [self._items[i] for i in self._rng.permutation(len(self._items))]
        return self._queue.pop()


def _fill_distractors(scene, free_cells, spec, rng, forbidden_shapes=(), forbidden_pair=None):
    for cell in free_cells:
        if rng.random() >= spec.distractor_rate:
            continue
        options = [
            (s, c)
            for s in spec.shapes
            for c in spec.colors
            if s not in forbidden_shapes and (s, c) != forbidden_pair
        ]
        if not options:
            continue
        s, c = options[int(rng.integers(len(options)))]
        scene.append((int(cell), s, c))


def _build_sample(template: str, answer, spec: DatasetSpec, rng) -> tuple[str, str, str | None, str, list]:
    """Return (question, answer_word, asked_color, asked_shape, scene)."""
    cells = list(range(spec.grid * spec.grid))
    if template == "color":
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        target = int(rng.integers(len(cells)))
        scene = [(target, shape, answer)]
        _fill_distractors(scene, [c for c in cells if c != target], spec, rng, forbidden_shapes=(shape,))
        return f"what color is the {shape}", answer, None, shape, scene
    if template == "count":
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        k = COUNT_WORDS.index(answer)
        chosen = [int(c) for c in rng.choice(len(cells), size=k, replace=False)] if k else []
        scene = [(c, shape, spec.colors[int(rng.integers(len(spec.colors)))]) for c in chosen]
        _fill_distractors(scene, [c for c in cells if c not in chosen], spec, rng, forbidden_shapes=(shape,))
        return f"how many {SHAPE_PLURALS[shape]}", answer, None, shape, scene
    if template == "presence":
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        color = spec.colors[int(rng.integers(len(spec.colors)))]
        scene: list = []
        if answer == "yes":
            scene.append((int(rng.integers(len(cells))), shape, color))
            occupied = {scene[0][0]}
            _fill_distractors(scene, [c for c in cells if c not in occupied], spec, rng)
        else:
            _fill_distractors(scene, cells, spec, rng, forbidden_pair=(shape, color))
        return f"is there a {color} {shape}", answer, color, shape, scene
    raise DatasetError(f"unknown template {template!r}")


def _splits(spec: DatasetSpec) -> list[str]:
    n_train = int(round(spec.n_samples * spec.split_fractions[0]))
    n_val = int(round(spec.n_samples * spec.split_fractions[1]))
    out = []
    for i in range(spec.n_samples):
        if i < n_train:
            out.append("train")
        elif i < n_train + n_val:
            out.append("val")
        else:
            out.append("test")
    return out


def generate_dataset(spec: DatasetSpec, outdir) -> list[TripletSample]:
    """Render the corpus and write manifest, vocab, images, and previews."""
    outdir = Path(outdir)
    (outdir / "images").mkdir(parents=True, exist_ok=True)
    (outdir / "previews").mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary()
    vocab.save(outdir / "vocab.txt")
    (outdir / "spec.json").write_text(
        json.dumps({"dataset": asdict(spec), "answer_words": list(ANSWER_WORDS)}, sort_keys=True, indent=2)
        + "\n",
        encoding="utf-8",
    )

    rng = np.random.default_rng(spec.seed)
    templates = _RoundRobin(spec.templates, rng)
    answer_pools = {
        "color": _RoundRobin(spec.colors, rng),
        "count": _RoundRobin(COUNT_WORDS[: spec.max_count + 1], rng),
        "presence": _RoundRobin(("yes", "no"), rng),
    }
    splits = _splits(spec)

    samples: list[TripletSample] = []
    with open(outdir / "manifest.jsonl", "w", encoding="utf-8") as manifest:
        for i in range(spec.n_samples):
            template = templates.next()
            answer = answer_pools[template].next()
            for attempt in range(MAX_SCENE_RETRIES):
                question, answer_word, asked_color, asked_shape, scene = _build_sample(template, answer, spec, rng)
                if scene_answer(template, asked_shape, asked_color, scene) == answer_word:
                    break
            else:
                raise DatasetError(f"could not satisfy template {template!r} after {MAX_SCENE_RETRIES} tries")
            image = render_scene(scene, spec)
            answer_text = ANSWER_TEMPLATE.format(answer_word)
            sample = TripletSample(
                sample_id=i,
                split=splits[i],
                image=image,
                question=question,
                question_ids=np.asarray(vocab.encode(question), dtype=np.int64),
                answer_word=answer_word,
                answer_text=answer_text,
                answer_ids=expand_answer(answer_word, question, vocab),
                label=ANSWER_WORDS.index(answer_word),
                template=template,
                scene=scene,
            )
            sample.validate()
            rel_bin = f"images/{i:06d}.bin"
            rel_png = f"previews/{i:06d}.png"
            with open(outdir / rel_bin, "wb") as fh:
                write_tensor(fh, image)
            save_png(outdir / rel_png, image)
            record = {
                "id": i,
                "split": sample.split,
                "image": rel_bin,
                "preview": rel_png,
                "question": question,
                "answer_word": answer_word,
                "answer_text": answer_text,
                "label": sample.label,
                "template": template,
                "asked_shape": asked_shape,
                "asked_color": asked_color,
                "scene": [[c, s, col] for c, s, col in scene],
            }
            manifest.write(json.dumps(record, sort_keys=True) + "\n")
            samples.append(sample)
    return samples


def load_dataset(outdir) -> tuple[list[TripletSample], Vocabulary, dict]:
    outdir = Path(outdir)
    meta = json.loads((outdir / "spec.json").read_text(encoding="utf-8"))
    vocab = Vocabulary.load(outdir / "vocab.txt")
    samples: list[TripletSample] = []
    with open(outdir / "manifest.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            with open(outdir / rec["image"], "rb") as img_fh:
                image = read_tensor(img_fh)
            sample = TripletSample(
                sample_id=rec["id"],
                split=rec["split"],
                image=image,
                question=rec["question"],
                question_ids=np.asarray(vocab.encode(rec["question"]), dtype=np.int64),
                answer_word=rec["answer_word"],
                answer_text=rec["answer_text"],
                answer_ids=np.asarray(vocab.encode(rec["answer_text"]), dtype=np.int64),
                label=rec["label"],
                template=rec["template"],
                scene=[tuple(obj) for obj in rec["scene"]],
            )
            sample.validate()
            samples.append(sample)
    return samples, vocab, meta


def save_png(path, image: np.ndarray) -> None:
    """8-bit preview; lossy below 1/255, the float tensor stays authoritative."""
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def split_samples(samples: list[TripletSample], split: str) -> list[TripletSample]:
    return [s for s in samples if s.split == split]
