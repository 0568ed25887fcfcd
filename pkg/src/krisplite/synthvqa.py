"""Deterministic synthetic VQA benchmark on a 3x3 grid.

Scenes hold 1-5 coloured objects on distinct cells. Each question comes in
two forms: English text (for keyword extraction and the text encoder) and a
structured form that ``oracle_answer`` evaluates against the scene.

Scene vectors are built from the label table, standing in for a frozen image
encoder. An object contributes its class label, half of its colour label, and
two bound codes: its colour and its column label, each cyclically shifted by
an amount specific to its class. Binding is what makes "what colour is the
chair" answerable from a single pooled vector. The pooled vector is the mean
over objects plus Gaussian noise, L2-normalized.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import featstore as fs
from . import kgstore as kg

CLASSES = ("chair", "table", "desk", "monitor", "keyboard", "lamp", "sofa", "bed", "cup", "book")
COLORS = ("red", "green", "blue", "yellow", "black", "white", "brown", "gray")
COLUMNS = ("left", "center", "right")
COUNTS = tuple(str(i) for i in range(6))
ANSWERS = ("yes", "no") + COUNTS + COLORS + CLASSES
QUESTION_TYPES = ("existence", "counting", "color", "spatial")
DEFAULT_MIX = {"existence": 0.35, "counting": 0.25, "color": 0.25, "spatial": 0.15}

LOCATIONS = {
    "chair": "room", "table": "kitchen", "desk": "office", "monitor": "desk",
    "keyboard": "desk", "lamp": "bedroom", "sofa": "living_room", "bed": "bedroom",
    "cup": "kitchen", "book": "library",
}
RELATIONS = ("AtLocation", "Antonym", "RelatedTo")

QUESTION_WORDS = ("is", "there", "a", "how", "many", "items", "are", "what", "color", "the", "of")

GRID = 3
MAX_OBJECTS = 5
IMAGE_DIM = 512
KG_DIM = 300
DEFAULT_NOISE = 0.02
DEFAULT_BIND = 0.3
TRAIN_FRACTION = 0.8


class LabelCoverageError(ValueError):
    pass


class UnanswerableError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    cls: str
    color: str
    cell: int

    @property
    def row(self) -> int:
        return self.cell // GRID

    @property
    def col(self) -> int:
        return self.cell % GRID


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    objects: tuple[SceneObject, ...]
    image_vec: np.ndarray

    def classes(self) -> set[str]:
        return {o.cls for o in self.objects}

    def to_json(self) -> dict:
        return {"scene_id": self.scene_id,
                "objects": [{"class": o.cls, "color": o.color, "cell": o.cell, "row": o.row, "col": o.col}
                            for o in self.objects]}


@dataclass(frozen=True)
class Question:
    """Structured question form; ``reference`` is the second object of a spatial query."""
    type: str
    object: str
    reference: str | None = None
    relation: str | None = None

    def text(self) -> str:
        if self.type == "existence":
            return f"Is there a {self.object}?"
        if self.type == "counting":
            return f"How many {self.object} items are there?"
        if self.type == "color":
            return f"What color is the {self.object}?"
        if self.type == "spatial":
            return f"Is the {self.object} left of the {self.reference}?"
        raise UnanswerableError(f"unknown question type {self.type!r}")

    def to_json(self) -> dict:
        d = {"type": self.type, "object": self.object}
        if self.reference is not None:
            d["reference"] = self.reference
            d["relation"] = self.relation
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "Question":
        return cls(d["type"], d["object"], d.get("reference"), d.get("relation"))


@dataclass
class VqaSample:
    sample_id: str
    scene_id: str
    question: str
    question_type: str
    form: Question
    gold_answer: int
    split: str = "train"
    triple_ids: tuple[int, ...] = ()

    @property
    def answer(self) -> str:
        return ANSWERS[self.gold_answer]

    def to_json(self) -> dict:
        return {"sample_id": self.sample_id, "scene_id": self.scene_id, "split": self.split,
                "question": self.question, "question_type": self.question_type,
                "form": self.form.to_json(), "answer": self.answer,
                "gold_answer": self.gold_answer, "triple_ids": list(self.triple_ids)}

    @classmethod
    def from_json(cls, d: Mapping) -> "VqaSample":
        return cls(d["sample_id"], d["scene_id"], d["question"], d["question_type"],
                   Question.from_json(d["form"]), int(d["gold_answer"]), d.get("split", "train"),
                   tuple(d.get("triple_ids", ())))


# ---------------------------------------------------------------- oracle

def _first(scene: Scene, cls: str) -> SceneObject | None:
    for o in sorted(scene.objects, key=lambda o: o.cell):
        if o.cls == cls:
            return o
    return None


def oracle_answer(scene: Scene, question: Question) -> int:
    """Gold answer index for ``question`` about ``scene``.

    Colour and spatial questions read the first matching object in cell order.
    "left of" means a strictly smaller column.
    """
    if question.object not in CLASSES:
        raise UnanswerableError(f"unknown object class {question.object!r}")
    if question.type == "existence":
        return ANSWERS.index("yes" if _first(scene, question.object) else "no")
    if question.type == "counting":
        n = sum(o.cls == question.object for o in scene.objects)
        if str(n) not in COUNTS:
            raise UnanswerableError(f"count {n} outside the answer vocabulary")
        return ANSWERS.index(str(n))
    if question.type == "color":
        obj = _first(scene, question.object)
        if obj is None:
            raise UnanswerableError(f"no {question.object} in scene {scene.scene_id}")
        return ANSWERS.index(obj.color)
    if question.type == "spatial":
        if question.relation != "left_of" or question.reference not in CLASSES:
            raise UnanswerableError(f"unsupported spatial form {question}")
        a, b = _first(scene, question.object), _first(scene, question.reference)
        if a is None or b is None:
            raise UnanswerableError(f"spatial question about a missing object in {scene.scene_id}")
        return ANSWERS.index("yes" if a.col < b.col else "no")
    raise UnanswerableError(f"unknown question type {question.type!r}")


# ---------------------------------------------------------------- tables and image vectors

def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def color_shift(class_index: int, dim: int = IMAGE_DIM) -> int:
    return (11 + 29 * class_index) % dim


def column_shift(class_index: int, dim: int = IMAGE_DIM) -> int:
    return (300 + 17 * class_index) % dim


@dataclass(frozen=True, eq=False)
class SyntheticTables:
    labels: fs.EmbeddingTable   # zero-shot concept labels (512)
    text: fs.EmbeddingTable     # question-token encoder (512), shares label vectors
    kg: fs.EmbeddingTable       # knowledge tokens (300)


def kg_tokens(triples: Iterable[kg.Triple]) -> list[str]:
    seen: dict[str, None] = {}
    for t in triples:
        for tok in (t.head, t.relation, t.tail):
            seen.setdefault(tok, None)
    return list(seen)


def make_tables(seed: int, classes: Sequence[str] = CLASSES, colors: Sequence[str] = COLORS,
                kg_triples: Sequence[kg.Triple] | None = None) -> SyntheticTables:
    label_tokens = list(classes) + list(colors) + list(COLUMNS)
    labels = fs.random_table("label512", label_tokens, IMAGE_DIM, _rng(seed, 1))
    extra = [w for w in QUESTION_WORDS if w not in labels]
    words = fs.random_table("text-extra", extra, IMAGE_DIM, _rng(seed, 2))
    text = fs.EmbeddingTable("text512", labels.tokens + words.tokens,
                             np.concatenate([labels.vectors, words.vectors]))
    if kg_triples is None:
        kg_triples = build_synthetic_kg(classes, colors)
    kgt = fs.random_table("kg300", kg_tokens(kg_triples), KG_DIM, _rng(seed, 3))
    return SyntheticTables(labels, text, kgt)


def check_label_coverage(labels: fs.EmbeddingTable, classes=CLASSES, colors=COLORS) -> None:
    missing = [t for t in (*classes, *colors, *COLUMNS) if t not in labels]
    if missing:
        raise LabelCoverageError(f"label table lacks {', '.join(missing)}")


def scene_vector(objects: Sequence[SceneObject], labels: fs.EmbeddingTable, rng: np.random.Generator,
                 noise: float = DEFAULT_NOISE, bind: float = DEFAULT_BIND) -> np.ndarray:
    dim = labels.dim
    acc = np.zeros(dim)
    for o in objects:
        ci = CLASSES.index(o.cls)
        acc += labels[o.cls]
        acc += 0.5 * labels[o.color].astype(np.float64)
        acc += bind * np.roll(labels[o.color].astype(np.float64), color_shift(ci, dim))
        acc += bind * np.roll(labels[COLUMNS[o.col]].astype(np.float64), column_shift(ci, dim))
    v = acc / max(len(objects), 1) + noise * rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


# ---------------------------------------------------------------- generation

def _normalize_mix(mix: Mapping[str, float] | None) -> dict[str, float]:
    mix = dict(DEFAULT_MIX if mix is None else mix)
    unknown = set(mix) - set(QUESTION_TYPES)
    if unknown:
        raise ValueError(f"unknown question types in mix: {sorted(unknown)}")
    total = sum(mix.values())
    if total <= 0 or any(v < 0 for v in mix.values()):
        raise ValueError("question-type mix must be non-negative with a positive sum")
    return {t: mix.get(t, 0.0) / total for t in QUESTION_TYPES}


def _sample_scene(idx: int, rng: np.random.Generator, labels, noise, bind) -> Scene:
    n = int(rng.integers(1, MAX_OBJECTS + 1))
    n_cls = int(rng.integers(1, min(n, 3) + 1))
    pool = rng.choice(len(CLASSES), n_cls, replace=False)
    cells = rng.choice(GRID * GRID, n, replace=False)
    objects = sorted(
        (SceneObject(CLASSES[int(pool[rng.integers(n_cls)])], COLORS[int(rng.integers(len(COLORS)))],
                     int(c)) for c in cells),
        key=lambda o: o.cell)
    return Scene(f"s{idx:05d}", tuple(objects), scene_vector(objects, labels, rng, noise, bind))


def _sample_question(scene: Scene, rng: np.random.Generator, mix: dict[str, float]) -> Question:
    present = sorted(scene.classes(), key=CLASSES.index)
    feasible = {t: p for t, p in mix.items() if p > 0 and (t != "spatial" or len(present) >= 2)}
    if not feasible:
        feasible = {"existence": 1.0}
    types = list(feasible)
    probs = np.array([feasible[t] for t in types])
    qtype = types[int(rng.choice(len(types), p=probs / probs.sum()))]
    if qtype == "existence":
        absent = [c for c in CLASSES if c not in present]
        if rng.random() < 0.5 or not absent:
            obj = present[int(rng.integers(len(present)))]
        else:
            obj = absent[int(rng.integers(len(absent)))]
        return Question("existence", obj)
    if qtype == "counting":
        pool = present if rng.random() < 0.8 else list(CLASSES)
        return Question("counting", pool[int(rng.integers(len(pool)))])
    if qtype == "color":
        return Question("color", present[int(rng.integers(len(present)))])
    i, j = sorted(rng.choice(len(present), 2, replace=False))
    # subject is always the class listed first in CLASSES, so the bag of
    # question tokens determines which object is the subject
    return Question("spatial", present[int(i)], present[int(j)], "left_of")


def split_scenes(scene_ids: Sequence[str], seed: int, train_fraction: float = TRAIN_FRACTION) -> dict[str, str]:
    order = _rng(seed, 5).permutation(len(scene_ids))
    n_train = int(round(train_fraction * len(scene_ids)))
    return {scene_ids[int(j)]: ("train" if rank < n_train else "val") for rank, j in enumerate(order)}


def generate_dataset(seed: int, n_scenes: int, questions_per_scene: int, label_table: fs.EmbeddingTable,
                     mix: Mapping[str, float] | None = None, noise: float = DEFAULT_NOISE,
                     bind: float = DEFAULT_BIND) -> tuple[list[Scene], list[VqaSample], tuple[str, ...]]:
    """Scenes, samples (with an 80/20 scene-level split) and the 26-answer vocabulary."""
    if n_scenes < 1 or questions_per_scene < 1:
        raise ValueError("n_scenes and questions_per_scene must be positive")
    check_label_coverage(label_table)
    mix = _normalize_mix(mix)
    scene_rng, question_rng = _rng(seed, 4), _rng(seed, 6)
    scenes = [_sample_scene(i, scene_rng, label_table, noise, bind) for i in range(n_scenes)]
    splits = split_scenes([s.scene_id for s in scenes], seed)
    samples = []
    for scene in scenes:
        for q in range(questions_per_scene):
            form = _sample_question(scene, question_rng, mix)
            samples.append(VqaSample(f"{scene.scene_id}-q{q}", scene.scene_id, form.text(), form.type,
                                     form, oracle_answer(scene, form), splits[scene.scene_id]))
    return scenes, samples, ANSWERS


def build_synthetic_kg(classes: Sequence[str] = CLASSES, colors: Sequence[str] = COLORS) -> list[kg.Triple]:
    """One AtLocation edge per class, one Antonym edge per colour (to the next
    colour, cyclically), and RelatedTo between classes sharing a location."""
    triples = [kg.Triple(c, "AtLocation", LOCATIONS.get(c, "room"), 1.0) for c in classes]
    if len(colors) > 1:
        triples += [kg.Triple(c, "Antonym", colors[(i + 1) % len(colors)], 1.0)
                    for i, c in enumerate(colors)]
    for i, a in enumerate(classes):
        for b in classes[i + 1:]:
            if LOCATIONS.get(a, "room") == LOCATIONS.get(b, "room"):
                triples.append(kg.Triple(a, "RelatedTo", b, 1.0))
    return triples


# ---------------------------------------------------------------- files

@dataclass
class SyntheticDataset:
    scenes: list[Scene]
    samples: list[VqaSample]
    answers: tuple[str, ...]
    tables: SyntheticTables
    kg_triples: list[kg.Triple]
    meta: dict = field(default_factory=dict)

    def scene_map(self) -> dict[str, Scene]:
        return {s.scene_id: s for s in self.scenes}

    def split(self, name: str) -> list[VqaSample]:
        return [s for s in self.samples if s.split == name]

    def image_table(self) -> fs.EmbeddingTable:
        return fs.EmbeddingTable("image512", tuple(s.scene_id for s in self.scenes),
                                 np.array([s.image_vec for s in self.scenes], dtype=np.float32))


def build_benchmark(seed: int, n_scenes: int = 2000, questions_per_scene: int = 3,
                    mix: Mapping[str, float] | None = None, noise: float = DEFAULT_NOISE,
                    bind: float = DEFAULT_BIND, stopwords: Iterable[str] | None = None) -> SyntheticDataset:
    """Tables, KG, dataset, and each sample's retrieved triple ids, all from ``seed``."""
    triples = build_synthetic_kg()
    tables = make_tables(seed, kg_triples=triples)
    scenes, samples, answers = generate_dataset(seed, n_scenes, questions_per_scene, tables.labels,
                                                mix, noise, bind)
    index = kg.build_index(triples)
    stop = fs.load_stopwords() if stopwords is None else frozenset(stopwords)
    by_id = {s.scene_id: s for s in scenes}
    for s in samples:
        concepts = fs.detect_concepts(by_id[s.scene_id].image_vec, tables.labels, 5).tokens
        s.triple_ids = kg.retrieve(index, concepts, fs.extract_keywords(s.question, stop), 5).ids
    meta = {"seed": seed, "scenes": n_scenes, "questions_per_scene": questions_per_scene,
            "mix": _normalize_mix(mix), "noise": noise, "bind": bind,
            "samples": len(samples), "train_samples": sum(s.split == "train" for s in samples),
            "val_samples": sum(s.split == "val" for s in samples)}
    return SyntheticDataset(scenes, samples, answers, tables, triples, meta)


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with path.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_dataset(ds: SyntheticDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split_of = {s.scene_id: s.split for s in ds.samples}
    _write_jsonl(out / "scenes.jsonl",
                 ({**s.to_json(), "split": split_of.get(s.scene_id, "train")} for s in ds.scenes))
    _write_jsonl(out / "samples.jsonl", (s.to_json() for s in ds.samples))
    fs.save_embeddings(ds.image_table(), out / "images.vec")
    fs.save_embeddings(ds.tables.labels, out / "labels.vec")
    fs.save_embeddings(ds.tables.text, out / "text.vec")
    fs.save_embeddings(ds.tables.kg, out / "kg.vec")
    kg.save_index(kg.build_index(ds.kg_triples), out / "kg")
    (out / "vocab.json").write_text(json.dumps({"answers": list(ds.answers)}, indent=2) + "\n", "utf-8")
    (out / "dataset.json").write_text(json.dumps(ds.meta, indent=2, sort_keys=True) + "\n", "utf-8")
    return out


class DatasetFormatError(ValueError):
    pass


def load_dataset(data_dir) -> SyntheticDataset:
    d = Path(data_dir)
    required = ["scenes.jsonl", "samples.jsonl", "images.vec", "labels.vec", "text.vec", "kg.vec",
                "vocab.json"]
    missing = [f for f in required if not (d / f).exists()]
    if missing:
        raise DatasetFormatError(f"{d}: missing {', '.join(missing)}")
    images = fs.load_embeddings(d / "images.vec", "image512")
    scenes = []
    try:
        for row in _read_jsonl(d / "scenes.jsonl"):
            objects = tuple(SceneObject(o["class"], o["color"], int(o["cell"])) for o in row["objects"])
            scenes.append(Scene(row["scene_id"], objects, images[row["scene_id"]]))
        samples = [VqaSample.from_json(r) for r in _read_jsonl(d / "samples.jsonl")]
        answers = tuple(json.loads((d / "vocab.json").read_text("utf-8"))["answers"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{d}: malformed dataset record ({exc!r})") from None
    tables = SyntheticTables(fs.load_embeddings(d / "labels.vec", "label512"),
                             fs.load_embeddings(d / "text.vec", "text512"),
                             fs.load_embeddings(d / "kg.vec", "kg300"))
    kg_triples = list(kg.load_index(d / "kg").triples) if (d / "kg.meta.json").exists() else []
    meta = json.loads((d / "dataset.json").read_text("utf-8")) if (d / "dataset.json").exists() else {}
    for s in samples:
        if not 0 <= s.gold_answer < len(answers):
            raise DatasetFormatError(f"{s.sample_id}: gold answer {s.gold_answer} outside vocabulary")
    return SyntheticDataset(scenes, samples, answers, tables, kg_triples, meta)
