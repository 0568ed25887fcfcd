"""Training, evaluation and the retrieval / bias / overfitting diagnostics."""
from __future__ import annotations

import json
import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import featstore as fs
from . import kgstore as kg
from . import tensorcore as tc
from .models import ModelConfig, ModelParams, forward_batch, init_params
from .synthvqa import QUESTION_TYPES, SyntheticDataset, SyntheticTables, VqaSample

log = logging.getLogger(__name__)

GAP_THRESHOLD = 0.15


class VocabularyMismatchError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, epoch: int, batch: int):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1
    top_k_concepts: int = 5
    max_triples: int = 5
    max_question_tokens: int = 16
    blocked_relations: tuple[str, ...] = ()

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float
    wall_time: float = 0.0

    @property
    def gap(self) -> float:
        return self.train_accuracy - self.val_accuracy

    def to_json(self) -> dict:
        # wall_time is kept out so report files stay byte-identical across runs
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "train_accuracy": self.train_accuracy, "val_accuracy": self.val_accuracy,
                "gap": self.gap, "gap_flagged": self.gap > GAP_THRESHOLD}


# ---------------------------------------------------------------- optimizers

class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ModelParams) -> None:
        for t in params.values():
            if t.grad is not None:
                t.data = t.data - t.data.dtype.type(self.lr) * t.grad


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            dt = p.data.dtype.type
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            # optimizer state is private, so it is updated in place
            m *= dt(self.beta1)
            m += dt(1 - self.beta1) * g
            v *= dt(self.beta2)
            v += dt(1 - self.beta2) * np.square(g)
            denom = np.sqrt(v / dt(c2))
            denom += dt(self.eps)
            p.data = p.data - (dt(self.lr / c1) * m) / denom


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)


# ---------------------------------------------------------------- sample preparation

@dataclass
class PreparedSplit:
    """Model-ready arrays for a list of samples, plus the retrievals behind them."""
    sample_ids: list[str]
    question_types: list[str]
    labels: np.ndarray
    images: np.ndarray
    question_tokens: np.ndarray
    question_mask: np.ndarray
    knowledge: np.ndarray
    knowledge_mask: np.ndarray
    retrievals: list[kg.RetrievalResult] = field(repr=False, default_factory=list)

    def __len__(self):
        return len(self.sample_ids)

    def batch(self, idx) -> tuple:
        return (self.images[idx], self.question_tokens[idx], self.question_mask[idx],
                self.knowledge[idx], self.knowledge_mask[idx])

    def subset(self, idx) -> "PreparedSplit":
        idx = np.asarray(idx)
        return PreparedSplit([self.sample_ids[i] for i in idx], [self.question_types[i] for i in idx],
                             self.labels[idx], *self.batch(idx),
                             [self.retrievals[i] for i in idx] if self.retrievals else [])


def retrieve_for_sample(image_vec, question: str, index: kg.ConceptIndex, labels: fs.EmbeddingTable,
                        stopwords, top_k: int = 5, k: int = 5,
                        blocked_relations: Iterable[str] = ()) -> kg.RetrievalResult:
    """Detect concepts, extract keywords, retrieve: the exact per-sample retrieval call."""
    concepts = fs.detect_concepts(image_vec, labels, top_k).tokens
    keywords = fs.extract_keywords(question, stopwords)
    return kg.retrieve(index, concepts, keywords, k, blocked_relations)


def _image_lookup(images) -> Callable[[str], np.ndarray]:
    if isinstance(images, fs.EmbeddingTable):
        return images.__getitem__
    if isinstance(images, SyntheticDataset):
        by_id = images.scene_map()
        return lambda sid: by_id[sid].image_vec
    return lambda sid: images[sid].image_vec if hasattr(images[sid], "image_vec") else images[sid]


def prepare(samples: Sequence[VqaSample], images, index: kg.ConceptIndex, tables: SyntheticTables,
            stopwords=None, cfg: TrainConfig = TrainConfig()) -> PreparedSplit:
    """Run retrieval and feature lookup for every sample once.

    Encoders and the graph are frozen, so the result equals what a per-step
    pipeline would compute.
    """
    stop = fs.load_stopwords() if stopwords is None else stopwords
    image_of = _image_lookup(images)
    n = len(samples)
    qdim, kdim = tables.text.dim, tables.kg.dim
    toks = [fs.encode_question_tokens(s.question, tables.text, cfg.max_question_tokens) for s in samples]
    length = max((t.shape[0] for t in toks), default=1)
    images_arr = np.zeros((n, tables.labels.dim), dtype=np.float32)
    qtok = np.zeros((n, length, qdim), dtype=np.float32)
    qmask = np.zeros((n, length), dtype=bool)
    know = np.zeros((n, cfg.max_triples, kdim), dtype=np.float32)
    kmask = np.zeros((n, cfg.max_triples), dtype=bool)
    retrievals = []
    for i, s in enumerate(samples):
        img = np.asarray(image_of(s.scene_id), dtype=np.float32)
        images_arr[i] = img
        qtok[i, :toks[i].shape[0]] = toks[i]
        qmask[i, :toks[i].shape[0]] = True
        r = retrieve_for_sample(img, s.question, index, tables.labels, stop, cfg.top_k_concepts,
                                cfg.max_triples, cfg.blocked_relations)
        retrievals.append(r)
        for j, t in enumerate(r.triples):
            know[i, j] = fs.embed_triple(t, tables.kg)
            kmask[i, j] = True
    labels = np.array([s.gold_answer for s in samples], dtype=np.int64)
    return PreparedSplit([s.sample_id for s in samples], [s.question_type for s in samples], labels,
                         images_arr, qtok, qmask, know, kmask, retrievals)


# ---------------------------------------------------------------- evaluation

def predict(params: ModelParams, cfg: ModelConfig, data: PreparedSplit, batch_size: int = 256) -> np.ndarray:
    out = np.empty(len(data), dtype=np.int64)
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        logits = forward_batch(params, cfg, *data.batch(idx)).logits.data
        out[idx] = logits.argmax(axis=1)
    return out


@dataclass
class EvalResult:
    accuracy: float
    per_type: dict[str, float]
    confusions: list[tuple[int, int, int]]   # (gold, predicted, count), most frequent first
    n: int
    predictions: np.ndarray = field(repr=False, default=None)

    def to_json(self, answers: Sequence[str] | None = None) -> dict:
        def name(i):
            return answers[i] if answers is not None else i
        return {"accuracy": self.accuracy, "n": self.n, "per_type": self.per_type,
                "top_confusions": [{"gold": name(g), "predicted": name(p), "count": c}
                                   for g, p, c in self.confusions]}


def score_predictions(predictions, labels, question_types: Sequence[str], top_confusions: int = 10) -> EvalResult:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty split")
    correct = predictions == labels
    per_type = {}
    types = np.asarray(question_types)
    for t in QUESTION_TYPES:
        sel = types == t
        if sel.any():
            per_type[t] = float(correct[sel].mean())
    wrong = Counter((int(g), int(p)) for g, p in zip(labels[~correct], predictions[~correct]))
    confusions = [(g, p, c) for (g, p), c in sorted(wrong.items(), key=lambda kv: (-kv[1], kv[0]))]
    return EvalResult(float(correct.mean()), per_type, confusions[:top_confusions], len(labels), predictions)


def evaluate(params: ModelParams, cfg: ModelConfig, split, index: kg.ConceptIndex | None = None,
             tables: SyntheticTables | None = None, images=None,
             predictor: Callable[[PreparedSplit], np.ndarray] | None = None) -> EvalResult:
    """Exact-match accuracy overall and per question type.

    ``split`` is a PreparedSplit or a list of samples (then ``index``,
    ``tables`` and ``images`` are needed to prepare it). ``predictor``
    replaces the model, e.g. with a stub.
    """
    if not isinstance(split, PreparedSplit):
        if index is None or tables is None or images is None:
            raise ValueError("raw samples need index, tables and images")
        split = prepare(split, images, index, tables)
    preds = predictor(split) if predictor is not None else predict(params, cfg, split)
    return score_predictions(preds, split.labels, split.question_types)


def majority_baseline(train_labels, val_labels) -> tuple[int, float]:
    counts = np.bincount(np.asarray(train_labels))
    label = int(counts.argmax())
    return label, float((np.asarray(val_labels) == label).mean())


# ---------------------------------------------------------------- training

def check_vocabulary(cfg: ModelConfig, answers: Sequence[str]) -> None:
    if cfg.answer_vocab_size != len(answers):
        raise VocabularyMismatchError(
            f"model answers {cfg.answer_vocab_size} classes but the dataset has {len(answers)}")


def _step(params, cfg, data: PreparedSplit, idx, optimizer, epoch: int, batch: int) -> float:
    params.zero_grad()
    try:
        out = forward_batch(params, cfg, *data.batch(idx))
        loss = tc.cross_entropy(out.logits, data.labels[idx])
        loss.backward()
    except tc.NumericalError as exc:
        raise TrainingAborted(str(exc), epoch, batch) from exc
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingAborted("non-finite loss", epoch, batch)
    optimizer.step(params)
    for name, t in params.items():
        if not np.all(np.isfinite(t.data)):
            raise TrainingAborted(f"parameter {name} became non-finite", epoch, batch)
    return value


def train_prepared(model_cfg: ModelConfig, train_data: PreparedSplit, val_data: PreparedSplit | None,
                   cfg: TrainConfig, params: ModelParams | None = None,
                   on_report: Callable[[EpochReport], None] | None = None):
    """Train on prepared arrays; returns ``(params, reports)``."""
    if len(train_data) == 0:
        raise ValueError("training split is empty")
    params = params if params is not None else init_params(model_cfg, cfg.seed, np.float32)
    optimizer = make_optimizer(cfg)
    shuffle = np.random.default_rng([cfg.seed, 101])
    reports: list[EpochReport] = []
    n = len(train_data)
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = shuffle.permutation(n)
        total = 0.0
        for batch, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            total += _step(params, model_cfg, train_data, idx, optimizer, epoch, batch) * len(idx)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            train_acc = float((predict(params, model_cfg, train_data) == train_data.labels).mean())
            val_acc = float("nan")
            if val_data is not None and len(val_data):
                val_acc = float((predict(params, model_cfg, val_data) == val_data.labels).mean())
            report = EpochReport(epoch, total / n, train_acc, val_acc, time.perf_counter() - started)
            reports.append(report)
            log.info("epoch %d loss %.4f train %.4f val %.4f (%.1fs)", epoch, report.train_loss,
                     train_acc, val_acc, report.wall_time)
            if on_report is not None:
                on_report(report)
    return params, reports


def train(model_cfg: ModelConfig, dataset: SyntheticDataset, index: kg.ConceptIndex,
          tables: SyntheticTables | None = None, cfg: TrainConfig = TrainConfig(),
          on_report: Callable[[EpochReport], None] | None = None):
    """Full run: retrieval-backed features, then minibatch training on the train split.

    Returns ``(params, reports)``; reports are emitted every ``eval_every`` epochs.
    """
    check_vocabulary(model_cfg, dataset.answers)
    tables = tables or dataset.tables
    train_data = prepare(dataset.split("train"), dataset, index, tables, cfg=cfg)
    val_samples = dataset.split("val")
    val_data = prepare(val_samples, dataset, index, tables, cfg=cfg) if val_samples else None
    return train_prepared(model_cfg, train_data, val_data, cfg, on_report=on_report)


def fit_batch(model_cfg: ModelConfig, data: PreparedSplit, steps: int = 200, seed: int = 0,
              learning_rate: float = 1e-3) -> tuple[ModelParams, float]:
    """Repeatedly step on one fixed batch; returns params and final accuracy on it."""
    params = init_params(model_cfg, seed, np.float32)
    optimizer = Adam(learning_rate)
    idx = np.arange(len(data))
    for step in range(steps):
        _step(params, model_cfg, data, idx, optimizer, 1, step)
    acc = float((predict(params, model_cfg, data) == data.labels).mean())
    return params, acc


# ---------------------------------------------------------------- diagnostics

def analyze_bias(predictions: Iterable, answers: Sequence[str] | None = None) -> list[tuple[object, float]]:
    """Predicted answers ranked by frequency (ties by answer), with fractions."""
    counts = Counter(int(p) if isinstance(p, (int, np.integer)) else p for p in predictions)
    total = sum(counts.values())
    if not total:
        return []
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], str(kv[0]) if answers is None else kv[0]))
    return [((answers[a] if answers is not None else a), c / total) for a, c in ranked]


@dataclass
class RetrievalStats:
    n_samples: int
    mean_triples: float
    zero_fraction: float
    histogram: dict[str, tuple[int, float]]

    def to_json(self) -> dict:
        return {"samples": self.n_samples, "mean_triples_per_sample": self.mean_triples,
                "zero_retrieval_fraction": self.zero_fraction,
                "relation_histogram": {r: {"count": c, "fraction": f} for r, (c, f) in self.histogram.items()}}


def analyze_retrieval(samples: Sequence[VqaSample], images, index: kg.ConceptIndex, tables: SyntheticTables,
                      stopwords=None, cfg: TrainConfig = TrainConfig()) -> RetrievalStats:
    """Triples-per-sample, zero-retrieval rate and relation mix of the trainer's retrievals."""
    stop = fs.load_stopwords() if stopwords is None else stopwords
    image_of = _image_lookup(images)
    results = [retrieve_for_sample(image_of(s.scene_id), s.question, index, tables.labels, stop,
                                   cfg.top_k_concepts, cfg.max_triples, cfg.blocked_relations)
               for s in samples]
    n = len(results)
    sizes = [len(r) for r in results]
    return RetrievalStats(n, float(np.mean(sizes)) if n else 0.0,
                          float(np.mean([z == 0 for z in sizes])) if n else 0.0,
                          kg.relation_histogram(results))


def overfitting_gap(reports: Iterable[EpochReport | Mapping], threshold: float = GAP_THRESHOLD) -> list[dict]:
    rows = []
    for r in reports:
        if not isinstance(r, EpochReport):
            r = EpochReport(r["epoch"], r["train_loss"], r["train_accuracy"], r["val_accuracy"])
        rows.append({"epoch": r.epoch, "train_accuracy": r.train_accuracy,
                     "val_accuracy": r.val_accuracy, "gap": r.gap, "flagged": r.gap > threshold})
    return rows


# ---------------------------------------------------------------- report files

def write_reports(reports: Sequence[EpochReport], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_reports(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_summary(path, model_cfg: ModelConfig, train_cfg: TrainConfig, reports: Sequence[EpochReport],
                  extra: Mapping | None = None) -> None:
    last = reports[-1] if reports else None
    summary = {
        "model": model_cfg.to_dict(),
        "train": asdict(train_cfg),
        "epochs_reported": len(reports),
        "final": last.to_json() if last else None,
        "best_val_accuracy": max((r.val_accuracy for r in reports), default=None),
        "gap_flagged_epochs": [r.epoch for r in reports if r.gap > GAP_THRESHOLD],
        "wall_time_seconds": [round(r.wall_time, 3) for r in reports],
    }
    if extra:
        summary.update(extra)
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
