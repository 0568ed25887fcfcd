"""Frozen embedding tables, zero-shot concept detection and question features.

Tables stand in for CLIP-style encoders: a ``label`` table of concept names
and an ``image`` table of scene vectors share one 512-d space, and a 300-d
``kg`` table embeds knowledge-graph tokens. All of them are plain word2vec
text files.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kgstore import Triple

_TOKEN_RE = re.compile(r"\w+")


class EmbeddingLoadError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    name: str
    tokens: tuple[str, ...]
    vectors: np.ndarray  # [n, dim], float32
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.tokens):
            raise ValueError(f"{len(self.tokens)} tokens vs vectors of shape {self.vectors.shape}")
        if self.vectors.shape[1] < 1:
            raise ValueError("dim must be positive")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("non-finite embedding value")
        index = {}
        for i, tok in enumerate(self.tokens):
            if tok in index:
                raise ValueError(f"duplicate token {tok!r}")
            index[tok] = i
        self.vectors.setflags(write=False)
        object.__setattr__(self, "index", index)

    @classmethod
    def from_dict(cls, name: str, entries: dict[str, Sequence[float]], dtype=np.float32):
        tokens = tuple(entries)
        vectors = np.array([entries[t] for t in tokens], dtype=dtype).reshape(len(tokens), -1)
        return cls(name, tokens, vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token) -> bool:
        return token in self.index

    def __getitem__(self, token: str) -> np.ndarray:
        return self.vectors[self.index[token]]

    def get(self, token: str, default=None):
        i = self.index.get(token)
        return default if i is None else self.vectors[i]

    def subset(self, tokens: Iterable[str], name: str | None = None) -> "EmbeddingTable":
        tokens = tuple(tokens)
        return EmbeddingTable(name or self.name, tokens,
                              np.array([self[t] for t in tokens], dtype=self.vectors.dtype))


def load_embeddings(path, name: str | None = None) -> EmbeddingTable:
    """Read a word2vec text file (``<count> <dim>`` header, then one row per token)."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise EmbeddingLoadError("header must be '<count> <dim>'", 1)
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError:
            raise EmbeddingLoadError("header must be '<count> <dim>'", 1) from None
        if count < 0 or dim < 1:
            raise EmbeddingLoadError(f"bad header counts {count} {dim}", 1)
        tokens: list[str] = []
        seen: set[str] = set()
        vectors = np.empty((count, dim), dtype=np.float32)
        lineno = 1
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(" ")
            if not parts or parts == [""]:
                raise EmbeddingLoadError("empty row", lineno)
            if len(tokens) == count:
                raise EmbeddingLoadError(f"more rows than the {count} declared", lineno)
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise EmbeddingLoadError(f"{token!r} has {len(values)} values, expected {dim}", lineno)
            if token in seen:
                raise EmbeddingLoadError(f"duplicate token {token!r}", lineno)
            try:
                row = np.array([float(v) for v in values], dtype=np.float32)
            except ValueError:
                raise EmbeddingLoadError(f"unparseable value in row {token!r}", lineno) from None
            if not np.all(np.isfinite(row)):
                raise EmbeddingLoadError(f"non-finite value in row {token!r}", lineno)
            vectors[len(tokens)] = row
            tokens.append(token)
            seen.add(token)
        if len(tokens) != count:
            raise EmbeddingLoadError(f"header declares {count} rows, found {len(tokens)}", lineno)
    return EmbeddingTable(name or path.stem, tuple(tokens), vectors)


def format_float(x: float) -> str:
    # 9 significant digits round-trip any float32 exactly
    return f"{float(x):.9g}"


def save_embeddings(table: EmbeddingTable, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(table)} {table.dim}\n")
        for tok, vec in zip(table.tokens, table.vectors.astype(np.float32)):
            if not tok or any(c.isspace() for c in tok):
                raise ValueError(f"token {tok!r} cannot be written in word2vec text format")
            fh.write(tok + " " + " ".join(format_float(v) for v in vec) + "\n")


def random_table(name: str, tokens: Sequence[str], dim: int, rng: np.random.Generator) -> EmbeddingTable:
    """Seeded Gaussian rows, L2-normalized, stored in float32."""
    vecs = rng.standard_normal((len(tokens), dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return EmbeddingTable(name, tuple(tokens), vecs.astype(np.float32))


# ---------------------------------------------------------------- concept detection

@dataclass(frozen=True)
class ConceptDetection:
    concepts: tuple[tuple[str, float], ...]

    @property
    def tokens(self) -> list[str]:
        return [t for t, _ in self.concepts]


def _cosines(image_vec: np.ndarray, labels: EmbeddingTable) -> np.ndarray:
    v = np.asarray(image_vec, dtype=np.float64)
    if v.shape != (labels.dim,):
        raise ValueError(f"image vector of shape {v.shape} vs label dim {labels.dim}")
    if not np.all(np.isfinite(v)):
        raise ValueError("image vector is not finite")
    vn = np.linalg.norm(v)
    if vn == 0:
        raise ValueError("cosine undefined for a zero-norm image vector")
    mat = labels.vectors.astype(np.float64)
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0):
        bad = labels.tokens[int(np.argmin(norms))]
        raise ValueError(f"cosine undefined for zero-norm label {bad!r}")
    return np.clip(mat @ v / (norms * vn), -1.0, 1.0)


def detect_concepts(image_vec, labels: EmbeddingTable, top_k: int = 5) -> ConceptDetection:
    """Zero-shot detection: the ``top_k`` labels closest in cosine to ``image_vec``.

    Ties are broken lexicographically by token.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if len(labels) == 0:
        raise ValueError("label table is empty")
    sims = _cosines(image_vec, labels)
    order = sorted(range(len(labels)), key=lambda i: (-sims[i], labels.tokens[i]))[:top_k]
    return ConceptDetection(tuple((labels.tokens[i], float(sims[i])) for i in order))


# ---------------------------------------------------------------- question features

def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def load_stopwords(path=None) -> frozenset[str]:
    """One token per line; ``#`` starts a comment. Defaults to the bundled English list."""
    if path is None:
        text = resources.files("krisplite.data").joinpath("stopwords.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    words = set()
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip().lower()
        if line:
            words.add(line)
    return frozenset(words)


def extract_keywords(question: str, stopwords: Iterable[str]) -> list[str]:
    stop = stopwords if isinstance(stopwords, (set, frozenset)) else set(stopwords)
    out, seen = [], set()
    for tok in tokenize(question):
        if tok in stop or tok in seen:
            continue
        seen.add(tok)
        out.append(tok)
    return out


def encode_question(question: str, table: EmbeddingTable) -> tuple[np.ndarray, bool]:
    """Mean of the in-vocabulary token vectors.

    Returns ``(vector, oov)``; ``oov`` is True when no token was known, in
    which case the vector is zero.
    """
    if len(table) == 0:
        raise ValueError("embedding table is empty")
    rows = [table.index[t] for t in tokenize(question) if t in table.index]
    if not rows:
        return np.zeros(table.dim, dtype=table.vectors.dtype), True
    return table.vectors[rows].astype(np.float64).mean(axis=0).astype(table.vectors.dtype), False


def encode_question_tokens(question: str, table: EmbeddingTable, max_tokens: int = 16) -> np.ndarray:
    """Per-token vectors [n, dim] of the first ``max_tokens`` in-vocabulary tokens.

    An all-OOV question gives a single zero row so attention still has a key.
    """
    rows = [table.index[t] for t in tokenize(question) if t in table.index][:max_tokens]
    if not rows:
        return np.zeros((1, table.dim), dtype=table.vectors.dtype)
    return table.vectors[rows]


def embed_triple(triple: Triple, table: EmbeddingTable) -> np.ndarray:
    """Mean of the head, relation and tail vectors (missing tokens are skipped)."""
    parts = [table.get(tok) for tok in (triple.head, triple.relation, triple.tail)]
    parts = [p for p in parts if p is not None]
    if not parts:
        return np.zeros(table.dim, dtype=table.vectors.dtype)
    return np.mean(np.asarray(parts, dtype=np.float64), axis=0).astype(table.vectors.dtype)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine undefined for zero vectors")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


__all__ = [
    "ConceptDetection", "EmbeddingLoadError", "EmbeddingTable", "cosine", "detect_concepts",
    "embed_triple", "encode_question", "encode_question_tokens", "extract_keywords",
    "format_float", "load_embeddings", "load_stopwords", "random_table", "save_embeddings",
    "tokenize",
]
