"""ConceptNet-style triple store with image-first retrieval.

Ingestion reads the five-column assertion dumps ConceptNet 5 ships
(``edge-uri  relation-uri  start-uri  end-uri  json-metadata``), keeps edges
whose endpoints are both in one language, and strips the URI scaffolding down
to bare tokens. The index is an inverted map from concept to the ids of the
triples touching it.
"""
from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Sequence

IMAGE_CONCEPT = "image_concept"
QUESTION_KEYWORD = "question_keyword"

IMAGE_TIER_MULTIPLIER = 2.0
KEYWORD_TIER_MULTIPLIER = 1.0
EXTRA_MATCH_BONUS = 0.5
DEFAULT_K = 5


class AssertionParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class KgFormatError(ValueError):
    pass


def _check_token(tok: str, what: str) -> None:
    if not tok or any(c.isspace() for c in tok):
        raise ValueError(f"{what} {tok!r} must be non-empty and contain no whitespace")


@dataclass(frozen=True)
class Triple:
    head: str
    relation: str
    tail: str
    weight: float = 1.0

    def __post_init__(self):
        _check_token(self.head, "head")
        _check_token(self.tail, "tail")
        _check_token(self.relation, "relation")
        if self.head.startswith("/c/") or self.tail.startswith("/c/"):
            raise ValueError("concept still carries a /c/ prefix")
        if self.relation.startswith("/r/"):
            raise ValueError("relation still carries a /r/ prefix")
        if not (self.weight >= 0 and math.isfinite(self.weight)):
            raise ValueError(f"weight must be finite and >= 0, got {self.weight!r}")

    @property
    def key(self) -> tuple[str, str, str]:
        return self.head, self.relation, self.tail

    def __str__(self):
        return f"{self.head} /r/{self.relation} {self.tail}"


# ---------------------------------------------------------------- parsing

def _split_concept(uri: str, lineno) -> tuple[str, str]:
    parts = uri.split("/")
    if len(parts) < 4 or parts[0] != "" or parts[1] != "c" or not parts[2] or not parts[3]:
        raise AssertionParseError(f"bad concept URI {uri!r}", lineno)
    token = parts[3].lower()
    if any(c.isspace() for c in token):
        raise AssertionParseError(f"whitespace in concept {uri!r}", lineno)
    return parts[2], token


def _split_relation(uri: str, lineno) -> str:
    if not uri.startswith("/r/") or len(uri) == 3:
        raise AssertionParseError(f"bad relation URI {uri!r}", lineno)
    rel = uri[3:].rstrip("/")
    if not rel or any(c.isspace() for c in rel):
        raise AssertionParseError(f"bad relation URI {uri!r}", lineno)
    return rel


def parse_assertion_line(line: str, lang: str = "en", lineno: int | None = None) -> Triple | None:
    """Parse one dump row into a Triple.

    Returns None for rows to skip: blank lines, ``#`` comments, and edges
    with an endpoint outside ``lang``. A metadata object without ``weight``
    means weight 1.0. Malformed rows raise ``AssertionParseError``.
    """
    line = line.rstrip("\r\n")
    if not line.strip() or line.lstrip().startswith("#"):
        return None
    fields = line.split("\t")
    if len(fields) != 5:
        raise AssertionParseError(f"expected 5 tab-separated fields, got {len(fields)}", lineno)
    _, rel_uri, start_uri, end_uri, meta = fields
    relation = _split_relation(rel_uri, lineno)
    head_lang, head = _split_concept(start_uri, lineno)
    tail_lang, tail = _split_concept(end_uri, lineno)
    if head_lang != lang or tail_lang != lang:
        return None
    try:
        info = json.loads(meta)
    except json.JSONDecodeError as exc:
        raise AssertionParseError(f"invalid JSON metadata: {exc.msg}", lineno) from None
    if not isinstance(info, dict):
        raise AssertionParseError("metadata is not a JSON object", lineno)
    weight = info.get("weight", 1.0)
    if isinstance(weight, bool) or not isinstance(weight, (int, float)):
        raise AssertionParseError(f"non-numeric weight {weight!r}", lineno)
    weight = float(weight)
    if not math.isfinite(weight) or weight < 0:
        raise AssertionParseError(f"weight must be finite and >= 0, got {weight!r}", lineno)
    return Triple(head, relation, tail, weight)


def format_assertion_line(triple: Triple, lang: str = "en") -> str:
    """Inverse of ``parse_assertion_line`` (modulo the edge URI's exact form)."""
    rel = f"/r/{triple.relation}"
    start, end = f"/c/{lang}/{triple.head}", f"/c/{lang}/{triple.tail}"
    edge = f"/a/[{rel}/,{start}/,{end}/]"
    return "\t".join([edge, rel, start, end, json.dumps({"weight": triple.weight})])


@dataclass
class ParseStats:
    lines: int = 0
    kept: int = 0
    skipped: int = 0
    errors: list[AssertionParseError] | None = None

    def __post_init__(self):
        if self.errors is None:
            self.errors = []


def iter_assertions(lines: Iterable[str], lang: str = "en",
                    stats: ParseStats | None = None) -> Iterator[Triple]:
    """Yield parsed triples, counting (not raising) malformed rows into ``stats``."""
    stats = stats if stats is not None else ParseStats()
    for lineno, line in enumerate(lines, start=1):
        stats.lines += 1
        try:
            triple = parse_assertion_line(line, lang, lineno)
        except AssertionParseError as exc:
            stats.errors.append(exc)
            continue
        if triple is None:
            stats.skipped += 1
        else:
            stats.kept += 1
            yield triple


def read_assertions(path, lang: str = "en") -> tuple[list[Triple], ParseStats]:
    stats = ParseStats()
    with open(path, encoding="utf-8") as fh:
        triples = list(iter_assertions(fh, lang, stats))
    return triples, stats


# ---------------------------------------------------------------- index

@dataclass(frozen=True, eq=False)
class ConceptIndex:
    triples: tuple[Triple, ...]
    by_concept: Mapping[str, tuple[int, ...]]
    relation_counts: Mapping[str, int]

    def __len__(self):
        return len(self.triples)

    def touching(self, concept: str) -> tuple[int, ...]:
        return self.by_concept.get(concept, ())


def build_index(triples: Iterable[Triple]) -> ConceptIndex:
    triples = tuple(triples)
    by_concept: dict[str, list[int]] = {}
    for i, t in enumerate(triples):
        by_concept.setdefault(t.head, []).append(i)
        if t.tail != t.head:
            by_concept.setdefault(t.tail, []).append(i)
    counts = Counter(t.relation for t in triples)
    return ConceptIndex(
        triples,
        MappingProxyType({c: tuple(ids) for c, ids in by_concept.items()}),
        MappingProxyType(dict(sorted(counts.items()))),
    )


# ---------------------------------------------------------------- retrieval

@dataclass(frozen=True)
class RetrievalResult:
    triples: tuple[Triple, ...] = ()
    provenance: tuple[str, ...] = ()
    scores: tuple[float, ...] = ()
    ids: tuple[int, ...] = ()

    def __len__(self):
        return len(self.triples)

    def to_rows(self) -> list[str]:
        return [f"{t.head}\t{t.relation}\t{t.tail}\t{s!r}\t{p}"
                for t, s, p in zip(self.triples, self.scores, self.provenance)]


def score_triple(triple: Triple, image_concepts: set, query_terms: set) -> tuple[str, float]:
    """Tier and score of one candidate.

    Score is weight x tier multiplier (image 2, keyword 1) plus 0.5 for every
    query term the triple matches beyond the first.
    """
    ends = {triple.head, triple.tail}
    image = bool(ends & image_concepts)
    matches = len(ends & query_terms)
    mult = IMAGE_TIER_MULTIPLIER if image else KEYWORD_TIER_MULTIPLIER
    score = triple.weight * mult + EXTRA_MATCH_BONUS * max(matches - 1, 0)
    return (IMAGE_CONCEPT if image else QUESTION_KEYWORD), score


def rank_candidates(triples: Sequence[Triple], candidate_ids: Iterable[int],
                    image_concepts: Iterable[str], question_keywords: Iterable[str],
                    k: int, blocked_relations: Iterable[str] = ()) -> RetrievalResult:
    """Rank the given candidates: image tier first, score desc, id asc; dedup; cap at k."""
    images = set(image_concepts)
    query = images | set(question_keywords)
    blocked = set(blocked_relations)
    scored = []
    for i in candidate_ids:
        t = triples[i]
        if t.relation in blocked:
            continue
        tier, score = score_triple(t, images, query)
        scored.append((0 if tier == IMAGE_CONCEPT else 1, -score, i, tier, score))
    scored.sort(key=lambda row: row[:3])
    out_t, out_p, out_s, out_i, seen = [], [], [], [], set()
    for _, _, i, tier, score in scored:
        t = triples[i]
        if t.key in seen:
            continue
        seen.add(t.key)
        out_t.append(t)
        out_p.append(tier)
        out_s.append(score)
        out_i.append(i)
        if len(out_t) == k:
            break
    return RetrievalResult(tuple(out_t), tuple(out_p), tuple(out_s), tuple(out_i))


def retrieve(index: ConceptIndex, image_concepts: Sequence[str], question_keywords: Sequence[str],
             k: int = DEFAULT_K, blocked_relations: Iterable[str] = ()) -> RetrievalResult:
    """Up to ``k`` triples touching the query, image-concept matches first.

    Keyword-tier triples fill whatever slots the image tier leaves.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    candidates: set[int] = set()
    for term in set(image_concepts) | set(question_keywords):
        candidates.update(index.touching(term))
    return rank_candidates(index.triples, candidates, image_concepts, question_keywords,
                           k, blocked_relations)


def relation_histogram(results: Iterable[RetrievalResult]) -> dict[str, tuple[int, float]]:
    """Relation -> (count, fraction) over every triple in ``results``, most frequent first."""
    counts: Counter = Counter()
    for r in results:
        counts.update(t.relation for t in r.triples)
    total = sum(counts.values())
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {rel: (n, n / total) for rel, n in ordered}


# ---------------------------------------------------------------- persistence

INDEX_FORMAT = "krisplite-kg/1"


def _timestamp(source_mtime: float | None) -> str:
    # SOURCE_DATE_EPOCH keeps rebuilds byte-identical
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        ts = float(epoch)
    elif source_mtime is not None:
        ts = source_mtime
    else:
        ts = 0.0
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def index_paths(prefix) -> tuple[Path, Path]:
    prefix = str(prefix)
    return Path(prefix + ".triples.tsv"), Path(prefix + ".meta.json")


def save_index(index: ConceptIndex, prefix, language: str = "en",
               source_mtime: float | None = None, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.triples.tsv`` and its ``<prefix>.meta.json`` header.

    The build timestamp is ``SOURCE_DATE_EPOCH`` if set, else ``source_mtime``,
    else the epoch, so identical inputs give identical files.
    """
    tsv, meta = index_paths(prefix)
    tsv.parent.mkdir(parents=True, exist_ok=True)
    with tsv.open("w", encoding="utf-8", newline="\n") as fh:
        for t in index.triples:
            fh.write(f"{t.head}\t{t.relation}\t{t.tail}\t{t.weight!r}\n")
    header = {
        "format": INDEX_FORMAT,
        "language": language,
        "triples": len(index.triples),
        "concepts": len(index.by_concept),
        "relation_counts": dict(index.relation_counts),
        "built_at": _timestamp(source_mtime),
    }
    if extra:
        header.update(extra)
    meta.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return tsv, meta


def load_index(prefix) -> ConceptIndex:
    tsv, meta = index_paths(prefix)
    try:
        header = json.loads(meta.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise KgFormatError(f"missing index header {meta}") from None
    except json.JSONDecodeError as exc:
        raise KgFormatError(f"{meta}: invalid JSON ({exc.msg})") from None
    if header.get("format") != INDEX_FORMAT:
        raise KgFormatError(f"{meta}: unknown format {header.get('format')!r}")
    triples = []
    try:
        fh = tsv.open(encoding="utf-8")
    except FileNotFoundError:
        raise KgFormatError(f"missing triples file {tsv}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise KgFormatError(f"{tsv}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                triples.append(Triple(parts[0], parts[1], parts[2], float(parts[3])))
            except ValueError as exc:
                raise KgFormatError(f"{tsv}:{lineno}: {exc}") from None
    if len(triples) != header.get("triples"):
        raise KgFormatError(f"{tsv}: {len(triples)} triples but header says {header.get('triples')}")
    return build_index(triples)
