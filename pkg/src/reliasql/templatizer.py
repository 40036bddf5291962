"""Rewrite free-form questions into the phrasing of the training templates.

Values that identify a patient or a clinical concept are masked first so that
neighbour search compares question *shape*, not content; the LLM then
rewrites the masked question after seeing its nearest templates, and the
original values are put back.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import httpx
import numpy as np

from reliasql import kernels
from reliasql.core import QuestionRecord, fill_placeholders
from reliasql.gateway import ChatRequest, Gateway, TransportError, _retrying_post
from reliasql.schema import load_template

logger = logging.getLogger(__name__)

PATIENT_PLACEHOLDER = "<patient number>"
DEFAULT_DIM = 512
_PLACEHOLDER_RE = re.compile(r"<[^<>]+>")


@dataclass(frozen=True)
class Lexicons:
    """Ordered placeholder -> compiled pattern table.

    Earlier entries win when two matches start at the same offset and have
    the same length.
    """

    patterns: tuple[tuple[str, re.Pattern], ...]

    @classmethod
    def default(cls) -> "Lexicons":
        return cls.from_json({PATIENT_PLACEHOLDER: {"pattern": r"(?<=\bpatient )\d+"}})

    @classmethod
    def empty(cls) -> "Lexicons":
        return cls(())

    @classmethod
    def from_json(cls, doc: Mapping) -> "Lexicons":
        out = []
        for placeholder, spec in doc.items():
            if not _PLACEHOLDER_RE.fullmatch(placeholder):
                raise ValueError(f"placeholder must look like <name>, got {placeholder!r}")
            if isinstance(spec, str):
                spec = {"pattern": spec}
            elif isinstance(spec, list):
                spec = {"terms": spec}
            if "pattern" in spec:
                pattern = re.compile(spec["pattern"], re.IGNORECASE)
            else:
                terms = sorted({t for t in spec.get("terms", ()) if t.strip()}, key=lambda t: (-len(t), t))
                if not terms:
                    continue
                body = "|".join(re.escape(t) for t in terms)
                pattern = re.compile(rf"(?<!\w)(?:{body})(?!\w)", re.IGNORECASE)
            out.append((placeholder, pattern))
        return cls(tuple(out))

    @classmethod
    def load(cls, path: str | Path) -> "Lexicons":
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))


def mask_values(raw_text: str, lexicons: Lexicons) -> tuple[str, dict[str, tuple[str, ...]]]:
    """Replace lexicon matches by their placeholders.

    Existing placeholders are never looked inside (they bind to themselves),
    which makes the operation idempotent.
    """
    spans: list[tuple[int, int, int, str]] = []
    segments = []
    pos = 0
    for ph in _PLACEHOLDER_RE.finditer(raw_text):
        segments.append((pos, ph.start()))
        # a placeholder already in the text is bound to itself
        spans.append((ph.start(), -(ph.end() - ph.start()), -1, ph.group(0)))
        pos = ph.end()
    segments.append((pos, len(raw_text)))

    for rank, (placeholder, pattern) in enumerate(lexicons.patterns):
        for lo, hi in segments:
            for m in pattern.finditer(raw_text, lo, hi):
                if m.end() > m.start():
                    spans.append((m.start(), -(m.end() - m.start()), rank, placeholder))
    spans.sort()

    pieces = []
    bindings: dict[str, list[str]] = {}
    cursor = 0
    for start, neg_len, _, placeholder in spans:
        if start < cursor:
            continue
        end = start - neg_len
        pieces.append(raw_text[cursor:start])
        pieces.append(placeholder)
        bindings.setdefault(placeholder, []).append(raw_text[start:end])
        cursor = end
    pieces.append(raw_text[cursor:])
    return "".join(pieces), {k: tuple(v) for k, v in bindings.items()}


def mask_record(record: QuestionRecord, lexicons: Lexicons) -> QuestionRecord:
    masked, bindings = mask_values(record.raw_text, lexicons)
    return replace(record, masked_text=masked, bindings=bindings)


class HashingEmbedder:
    """Lower-cased whitespace tokens hashed into ``dim`` buckets, L2-normalised."""

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dim

    def __call__(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in text.lower().split():
            vec[self.bucket(token)] += 1.0
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return vec


class RemoteEmbedder:
    """OpenAI-style ``/embeddings`` endpoint: ``{model, input}`` -> ``data[0].embedding``."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        dim: int,
        *,
        api_key_env: str = "LLM_API_KEY",
        client: httpx.Client | None = None,
        retries: int = 3,
        backoff: float = 1.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.dim = dim
        self._client = client or httpx.Client(timeout=60.0)
        key = os.environ.get(api_key_env, "")
        self._headers = {"Authorization": f"Bearer {key}"} if key else {}
        self.retries = retries
        self.backoff = backoff

    def __call__(self, text: str) -> np.ndarray:
        body = _retrying_post(
            self._client,
            self.endpoint,
            {"model": self.model, "input": text},
            self._headers,
            retries=self.retries,
            backoff=self.backoff,
            sleep=time.sleep,
        )
        try:
            vec = np.asarray(body["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise TransportError("malformed embedding response") from exc
        if vec.shape != (self.dim,) or not np.all(np.isfinite(vec)):
            raise TransportError(f"embedding has shape {vec.shape}, expected ({self.dim},) finite")
        return vec


@dataclass(frozen=True)
class IndexEntry:
    template: str
    vector: np.ndarray
    source_id: str


@dataclass
class TemplateIndex:
    entries: list[IndexEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        kept = []
        for entry in self.entries:
            if entry.template in seen:
                continue
            seen.add(entry.template)
            kept.append(entry)
        self.entries = kept
        dims = {e.vector.shape for e in kept}
        if len(dims) > 1:
            raise ValueError(f"index vectors disagree on shape: {sorted(dims)}")
        for e in kept:
            if not np.all(np.isfinite(e.vector)):
                raise ValueError(f"non-finite embedding for {e.source_id}")
        self._matrix = np.vstack([e.vector for e in kept]) if kept else np.zeros((0, 0))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def dim(self) -> int:
        return self._matrix.shape[1] if len(self) else 0

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(
                    json.dumps(
                        {"template": e.template, "vector": e.vector.tolist(), "source_id": e.source_id},
                        ensure_ascii=False,
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path: str | Path) -> "TemplateIndex":
        entries = []
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    entries.append(
                        IndexEntry(rec["template"], np.asarray(rec["vector"], dtype=np.float64), rec.get("source_id", ""))
                    )
        return cls(entries)


def build_index(
    records: Iterable[QuestionRecord],
    embed,
    lexicons: Lexicons,
    *,
    use_masked: bool = True,
) -> TemplateIndex:
    entries = []
    for record in records:
        text = mask_values(record.raw_text, lexicons)[0] if use_masked else record.raw_text
        entries.append(IndexEntry(text, embed(text), record.id))
    return TemplateIndex(entries)


def nearest_entries(query: np.ndarray, index: TemplateIndex, k: int) -> list[tuple[IndexEntry, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not len(index):
        raise ValueError("template index is empty")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dim,):
        raise ValueError(f"query has dim {query.shape}, index has dim {index.dim}")
    dist = kernels.euclidean_distances(index.matrix, query)
    texts = [e.template for e in index.entries]
    best = heapq.nsmallest(k, range(len(texts)), key=lambda i: (dist[i], texts[i]))
    return [(index.entries[i], float(dist[i])) for i in best]


def nearest_templates(query: np.ndarray, index: TemplateIndex, k: int) -> list[tuple[str, float]]:
    """The ``k`` closest templates, ascending by distance then by text."""
    return [(e.template, d) for e, d in nearest_entries(query, index, k)]


def _clean_rewrite(text: str) -> str:
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1].strip()
    return text


def build_templatize_request(
    question: str,
    neighbors: Sequence[str],
    *,
    template: Optional[str] = None,
    temperature: float = 0.0,
    model_tag: str = "templatizer",
) -> ChatRequest:
    template = template if template is not None else load_template("templatize.txt")
    listing = "\n".join(f'- "{n}"' for n in neighbors)
    user = template.format(neighbors=listing, question=question)
    return ChatRequest(
        system_text="You rewrite clinical database questions.",
        user_text=user,
        temperature=temperature,
        max_output_tokens=256,
        model_tag=model_tag,
    )


def templatize(
    record: QuestionRecord,
    neighbors: Sequence[str],
    gateway: Gateway,
    *,
    template: Optional[str] = None,
    temperature: float = 0.0,
    model_tag: str = "templatizer",
) -> str:
    if not neighbors:
        raise ValueError("templatize needs at least one neighbour template")
    masked = record.masked_text if record.masked_text is not None else record.raw_text
    request = build_templatize_request(
        masked, neighbors, template=template, temperature=temperature, model_tag=model_tag
    )
    rewrite = _clean_rewrite(gateway.complete(request).text)
    if not rewrite:
        return record.raw_text
    restored = fill_placeholders(rewrite, record.bindings)
    if set(_PLACEHOLDER_RE.findall(restored)) - set(_PLACEHOLDER_RE.findall(record.raw_text)):
        return record.raw_text
    for values in record.bindings.values():
        for value in values:
            if value not in restored:
                return record.raw_text
    return restored


@dataclass
class Templatizer:
    """Masking, neighbour retrieval and rewriting bundled for the pipeline."""

    index: TemplateIndex
    gateway: Gateway
    lexicons: Lexicons = field(default_factory=Lexicons.default)
    embed: object = field(default_factory=HashingEmbedder)
    k: int = 3
    embed_masked: bool = True
    template: Optional[str] = None

    def __call__(self, record: QuestionRecord) -> QuestionRecord:
        record = mask_record(record, self.lexicons)
        query = self.embed(record.masked_text if self.embed_masked else record.raw_text)
        neighbors = [t for t, _ in nearest_templates(query, self.index, self.k)]
        text = templatize(record, neighbors, self.gateway, template=self.template)
        return replace(record, templated_text=text)
