"""Question-distribution analysis: tokenisation, n-gram tables, unanswerable categories."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

from reliasql import kernels
from reliasql.core import QuestionRecord

# Only these marks and stop words are removed; everything else (apostrophes,
# "of", hyphens) survives.
STRIP_CHARS = ".,?"
STOP_WORDS = frozenset({"the", "a", "an"})
EXTERNAL_KNOWLEDGE_CUES = ("protocol", "protocols", "checklist", "what to do before")

_STRIP_TABLE = str.maketrans("", "", STRIP_CHARS)


def preprocess(text: str) -> list[str]:
    tokens = text.translate(_STRIP_TABLE).lower().split()
    return [t for t in tokens if t not in STOP_WORDS]


@dataclass(frozen=True)
class NGramTable:
    n: int
    counts: tuple[tuple[tuple[str, ...], int], ...]

    def top(self, k: int) -> list[tuple[tuple[str, ...], int]]:
        return list(self.counts[:k])

    def as_dict(self) -> dict[tuple[str, ...], int]:
        return dict(self.counts)

    def total(self) -> int:
        return sum(c for _, c in self.counts)


def ngram_counts(corpus: Iterable[Sequence[str]], n: int) -> NGramTable:
    """Sliding-window n-grams within each question, most frequent first."""
    if n not in (1, 2, 3):
        raise ValueError("n must be 1, 2 or 3")
    counts = kernels.count_ngrams([list(seq) for seq in corpus], n)
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return NGramTable(n, tuple(ordered))


def format_gram(gram: tuple[str, ...], count: int) -> str:
    return f"{gram!r}: {count}"


class UnansCategory(enum.Enum):
    INCORRECT_PATIENT_NUMBER = "Incorrect Patient Number"
    REQUIRE_EXTERNAL_KNOWLEDGE = "Require External Knowledge"
    OUT_OF_EHR_KNOWLEDGE_BASE = "Out of EHR Knowledge Base"
    UNCATEGORIZED = "Uncategorized"


def _contains(tokens: Sequence[str], cue: Sequence[str]) -> bool:
    n = len(cue)
    return any(list(tokens[i:i + n]) == list(cue) for i in range(len(tokens) - n + 1))


def categorize_unanswerable(
    record: QuestionRecord | str,
    cues: Sequence[str] = EXTERNAL_KNOWLEDGE_CUES,
) -> UnansCategory:
    """Heuristic bucket for a question already known to be unanswerable.

    Empty questions are left ``UNCATEGORIZED``.
    """
    from reliasql.verifier import patient_id_gate

    text = record.raw_text if isinstance(record, QuestionRecord) else record
    tokens = preprocess(text)
    if not tokens:
        return UnansCategory.UNCATEGORIZED
    if patient_id_gate(text):
        return UnansCategory.INCORRECT_PATIENT_NUMBER
    if any(_contains(tokens, preprocess(cue)) for cue in cues):
        return UnansCategory.REQUIRE_EXTERNAL_KNOWLEDGE
    return UnansCategory.OUT_OF_EHR_KNOWLEDGE_BASE


def unanswerable_vocab(corpus: Iterable[Sequence[str]]) -> frozenset[str]:
    return frozenset(tok for seq in corpus for tok in seq)


def analysis_report(splits: dict[str, list[str]], max_n: int = 3, top: int = 10) -> dict:
    """Top-``top`` grams for n = 1..max_n per split, JSON-ready."""
    report = {}
    for name, questions in splits.items():
        tokens = [preprocess(q) for q in questions]
        report[name] = {
            str(n): [[list(g), c] for g, c in ngram_counts(tokens, n).top(top)] for n in range(1, max_n + 1)
        }
    return report


def render_report_table(report: dict) -> str:
    """Plain-text layout: one block per split, one column per n."""
    lines = []
    for split, per_n in report.items():
        lines.append(f"== {split} ==")
        columns = [
            [format_gram(tuple(g), c) for g, c in per_n[n]] for n in sorted(per_n, key=int)
        ]
        widths = [max([len(f"{n}-gram")] + [len(s) for s in col]) for n, col in zip(sorted(per_n, key=int), columns)]
        lines.append(" | ".join(f"{n}-gram".ljust(w) for n, w in zip(sorted(per_n, key=int), widths)))
        depth = max((len(c) for c in columns), default=0)
        for i in range(depth):
            cells = [(col[i] if i < len(col) else "").ljust(w) for col, w in zip(columns, widths)]
            lines.append(" | ".join(cells).rstrip())
        lines.append("")
    return "\n".join(lines)
