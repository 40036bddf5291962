"""Intent-alignment veto and majority voting over verified candidates."""

from __future__ import annotations

import enum
import logging
import re
from typing import Optional, Sequence

from reliasql.core import Candidate, SqlOrNull, normalize_ws
from reliasql.gateway import ChatRequest, Gateway, GatewayError
from reliasql.schema import load_template
from reliasql.verifier import execute_check

logger = logging.getLogger(__name__)

_YES_NO = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_NULL_GROUP = ("null",)


class VoteMode(enum.Enum):
    BY_QUERY_TEXT = "query"
    BY_EXECUTION_RESULT = "result"


def alignment_check(
    question: str,
    sql: str,
    gateway: Gateway,
    *,
    template: Optional[str] = None,
    model_tag: str = "alignment",
) -> bool:
    """Ask the model whether ``sql`` answers ``question``; fails open."""
    template = template if template is not None else load_template("alignment.txt")
    request = ChatRequest(
        system_text="You review SQL queries for clinical questions.",
        user_text=template.format(question=question, sql=sql),
        temperature=0.0,
        max_output_tokens=8,
        model_tag=model_tag,
    )
    try:
        reply = gateway.complete(request).text
    except GatewayError as exc:
        logger.warning("alignment check skipped: %s", exc)
        return True
    match = _YES_NO.search(reply)
    if match is None:
        return True
    return match.group(1).lower() == "yes"


def apply_alignment(
    question: str, candidates: Sequence[Candidate], gateway: Gateway, **kwargs
) -> list[Candidate]:
    """Demote misaligned candidates to abstentions instead of dropping them."""
    out = []
    for cand in candidates:
        if cand.prediction is not None and not alignment_check(question, cand.prediction, gateway, **kwargs):
            cand = cand.advance(cand.stage, None, "alignment check failed")
        out.append(cand)
    return out


def _sort_key(value):
    if value is None:
        return (0, 0)
    if isinstance(value, (int, float)):
        return (1, float(value))
    if isinstance(value, str):
        return (2, value)
    return (3, bytes(value))


def canonical_result(rows: Sequence[tuple]) -> tuple:
    """Rows as a sorted multiset; ``2`` and ``2.0`` compare and hash equal."""
    return tuple(sorted((tuple(r) for r in rows), key=lambda r: tuple(_sort_key(v) for v in r)))


def majority_vote(
    candidates: Sequence[SqlOrNull],
    mode: VoteMode = VoteMode.BY_QUERY_TEXT,
    db=None,
    *,
    timeout_ms: int = 30_000,
) -> SqlOrNull:
    """Largest group wins; ties prefer a non-null group, then the earliest group.

    The earliest member of the winning group is returned.
    """
    if not candidates:
        raise ValueError("majority_vote needs at least one candidate")
    if mode is VoteMode.BY_EXECUTION_RESULT and db is None:
        raise ValueError("voting by execution result needs a database")

    groups: dict[object, list[int]] = {}
    for i, cand in enumerate(candidates):
        if cand is None:
            key = _NULL_GROUP
        elif mode is VoteMode.BY_QUERY_TEXT:
            key = ("sql", normalize_ws(cand))
        else:
            outcome = execute_check(cand, db, timeout_ms)
            key = ("rows", canonical_result(outcome.rows)) if outcome.ok else _NULL_GROUP
        groups.setdefault(key, []).append(i)

    def rank(item):
        key, members = item
        return (-len(members), key == _NULL_GROUP, members[0])

    key, members = min(groups.items(), key=rank)
    if key == _NULL_GROUP:
        return None
    return candidates[members[0]]
