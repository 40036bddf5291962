"""Execution-based verification, identifier repair and abstention gates.

The contract of :func:`verify` is that whatever it returns is either ``None``
or a query that executes cleanly against the database.
"""

from __future__ import annotations

import enum
import logging
import re
import sqlite3
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from sqlglot import exp
from sqlglot.tokens import TokenType

import sqlglot

from reliasql import kernels
from reliasql.core import Candidate, QuestionRecord, SqlOrNull, Stage
from reliasql.corpus import preprocess
from reliasql.generator import SqlParseError, cte_names, parse_sql
from reliasql.schema import SchemaCatalog

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_MS = 30_000
MAX_EDIT_DISTANCE = 2
MAX_INDEXED_VALUE_LEN = 64

_PATIENT_RE = re.compile(r"\bpatient\s+(\d+)", re.IGNORECASE)

_ALLOWED_ACTIONS = {
    sqlite3.SQLITE_SELECT,
    sqlite3.SQLITE_READ,
    sqlite3.SQLITE_FUNCTION,
    getattr(sqlite3, "SQLITE_RECURSIVE", 33),
}


class FailureKind(enum.Enum):
    SYNTAX = "Syntax"
    MISSING_OBJECT = "MissingObject"
    RUNTIME = "Runtime"
    TIMEOUT = "Timeout"


@dataclass(frozen=True)
class ExecutionOutcome:
    """Either ``rows`` (success) or ``failure`` with a message."""

    rows: Optional[tuple[tuple, ...]] = None
    failure: Optional[FailureKind] = None
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.failure is None


def _authorize(action, *_):
    return sqlite3.SQLITE_OK if action in _ALLOWED_ACTIONS else sqlite3.SQLITE_DENY


class Database:
    """Read-only handle on a SQLite file with one connection per thread."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            raise FileNotFoundError(f"database not found: {self.path}")
        self._local = threading.local()

    def _open(self) -> sqlite3.Connection:
        uri = f"file:{self.path.resolve().as_posix()}?mode=ro"
        return sqlite3.connect(uri, uri=True, check_same_thread=False)

    def connection(self) -> sqlite3.Connection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            conn = self._open()
            conn.set_authorizer(_authorize)
            self._local.conn = conn
        return conn

    def introspect(self) -> sqlite3.Connection:
        """Unrestricted read-only connection for catalog queries (PRAGMA etc.)."""
        return self._open()


def as_database(db) -> Database:
    return db if isinstance(db, Database) else Database(db)


def _classify(message: str) -> FailureKind:
    msg = message.lower()
    if "interrupted" in msg:
        return FailureKind.TIMEOUT
    if "syntax error" in msg or "incomplete input" in msg or "unrecognized token" in msg:
        return FailureKind.SYNTAX
    if msg.startswith("no such") or "no such table" in msg or "no such column" in msg or "no such function" in msg:
        return FailureKind.MISSING_OBJECT
    return FailureKind.RUNTIME


def execute_check(sql: str, db, timeout_ms: int = DEFAULT_TIMEOUT_MS) -> ExecutionOutcome:
    """Run ``sql`` read-only; never raises."""
    if not sql or not sql.strip():
        return ExecutionOutcome(failure=FailureKind.SYNTAX, message="empty statement")
    conn = as_database(db).connection()
    deadline = time.monotonic() + timeout_ms / 1000.0
    conn.set_progress_handler(lambda: 1 if time.monotonic() > deadline else 0, 1000)
    try:
        cur = conn.execute(sql)
        if cur.description is None:
            return ExecutionOutcome(failure=FailureKind.RUNTIME, message="statement returns no rows")
        rows = tuple(tuple(r) for r in cur.fetchall())
        return ExecutionOutcome(rows=rows)
    except (sqlite3.Error, sqlite3.Warning) as exc:
        message = str(exc)
        if "not authorized" in message.lower():
            return ExecutionOutcome(failure=FailureKind.RUNTIME, message="only SELECT statements are allowed")
        if isinstance(exc, (sqlite3.ProgrammingError, sqlite3.Warning)):
            return ExecutionOutcome(failure=FailureKind.RUNTIME, message=message)
        return ExecutionOutcome(failure=_classify(message), message=message)
    except Exception as exc:  # e.g. OverflowError converting a result value
        return ExecutionOutcome(failure=FailureKind.RUNTIME, message=f"{type(exc).__name__}: {exc}")
    finally:
        conn.set_progress_handler(None, 0)


@dataclass(frozen=True)
class ValueIndex:
    locations: Mapping[str, frozenset[tuple[str, str]]] = field(default_factory=dict)

    def get(self, value: str) -> frozenset[tuple[str, str]]:
        return self.locations.get(value, frozenset())

    def __len__(self) -> int:
        return len(self.locations)


def _text_affinity(declared: str) -> bool:
    t = declared.upper()
    if "INT" in t:
        return False
    return any(s in t for s in ("CHAR", "CLOB", "TEXT"))


def build_value_index(db, catalog: SchemaCatalog, max_len: int = MAX_INDEXED_VALUE_LEN) -> ValueIndex:
    """Distinct short text values of every text-affinity catalog column."""
    conn = as_database(db).introspect()
    locs: dict[str, set[tuple[str, str]]] = defaultdict(set)
    try:
        for table in catalog.tables:
            info = conn.execute(f'PRAGMA table_info("{table.name}")').fetchall()
            declared = {row[1].lower(): row[2] for row in info}
            for col in table.columns:
                if col.name.lower() not in declared or not _text_affinity(declared[col.name.lower()]):
                    continue
                query = (
                    f'SELECT DISTINCT "{col.name}" FROM "{table.name}" '
                    f'WHERE typeof("{col.name}") = \'text\' AND length("{col.name}") <= ?'
                )
                for (value,) in conn.execute(query, (max_len,)):
                    locs[value].add((table.name, col.name))
    finally:
        conn.close()
    return ValueIndex({v: frozenset(s) for v, s in locs.items()})


# -- identifier repair -------------------------------------------------------

_COMPARISONS = (exp.EQ, exp.NEQ, exp.Like, exp.ILike, exp.Glob)


def _literal_pairs(tree: exp.Expression) -> list[tuple[exp.Column, str]]:
    """(column, string literal) pairs that sit in the same comparison."""
    pairs = []
    for node in tree.find_all(*_COMPARISONS):
        left, right = node.this, node.expression
        for col, lit in ((left, right), (right, left)):
            if isinstance(col, exp.Column) and isinstance(lit, exp.Literal) and lit.is_string:
                pairs.append((col, lit.this))
    for node in tree.find_all(exp.In):
        if isinstance(node.this, exp.Column):
            for lit in node.expressions:
                if isinstance(lit, exp.Literal) and lit.is_string:
                    pairs.append((node.this, lit.this))
    return pairs


def _scope_tables(node: exp.Expression) -> list[exp.Table]:
    """Tables in the FROM/JOIN clauses of the SELECT that directly encloses ``node``."""
    select = node.find_ancestor(exp.Select)
    if select is None:
        return []
    tables = []
    sources = []
    from_ = select.args.get("from_") or select.args.get("from")
    if from_ is not None:
        sources.append(from_.this)
    sources.extend(j.this for j in select.args.get("joins") or ())
    for src in sources:
        if isinstance(src, exp.Table):
            tables.append(src)
    return tables


def _resolve_column_table(col: exp.Column) -> Optional[str]:
    """Name of the table a column reads from, if it can be pinned down."""
    scope = _scope_tables(col)
    qualifier = col.table
    if qualifier:
        q = qualifier.lower()
        for t in scope:
            if (t.alias_or_name or "").lower() == q or t.name.lower() == q:
                return t.name
        return qualifier
    return scope[0].name if len(scope) == 1 else None


def _unique(items: Iterable[str]) -> Optional[str]:
    items = set(items)
    return items.pop() if len(items) == 1 else None


def _close_names(name: str, candidates: Iterable[str]) -> set[str]:
    target = name.lower()
    return {
        c for c in candidates if kernels.levenshtein(target, c.lower(), MAX_EDIT_DISTANCE) <= MAX_EDIT_DISTANCE
    }


def _splice(sql: str, renames: Mapping[str, str]) -> tuple[str, bool]:
    tokens = sqlglot.tokenize(sql, read="sqlite")
    pieces, cursor, changed = [], 0, False
    for tok in tokens:
        if tok.token_type not in (TokenType.VAR, TokenType.IDENTIFIER):
            continue
        new = renames.get(tok.text.lower())
        if new is None:
            continue
        segment = sql[tok.start: tok.end + 1]
        idx = segment.lower().find(tok.text.lower())
        if idx < 0:
            continue
        start = tok.start + idx
        pieces.append(sql[cursor:start])
        pieces.append(new)
        cursor = start + len(tok.text)
        changed = True
    pieces.append(sql[cursor:])
    return "".join(pieces), changed


def repair_names(sql: str, catalog: SchemaCatalog, value_index: ValueIndex) -> tuple[str, bool]:
    """Replace table/column identifiers that are absent from the catalog.

    A missing name is replaced by the unique catalog name within edit
    distance two, or else by the unique table/column where a string literal
    compared against it occurs in the database. Anything ambiguous is left
    alone, and names that exist in the catalog are never touched.
    """
    tree = parse_sql(sql)
    ctes = cte_names(tree)
    table_names = {t.name.lower() for t in catalog.tables}
    column_names = catalog.all_column_names()
    aliases = {a.alias.lower() for a in tree.find_all(exp.Alias) if a.alias}
    aliases |= {t.alias.lower() for t in tree.find_all(exp.Table) if t.alias}
    aliases |= {s.alias.lower() for s in tree.find_all(exp.Subquery) if s.alias}
    reserved = table_names | column_names | aliases | ctes
    pairs = _literal_pairs(tree)

    decisions: dict[str, set[str]] = defaultdict(set)

    unknown_tables = sorted(
        {t.name for t in tree.find_all(exp.Table) if t.name and t.name.lower() not in reserved}
    )
    for name in unknown_tables:
        close = _close_names(name, catalog.table_names)
        choice = _unique(close)
        if choice is None:
            located = None
            for col, literal in pairs:
                if (_resolve_column_table(col) or "").lower() != name.lower():
                    continue
                hits = {tab for tab, _ in value_index.get(literal)}
                if not hits:
                    continue
                named = {tab for tab, c in value_index.get(literal) if c.lower() == col.name.lower()}
                hits = named or hits
                located = hits if located is None else located & hits
            if located:
                choice = _unique(located)
        if choice is not None:
            decisions[name.lower()].add(choice)

    table_map = {k: next(iter(v)) for k, v in decisions.items() if len(v) == 1}

    def mapped(name: Optional[str]) -> Optional[str]:
        if name is None:
            return None
        return table_map.get(name.lower(), catalog.canonical(name) or name)

    for col in tree.find_all(exp.Column):
        name = col.name
        if not name or name.lower() in reserved or col.this.args.get("quoted"):
            continue
        qualified = bool(col.table)
        if qualified:
            owner = mapped(_resolve_column_table(col))
            scope = [owner] if owner else []
        else:
            scope = [mapped(t.name) for t in _scope_tables(col)]
        scope_tables = [catalog.table(s) for s in scope if s and catalog.table(s) is not None]
        if not scope_tables:
            continue
        choice = _unique(_close_names(name, [c.name for t in scope_tables for c in t.columns]))
        if choice is None:
            scope_keys = {t.name.lower() for t in scope_tables}
            located = None
            for other, literal in pairs:
                if other is not col:
                    continue
                hits = {c for tab, c in value_index.get(literal) if tab.lower() in scope_keys}
                if hits:
                    located = hits if located is None else located & hits
            if located:
                choice = _unique(located)
        if choice is not None:
            decisions[name.lower()].add(choice)

    renames = {k: next(iter(v)) for k, v in decisions.items() if len(v) == 1}
    if not renames:
        return sql, False
    return _splice(sql, renames)


# -- gates ------------------------------------------------------------------

def patient_id_gate(raw_text: str) -> bool:
    """True when a ``patient <digits>`` mention does not have exactly 8 digits."""
    return any(len(m.group(1)) != 8 for m in _PATIENT_RE.finditer(raw_text))


def vocab_gate(tokens: Sequence[str], unanswerable_vocab: Iterable[str]) -> bool:
    vocab = unanswerable_vocab if isinstance(unanswerable_vocab, (set, frozenset)) else set(unanswerable_vocab)
    return bool(tokens) and all(t in vocab for t in tokens)


@dataclass(frozen=True)
class GateConfig:
    patient_id: bool = True
    vocab: bool = False
    unanswerable_vocab: frozenset[str] = frozenset()


def gate_fires(question: QuestionRecord, gates: GateConfig) -> Optional[str]:
    if gates.patient_id and patient_id_gate(question.raw_text):
        return "patient-number gate"
    if gates.vocab and vocab_gate(preprocess(question.raw_text), gates.unanswerable_vocab):
        return "vocabulary gate"
    return None


def verify_candidate(
    candidate: Candidate,
    question: QuestionRecord,
    db,
    catalog: SchemaCatalog,
    value_index: ValueIndex,
    gates: GateConfig = GateConfig(),
    *,
    execute: bool = True,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> Candidate:
    """:func:`verify` that also records what happened on the candidate."""
    if candidate.prediction is None:
        return candidate
    gate = gate_fires(question, gates)
    if gate:
        return candidate.advance(Stage.GATED, None, gate)
    if not execute:
        return candidate
    sql = candidate.prediction
    first = execute_check(sql, db, timeout_ms)
    if first.ok:
        return candidate
    try:
        repaired, changed = repair_names(sql, catalog, value_index)
    except SqlParseError:
        changed = False
    if changed:
        second = execute_check(repaired, db, timeout_ms)
        if second.ok:
            return candidate.advance(Stage.REPAIRED, repaired, "names repaired")
        first = second
    return candidate.advance(Stage.GATED, None, f"execution {first.failure.value}: {first.message}")


def verify(
    candidate: SqlOrNull,
    question: QuestionRecord,
    db,
    catalog: SchemaCatalog,
    value_index: ValueIndex,
    gates: GateConfig = GateConfig(),
    *,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> SqlOrNull:
    cand = Candidate(candidate, Stage.STAGE1)
    return verify_candidate(cand, question, db, catalog, value_index, gates, timeout_ms=timeout_ms).prediction
