"""Two-pass SQL generation: brief schema first, then column detail for the tables it used."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import sqlglot
from sqlglot import exp
from sqlglot.errors import SqlglotError

from reliasql.core import Candidate, SqlOrNull, Stage
from reliasql.gateway import ChatRequest, Gateway, GatewayError
from reliasql.schema import RenderFormat, SchemaCatalog, load_template, render_brief, render_detailed

logger = logging.getLogger(__name__)

DIALECT_NOTE = (
    "The database uses SQLite: use SQLite date functions such as datetime() and strftime(), "
    "LIMIT instead of TOP, and || for string concatenation."
)
SYSTEM_TEXT = "You translate clinical questions into SQLite queries."

_FENCE_RE = re.compile(r"```[ \t]*(?:sqlite3?|sql)?[ \t]*\n?(.*?)```", re.DOTALL | re.IGNORECASE)
_LABEL_RE = re.compile(r"^\s*(?:sql(?:\s+query)?|answer)\s*:\s*", re.IGNORECASE)


class SqlParseError(ValueError):
    pass


@dataclass(frozen=True)
class GenerationConfig:
    format: RenderFormat = RenderFormat.NATURAL_LANGUAGE
    few_shot_k: int = 0
    temperature: Optional[float] = None
    ensemble_size: int = 1
    dialect_note: str = DIALECT_NOTE
    finetuned: bool = False
    model_tag: str = "generator"
    max_output_tokens: int = 512

    def __post_init__(self) -> None:
        object.__setattr__(self, "format", RenderFormat.parse(self.format))
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if self.few_shot_k < 0:
            raise ValueError("few_shot_k must be >= 0")
        if self.finetuned and self.few_shot_k:
            raise ValueError("a fine-tuned backend is prompted without few-shot examples")

    @property
    def effective_temperature(self) -> float:
        if self.temperature is not None:
            return self.temperature
        return 0.7 if self.ensemble_size > 1 else 0.0


@dataclass(frozen=True)
class TableRefs:
    known: frozenset[str]
    unknown: frozenset[str]


def parse_sql(sql_text: str) -> exp.Expression:
    try:
        tree = sqlglot.parse_one(sql_text, read="sqlite")
    except SqlglotError as exc:
        raise SqlParseError(str(exc).splitlines()[0]) from exc
    if tree is None:
        raise SqlParseError("empty statement")
    return tree


def cte_names(tree: exp.Expression) -> set[str]:
    return {cte.alias.lower() for cte in tree.find_all(exp.CTE) if cte.alias}


def extract_tables(sql_text: str, catalog: SchemaCatalog) -> TableRefs:
    """Tables named in FROM/JOIN clauses at any depth.

    Catalog names come back in their catalog spelling; anything else (minus
    CTE names) lands in ``unknown``.
    """
    if not sql_text.strip():
        raise SqlParseError("empty SQL")
    tree = parse_sql(sql_text)
    ctes = cte_names(tree)
    known, unknown = set(), set()
    for table in tree.find_all(exp.Table):
        name = table.name
        if not name or name.lower() in ctes:
            continue
        canonical = catalog.canonical(name)
        if canonical is not None:
            known.add(canonical)
        else:
            unknown.add(name)
    return TableRefs(frozenset(known), frozenset(unknown))


def _first_statement(text: str) -> str:
    quote = None
    for i, ch in enumerate(text):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "'\"`":
            quote = ch
        elif ch == ";":
            return text[:i]
    return text


def postprocess(completion: str) -> SqlOrNull:
    """Code fences off, first statement only, no trailing semicolon."""
    fenced = _FENCE_RE.search(completion)
    text = fenced.group(1) if fenced else completion
    text = _LABEL_RE.sub("", text.strip())
    text = _first_statement(text).strip().rstrip(";").strip()
    if not text or text.lower() == "null":
        return None
    return text


def _render_examples(few_shot: Sequence[tuple[str, str]], templates_dir) -> str:
    if not few_shot:
        return ""
    block = load_template("example.txt", templates_dir)
    return "".join(
        block.format(number=i, question=q, sql=s) for i, (q, s) in enumerate(few_shot, 1)
    )


def _build_prompt(question, tables_text, config, few_shot, templates_dir, sample_index) -> ChatRequest:
    if len(few_shot) != config.few_shot_k:
        raise ValueError(f"expected {config.few_shot_k} few-shot pairs, got {len(few_shot)}")
    task = load_template("task.txt", templates_dir).format(dialect_note=config.dialect_note).strip()
    layout = load_template("generation.txt", templates_dir)
    user = layout.format(
        task=task,
        tables=tables_text,
        examples=_render_examples(few_shot, templates_dir),
        question=question,
    )
    return ChatRequest(
        system_text=SYSTEM_TEXT,
        user_text=user,
        temperature=config.effective_temperature,
        max_output_tokens=config.max_output_tokens,
        model_tag=config.model_tag,
        sample_index=sample_index,
    )


def build_stage1_prompt(
    question: str,
    catalog: SchemaCatalog,
    config: GenerationConfig,
    few_shot: Sequence[tuple[str, str]] = (),
    *,
    templates_dir: str | Path | None = None,
    sample_index: int = 0,
) -> ChatRequest:
    tables = render_brief(catalog, config.format)
    return _build_prompt(question, tables, config, few_shot, templates_dir, sample_index)


def build_stage2_prompt(
    question: str,
    catalog: SchemaCatalog,
    config: GenerationConfig,
    few_shot: Sequence[tuple[str, str]],
    tables: Sequence[str],
    *,
    templates_dir: str | Path | None = None,
    sample_index: int = 0,
) -> ChatRequest:
    detail = render_detailed(catalog, tables)
    return _build_prompt(question, detail, config, few_shot, templates_dir, sample_index)


def generate(
    question: str,
    catalog: SchemaCatalog,
    config: GenerationConfig,
    gateway: Gateway,
    few_shot: Sequence[tuple[str, str]] = (),
    *,
    reflect: bool = True,
    templates_dir: str | Path | None = None,
) -> list[Candidate]:
    """Stage-1 and (optionally) reflected candidates for every ensemble member."""
    out: list[Candidate] = []
    for member in range(config.ensemble_size):
        stage1_req = build_stage1_prompt(
            question, catalog, config, few_shot, templates_dir=templates_dir, sample_index=member
        )
        try:
            stage1 = postprocess(gateway.complete(stage1_req).text)
        except GatewayError as exc:
            note = f"gateway failure: {exc}"
            logger.warning("member %d: %s", member, note)
            out.append(Candidate(None, Stage.STAGE1, member, note))
            if reflect:
                out.append(Candidate(None, Stage.REFLECTED, member, note))
            continue
        first = Candidate(stage1, Stage.STAGE1, member)
        out.append(first)
        if not reflect:
            continue
        if stage1 is None:
            out.append(first.advance(Stage.REFLECTED, None, "stage 1 abstained"))
            continue
        try:
            refs = extract_tables(stage1, catalog)
        except SqlParseError as exc:
            out.append(first.advance(Stage.REFLECTED, stage1, f"reflection skipped: {exc}"))
            continue
        stage2_req = build_stage2_prompt(
            question,
            catalog,
            config,
            few_shot,
            sorted(refs.known),
            templates_dir=templates_dir,
            sample_index=member,
        )
        note = f"unknown tables: {', '.join(sorted(refs.unknown))}" if refs.unknown else ""
        try:
            stage2 = postprocess(gateway.complete(stage2_req).text)
        except GatewayError as exc:
            logger.warning("member %d reflection: gateway failure: %s", member, exc)
            out.append(first.advance(Stage.REFLECTED, None, f"gateway failure: {exc}"))
            continue
        out.append(first.advance(Stage.REFLECTED, stage2, note))
    return out


def final_candidates(candidates: Sequence[Candidate]) -> list[Candidate]:
    """Most advanced candidate per ensemble member, in member order."""
    best: dict[int, Candidate] = {}
    for cand in candidates:
        cur = best.get(cand.member_index)
        if cur is None or cand.stage >= cur.stage:
            best[cand.member_index] = cand
    return [best[i] for i in sorted(best)]
