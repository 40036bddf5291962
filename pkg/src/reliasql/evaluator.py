"""Execution accuracy, the reliability score family and table-selection metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union


from reliasql.core import GoldLabel, OutcomeLedger, SqlOrNull, ValidationError, phi
from reliasql.ensembler import _sort_key
from reliasql.generator import SqlParseError, parse_sql
from reliasql.verifier import DEFAULT_TIMEOUT_MS, execute_check

logger = logging.getLogger(__name__)

Penalty = Union[float, int, str]
DEFAULT_PENALTIES: tuple[Penalty, ...] = (0, 5, 10, "N")
REL_TOL = 1e-9


class GoldExecutionError(ValidationError):
    """A gold query failed to execute: the label itself is bad."""


def penalty_label(p: Penalty) -> str:
    if isinstance(p, str):
        if p.upper() != "N":
            return penalty_label(float(p))
        return "N"
    return f"{float(p):g}"


def parse_penalties(text: str) -> list[Penalty]:
    out: list[Penalty] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        out.append("N" if part.upper() == "N" else float(part))
    return out


def _values_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    num = (int, float)
    if isinstance(a, num) and isinstance(b, num) and not isinstance(a, bool) and not isinstance(b, bool):
        return math.isclose(a, b, rel_tol=REL_TOL, abs_tol=0.0)
    if isinstance(a, num) or isinstance(b, num):
        return False
    return type(a) is type(b) and a == b


def _rows_equal(r1: tuple, r2: tuple) -> bool:
    return len(r1) == len(r2) and all(_values_equal(a, b) for a, b in zip(r1, r2))


def results_match(pred_rows: Sequence[tuple], gold_rows: Sequence[tuple], ordered: bool) -> bool:
    if len(pred_rows) != len(gold_rows):
        return False
    if not ordered:
        key = lambda r: tuple(_sort_key(v) for v in r)  # noqa: E731
        pred_rows, gold_rows = sorted(pred_rows, key=key), sorted(gold_rows, key=key)
    return all(_rows_equal(p, g) for p, g in zip(pred_rows, gold_rows))


def has_top_level_order(sql: str) -> bool:
    try:
        tree = parse_sql(sql)
    except SqlParseError:
        return False
    return tree.args.get("order") is not None


def exec_accuracy(pred_sql: str, gold_sql: str, db, timeout_ms: int = DEFAULT_TIMEOUT_MS) -> bool:
    gold = execute_check(gold_sql, db, timeout_ms)
    if not gold.ok:
        raise GoldExecutionError(f"gold query fails ({gold.failure.value}): {gold.message}")
    pred = execute_check(pred_sql, db, timeout_ms)
    if not pred.ok:
        return False
    return results_match(pred.rows, gold.rows, has_top_level_order(gold_sql))


@dataclass(frozen=True)
class RSReport:
    n_total: int
    n_ans: int
    n_una: int
    n_correct: int
    n_abstain_ans: int
    n_wrong: int
    n_attempt_una: int
    n_abstain_una: int
    rs: Mapping[str, float] = field(default_factory=dict)

    @property
    def n_penalized(self) -> int:
        return self.n_wrong + self.n_attempt_una

    def to_json(self, digits: Optional[int] = 2) -> dict:
        rs = {k: (round(v, digits) if digits is not None else v) for k, v in self.rs.items()}
        return {
            "n_total": self.n_total,
            "n_ans": self.n_ans,
            "n_una": self.n_una,
            "n_correct": self.n_correct,
            "n_abstain_ans": self.n_abstain_ans,
            "n_wrong": self.n_wrong,
            "n_attempt_una": self.n_attempt_una,
            "n_abstain_una": self.n_abstain_una,
            "rs": rs,
        }

    def render(self) -> str:
        head = " ".join(f"RS({k})".rjust(12) for k in self.rs)
        vals = " ".join(f"{v:12.2f}" for v in self.rs.values())
        counts = (
            f"n={self.n_total} answerable={self.n_ans} unanswerable={self.n_una} "
            f"correct={self.n_correct} wrong={self.n_wrong} abstain_ans={self.n_abstain_ans} "
            f"attempt_una={self.n_attempt_una} abstain_una={self.n_abstain_una}"
        )
        return f"{head}\n{vals}\n{counts}"


def score_outcomes(outcomes: Iterable[OutcomeLedger], penalties: Sequence[Penalty] = DEFAULT_PENALTIES) -> RSReport:
    outcomes = list(outcomes)
    n = len(outcomes)
    if n == 0:
        raise ValidationError("cannot score an empty dataset")
    counts = dict(correct=0, abstain_ans=0, wrong=0, attempt_una=0, abstain_una=0)
    for o in outcomes:
        if o.answerable:
            if not o.attempted:
                counts["abstain_ans"] += 1
            elif o.correct:
                counts["correct"] += 1
            else:
                counts["wrong"] += 1
        else:
            counts["attempt_una" if o.attempted else "abstain_una"] += 1
    rs = {}
    for p in penalties:
        label = penalty_label(p)
        c = float(n) if label == "N" else float(p)
        rs[label] = 100.0 * math.fsum(phi(o, c) for o in outcomes) / n
    n_ans = sum(o.answerable for o in outcomes)
    return RSReport(
        n_total=n,
        n_ans=n_ans,
        n_una=n - n_ans,
        n_correct=counts["correct"],
        n_abstain_ans=counts["abstain_ans"],
        n_wrong=counts["wrong"],
        n_attempt_una=counts["attempt_una"],
        n_abstain_una=counts["abstain_una"],
        rs=rs,
    )


def build_outcomes(
    predictions: Mapping[str, SqlOrNull],
    golds: Mapping[str, GoldLabel],
    db=None,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> list[OutcomeLedger]:
    unknown = sorted(set(predictions) - set(golds))
    if unknown:
        raise ValidationError(f"predictions for unknown ids: {unknown[:10]}")
    missing = sorted(set(golds) - set(predictions))
    if missing:
        logger.warning("%d ids without predictions are scored as abstentions", len(missing))
    outcomes = []
    for qid in sorted(golds):
        gold = golds[qid]
        pred = predictions.get(qid)
        attempted = pred is not None
        correct = None
        if gold.answerable and attempted:
            if db is None:
                raise ValidationError("a database is needed to score attempted answerable questions")
            correct = exec_accuracy(pred, gold.answer, db, timeout_ms)
        outcomes.append(OutcomeLedger(qid, gold.answerable, attempted, correct))
    return outcomes


def score(
    predictions: Mapping[str, SqlOrNull],
    golds: Mapping[str, GoldLabel],
    db=None,
    penalties: Sequence[Penalty] = DEFAULT_PENALTIES,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> RSReport:
    return score_outcomes(build_outcomes(predictions, golds, db, timeout_ms), penalties)


@dataclass(frozen=True)
class TableSetMetrics:
    inclusion: float
    jaccard: float
    exact: float


def pair_metrics(gold: set, pred: set) -> TableSetMetrics:
    gold, pred = set(gold), set(pred)
    union = gold | pred
    jaccard = 1.0 if not union else len(gold & pred) / len(union)
    return TableSetMetrics(float(gold <= pred), jaccard, float(gold == pred))


def table_metrics(pairs: Iterable[tuple[set, set]]) -> TableSetMetrics:
    per = [pair_metrics(g, p) for g, p in pairs]
    if not per:
        raise ValueError("table_metrics needs at least one pair")
    n = len(per)
    return TableSetMetrics(
        math.fsum(m.inclusion for m in per) / n,
        math.fsum(m.jaccard for m in per) / n,
        math.fsum(m.exact for m in per) / n,
    )
