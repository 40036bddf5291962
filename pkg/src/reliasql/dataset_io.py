"""Benchmark files in EHRSQL layout, prediction files, and stratified folds."""

from __future__ import annotations

import json
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

from reliasql.core import GoldLabel, QuestionRecord, SqlOrNull, ValidationError, sql_from_wire, sql_to_wire

ANSWERABLE = "answerable"


class DatasetParseError(ValidationError):
    def __init__(self, path: Path, offset: int, msg: str):
        super().__init__(f"{path}: malformed JSON at byte {offset}: {msg}")
        self.path = path
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    split_name: str
    questions: tuple[QuestionRecord, ...]
    labels: Optional[Mapping[str, GoldLabel]] = None

    def __post_init__(self) -> None:
        seen = set()
        for q in self.questions:
            if q.id in seen:
                raise ValidationError(f"duplicate question id {q.id!r}")
            seen.add(q.id)
        if self.labels is not None:
            missing = sorted(set(self.labels) - seen)
            if missing:
                raise ValidationError(f"label ids missing from questions: {missing[:10]}")

    def __len__(self) -> int:
        return len(self.questions)

    def by_id(self) -> dict[str, QuestionRecord]:
        return {q.id: q for q in self.questions}

    def unanswerable(self) -> list[QuestionRecord]:
        if self.labels is None:
            return []
        return [q for q in self.questions if q.id in self.labels and not self.labels[q.id].answerable]


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    assignment: Mapping[str, int] = field(default_factory=dict)
    seed: Optional[int] = None

    def folds(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.k)]
        for qid, fold in sorted(self.assignment.items()):
            out[fold].append(qid)
        return out

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "assignment": dict(sorted(self.assignment.items())),
        }


def read_json(path: str | Path):
    path = Path(path)
    raw = path.read_bytes()
    try:
        return json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as exc:
        # JSONDecodeError.pos is a character offset; report bytes.
        offset = len(exc.doc[: exc.pos].encode("utf-8"))
        raise DatasetParseError(path, offset, exc.msg) from exc
    except UnicodeDecodeError as exc:
        raise DatasetParseError(path, exc.start, "invalid UTF-8") from exc


def _question_items(doc, path: Path) -> list:
    if isinstance(doc, Mapping) and "data" in doc:
        doc = doc["data"]
    if not isinstance(doc, list):
        raise ValidationError(f"{path}: expected an array of questions or an object with key 'data'")
    return doc


def parse_questions(doc, path: Path = Path("<memory>")) -> list[QuestionRecord]:
    records = []
    for i, item in enumerate(_question_items(doc, path)):
        if not isinstance(item, Mapping):
            raise ValidationError(f"{path}: item {i} is not an object")
        qid, text = item.get("id"), item.get("question")
        if not isinstance(qid, str) or not isinstance(text, str):
            raise ValidationError(f"{path}: item {i} needs string fields 'id' and 'question'")
        bindings = item.get("bindings") or {}
        records.append(
            QuestionRecord(
                id=qid,
                raw_text=text,
                masked_text=item.get("masked"),
                templated_text=item.get("templated"),
                bindings={k: tuple(v) if isinstance(v, list) else (v,) for k, v in bindings.items()},
            )
        )
    return records


def parse_labels(doc, path: Path = Path("<memory>")) -> dict[str, GoldLabel]:
    if not isinstance(doc, Mapping):
        raise ValidationError(f"{path}: labels must be a JSON object mapping id to SQL or 'null'")
    return {qid: GoldLabel(qid, sql_from_wire(value)) for qid, value in doc.items()}


def load_dataset(
    questions_path: str | Path,
    labels_path: str | Path | None = None,
    split_name: Optional[str] = None,
) -> Dataset:
    questions_path = Path(questions_path)
    questions = parse_questions(read_json(questions_path), questions_path)
    labels = None
    if labels_path is not None:
        labels_path = Path(labels_path)
        labels = parse_labels(read_json(labels_path), labels_path)
    return Dataset(split_name or questions_path.parent.name or "data", tuple(questions), labels)


def questions_to_json(questions: Iterable[QuestionRecord]) -> list[dict]:
    out = []
    for q in questions:
        item = {"id": q.id, "question": q.raw_text}
        if q.masked_text is not None:
            item["masked"] = q.masked_text
            item["bindings"] = {k: list(v) for k, v in q.bindings.items()}
        if q.templated_text is not None:
            item["templated"] = q.templated_text
        out.append(item)
    return out


def write_json(path: str | Path, obj, *, indent: Optional[int] = None) -> None:
    path = Path(path)
    text = json.dumps(obj, ensure_ascii=False, indent=indent, separators=None if indent else (",", ":"))
    path.write_text(text + ("\n" if indent else ""), encoding="utf-8")


def write_predictions(path: str | Path, predictions: Mapping[str, SqlOrNull]) -> None:
    for qid in predictions:
        if not qid:
            raise ValidationError("prediction ids must be non-empty")
    payload = {qid: sql_to_wire(predictions[qid]) for qid in sorted(predictions)}
    write_json(path, payload)


def load_predictions(path: str | Path) -> dict[str, SqlOrNull]:
    path = Path(path)
    doc = read_json(path)
    if not isinstance(doc, Mapping):
        raise ValidationError(f"{path}: predictions must be a JSON object")
    return {qid: sql_from_wire(v) for qid, v in doc.items()}


def stratified_kfold(
    dataset: Dataset,
    k: int,
    categorizer: Callable[[str], str],
    seed: int,
) -> FoldAssignment:
    """Assign every question to one of ``k`` folds, balancing each stratum.

    Ids are shuffled within each stratum, the strata are laid end to end in
    label order and the result is dealt round-robin. Dealing continues across
    stratum boundaries, so both overall fold sizes and per-stratum counts
    differ by at most one.
    """
    if dataset.labels is None:
        raise ValidationError("stratified split needs gold labels")
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(dataset):
        raise ValueError(f"k={k} exceeds dataset size {len(dataset)}")

    strata: dict[str, list[str]] = defaultdict(list)
    for q in dataset.questions:
        strata[categorizer(q.id)].append(q.id)

    rng = random.Random(seed)
    order: list[str] = []
    for name in sorted(strata):
        ids = sorted(strata[name])
        rng.shuffle(ids)
        order.extend(ids)
    return FoldAssignment(k, {qid: i % k for i, qid in enumerate(order)}, seed)


def load_folds(path: str | Path) -> FoldAssignment:
    doc = read_json(path)
    return FoldAssignment(int(doc["k"]), {str(a): int(b) for a, b in doc["assignment"].items()}, doc.get("seed"))


def stratum_counts(folds: FoldAssignment, categorizer: Callable[[str], str]) -> dict[str, list[int]]:
    counts: dict[str, list[int]] = defaultdict(lambda: [0] * folds.k)
    for qid, fold in folds.assignment.items():
        counts[categorizer(qid)][fold] += 1
    return dict(counts)


def ehrsql_split_paths(data_dir: str | Path, split: str) -> tuple[Path, Optional[Path]]:
    """Locate ``data.json``/``label.json`` for a split in an EHRSQL release."""
    base = Path(data_dir) / split
    labels = base / "label.json"
    return base / "data.json", labels if labels.exists() else None


def few_shot_pairs(dataset: Dataset, ids: Sequence[str]) -> list[tuple[str, str]]:
    if dataset.labels is None:
        return []
    by_id = dataset.by_id()
    return [
        (by_id[i].raw_text, sql_to_wire(dataset.labels[i].answer))
        for i in ids
        if i in dataset.labels
    ]
