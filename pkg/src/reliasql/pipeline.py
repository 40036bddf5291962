"""End-to-end wiring: templatize -> generate -> verify -> ensemble.

Each stage is also exposed on its own so the CLI subcommands can run one
stage over files written by the previous one; :meth:`Pipeline.run` is the
same composition done in memory.
"""

from __future__ import annotations

import json
import logging
import os
import platform
import sqlite3
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, TypeVar

from reliasql import __version__, kernels
from reliasql.core import Candidate, QuestionRecord, SqlOrNull, sql_to_wire
from reliasql.corpus import preprocess, unanswerable_vocab
from reliasql.dataset_io import (
    Dataset,
    load_dataset,
    write_json,
    write_predictions,
)
from reliasql.ensembler import VoteMode, apply_alignment, majority_vote
from reliasql.evaluator import DEFAULT_PENALTIES, score
from reliasql.gateway import ConfigurationError, Gateway, make_gateway
from reliasql.generator import GenerationConfig, final_candidates, generate
from reliasql.schema import SchemaCatalog, load_catalog
from reliasql.templatizer import HashingEmbedder, Lexicons, TemplateIndex, Templatizer, build_index, nearest_entries
from reliasql.verifier import DEFAULT_TIMEOUT_MS, Database, GateConfig, ValueIndex, build_value_index, verify_candidate

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

_PATH_FIELDS = (
    "questions",
    "labels",
    "database",
    "catalog",
    "output",
    "train_questions",
    "train_labels",
    "template_index",
    "lexicons",
    "templates_dir",
)


@dataclass
class PipelineConfig:
    questions: Optional[Path] = None
    labels: Optional[Path] = None
    database: Optional[Path] = None
    catalog: Optional[Path] = None
    output: Optional[Path] = None
    train_questions: Optional[Path] = None
    train_labels: Optional[Path] = None
    template_index: Optional[Path] = None
    lexicons: Optional[Path] = None
    templates_dir: Optional[Path] = None
    gateway: dict = field(default_factory=lambda: {"mode": "stub"})

    templatize: bool = True
    reflect: bool = True
    verify: bool = True
    ensemble: bool = True
    gates: bool = True
    patient_gate: bool = True
    vocab_gate: bool = False

    generation: GenerationConfig = field(default_factory=GenerationConfig)
    vote_mode: VoteMode = VoteMode.BY_QUERY_TEXT
    penalties: list = field(default_factory=lambda: list(DEFAULT_PENALTIES))
    template_k: int = 3
    embed_masked: bool = True
    embedding_dim: int = 512
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    seed: int = 0
    jobs: Optional[int] = None

    @classmethod
    def from_dict(cls, doc: Mapping, base_dir: Path | None = None) -> "PipelineConfig":
        base_dir = base_dir or Path.cwd()
        known = {f.name for f in fields(cls)}
        extra = sorted(set(doc) - known)
        if extra:
            raise ConfigurationError(f"unknown config keys: {', '.join(extra)}")
        values = dict(doc)
        for key in _PATH_FIELDS:
            if values.get(key) is not None:
                p = Path(values[key])
                values[key] = p if p.is_absolute() else base_dir / p
        gw = dict(values.get("gateway") or {"mode": "stub"})
        for key in ("stub_rules", "cache"):
            if gw.get(key) is not None and not Path(gw[key]).is_absolute():
                gw[key] = str(base_dir / gw[key])
        values["gateway"] = gw
        if isinstance(values.get("generation"), Mapping):
            values["generation"] = GenerationConfig(**values["generation"])
        if values.get("vote_mode") is not None and not isinstance(values["vote_mode"], VoteMode):
            values["vote_mode"] = VoteMode(values["vote_mode"])
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path, overrides: Mapping | None = None) -> "PipelineConfig":
        path = Path(path)
        doc = json.loads(path.read_text("utf-8"))
        doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(doc, path.parent)

    def to_json(self, relative_to: Path | None = None) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Path):
                if relative_to is not None:
                    try:
                        value = os.path.relpath(value, relative_to)
                    except ValueError:
                        pass
                value = Path(value).as_posix()
            elif isinstance(value, GenerationConfig):
                value = {**asdict(value), "format": value.format.value}
            elif isinstance(value, VoteMode):
                value = value.value
            out[f.name] = value
        gw = dict(out["gateway"])
        for key in ("stub_rules", "cache"):
            if gw.get(key) and relative_to is not None:
                gw[key] = Path(os.path.relpath(gw[key], relative_to)).as_posix()
        out["gateway"] = gw
        return out

    @property
    def gate_config(self) -> GateConfig:
        return GateConfig(patient_id=self.gates and self.patient_gate, vocab=self.gates and self.vocab_gate)

    def worker_count(self) -> int:
        if self.jobs:
            return max(1, self.jobs)
        n = os.cpu_count() or 1
        return min(n, 8) if self.gateway.get("mode") == "live" else n


def parallel_map(fn: Callable[[T], R], items: Sequence[T], jobs: int) -> list[R]:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def candidates_to_json(cands: Mapping[str, Sequence[Candidate]]) -> dict:
    return {qid: [c.to_json() for c in cands[qid]] for qid in sorted(cands)}


def candidates_from_json(doc: Mapping) -> dict[str, list[Candidate]]:
    return {qid: [Candidate.from_json(c) for c in items] for qid, items in doc.items()}


class Pipeline:
    def __init__(self, config: PipelineConfig, gateway: Gateway | None = None):
        self.config = config
        self.catalog: SchemaCatalog = load_catalog(config.catalog)
        self.gateway = gateway if gateway is not None else make_gateway(config.gateway)
        self.lexicons = Lexicons.load(config.lexicons) if config.lexicons else Lexicons.default()
        self.embed = HashingEmbedder(config.embedding_dim)
        self._db: Optional[Database] = None
        self._value_index: Optional[ValueIndex] = None
        self._train: Optional[Dataset] = None
        self._template_index: Optional[TemplateIndex] = None
        self._few_shot_index: Optional[TemplateIndex] = None

    # -- resources -----------------------------------------------------
    @property
    def db(self) -> Database:
        if self._db is None:
            if self.config.database is None:
                raise ConfigurationError("no database configured")
            self._db = Database(self.config.database)
        return self._db

    @property
    def value_index(self) -> ValueIndex:
        if self._value_index is None:
            self._value_index = build_value_index(self.db, self.catalog)
        return self._value_index

    @property
    def train(self) -> Optional[Dataset]:
        if self._train is None and self.config.train_questions is not None:
            self._train = load_dataset(self.config.train_questions, self.config.train_labels, "train")
        return self._train

    @property
    def template_index(self) -> TemplateIndex:
        if self._template_index is None:
            if self.config.template_index is not None:
                self._template_index = TemplateIndex.load(self.config.template_index)
            elif self.train is not None:
                self._template_index = build_index(
                    self.train.questions, self.embed, self.lexicons, use_masked=self.config.embed_masked
                )
            else:
                raise ConfigurationError("templatization needs train_questions or template_index")
        return self._template_index

    @property
    def few_shot_index(self) -> TemplateIndex:
        if self._few_shot_index is None:
            if self.train is None or self.train.labels is None:
                raise ConfigurationError("few-shot prompting needs train_questions and train_labels")
            labeled = [q for q in self.train.questions if q.id in self.train.labels]
            self._few_shot_index = build_index(labeled, self.embed, self.lexicons)
        return self._few_shot_index

    def gate_config(self) -> GateConfig:
        gates = self.config.gate_config
        if gates.vocab:
            if self.train is None or self.train.labels is None:
                raise ConfigurationError("the vocabulary gate needs train_questions and train_labels")
            vocab = unanswerable_vocab(preprocess(q.raw_text) for q in self.train.unanswerable())
            gates = replace(gates, unanswerable_vocab=vocab)
        return gates

    def check_paths(self) -> None:
        for name in ("questions", "labels", "database", "catalog", "train_questions", "train_labels",
                     "template_index", "lexicons", "templates_dir"):
            path = getattr(self.config, name)
            if path is not None and not Path(path).exists():
                raise ConfigurationError(f"{name} path does not exist: {path}")
        for key in ("stub_rules",):
            p = self.config.gateway.get(key)
            if p and not Path(p).exists():
                raise ConfigurationError(f"gateway.{key} path does not exist: {p}")
        if self.config.database is None and (self.config.verify or self.config.labels is not None):
            raise ConfigurationError("a database path is required")

    # -- stages --------------------------------------------------------
    def few_shot_for(self, record: QuestionRecord) -> list[tuple[str, str]]:
        k = self.config.generation.few_shot_k
        if k == 0:
            return []
        index = self.few_shot_index
        from reliasql.templatizer import mask_values

        query = self.embed(mask_values(record.model_input, self.lexicons)[0])
        by_id = self.train.by_id()
        pairs = []
        for entry, _ in nearest_entries(query, index, k):
            q = by_id[entry.source_id]
            pairs.append((q.raw_text, sql_to_wire(self.train.labels[q.id].answer)))
        return pairs

    def templatize_one(self, record: QuestionRecord) -> QuestionRecord:
        worker = Templatizer(
            self.template_index,
            self.gateway,
            self.lexicons,
            self.embed,
            self.config.template_k,
            self.config.embed_masked,
            template=_template_text(self.config, "templatize.txt"),
        )
        try:
            return worker(record)
        except Exception as exc:  # keep the question; fall back to its raw text
            logger.error("%s: templatization failed: %s", record.id, exc)
            return replace(record, templated_text=record.raw_text)

    def generate_one(self, record: QuestionRecord) -> list[Candidate]:
        try:
            return generate(
                record.model_input,
                self.catalog,
                self.config.generation,
                self.gateway,
                self.few_shot_for(record),
                reflect=self.config.reflect,
                templates_dir=self.config.templates_dir,
            )
        except Exception as exc:
            logger.error("%s: generation failed: %s", record.id, exc)
            return [Candidate(None, _first_stage(), 0, f"generation failed: {exc}")]

    def verify_one(self, record: QuestionRecord, candidates: Sequence[Candidate], gates: GateConfig) -> list[Candidate]:
        out = []
        for cand in final_candidates(candidates):
            try:
                out.append(
                    verify_candidate(
                        cand,
                        record,
                        self.db if self.config.verify else None,
                        self.catalog,
                        self.value_index if self.config.verify else ValueIndex(),
                        gates,
                        execute=self.config.verify,
                        timeout_ms=self.config.timeout_ms,
                    )
                )
            except Exception as exc:
                logger.error("%s: verification failed: %s", record.id, exc)
                out.append(cand.advance(max(cand.stage, _gated()), None, f"verification failed: {exc}"))
        return out

    def ensemble_one(self, record: QuestionRecord, candidates: Sequence[Candidate]) -> SqlOrNull:
        finals = final_candidates(candidates)
        if not finals:
            return None
        if not self.config.ensemble:
            return finals[0].prediction
        try:
            finals = apply_alignment(
                record.model_input, finals, self.gateway, template=_template_text(self.config, "alignment.txt")
            )
            db = self.db if self.config.vote_mode is VoteMode.BY_EXECUTION_RESULT else None
            return majority_vote([c.prediction for c in finals], self.config.vote_mode, db)
        except Exception as exc:
            logger.error("%s: ensembling failed: %s", record.id, exc)
            return None

    # -- batch ---------------------------------------------------------
    def stage_templatize(self, records: Sequence[QuestionRecord]) -> list[QuestionRecord]:
        if not self.config.templatize:
            return list(records)
        self.template_index  # build once before fanning out
        return parallel_map(self.templatize_one, list(records), self.config.worker_count())

    def stage_generate(self, records: Sequence[QuestionRecord]) -> dict[str, list[Candidate]]:
        if self.config.generation.few_shot_k:
            self.few_shot_index
        results = parallel_map(self.generate_one, list(records), self.config.worker_count())
        return {r.id: c for r, c in zip(records, results)}

    def stage_verify(
        self, records: Sequence[QuestionRecord], candidates: Mapping[str, Sequence[Candidate]]
    ) -> dict[str, list[Candidate]]:
        gates = self.gate_config()
        if self.config.verify:
            self.value_index
        results = parallel_map(
            lambda r: self.verify_one(r, candidates.get(r.id, ()), gates),
            list(records),
            self.config.worker_count(),
        )
        return {r.id: c for r, c in zip(records, results)}

    def stage_ensemble(
        self, records: Sequence[QuestionRecord], candidates: Mapping[str, Sequence[Candidate]]
    ) -> dict[str, SqlOrNull]:
        results = parallel_map(
            lambda r: self.ensemble_one(r, candidates.get(r.id, ())),
            list(records),
            self.config.worker_count(),
        )
        return {r.id: p for r, p in zip(records, results)}

    def run(self, dataset: Dataset) -> dict[str, SqlOrNull]:
        records = self.stage_templatize(dataset.questions)
        cands = self.stage_generate(records)
        verified = self.stage_verify(records, cands)
        return self.stage_ensemble(records, verified)


def _first_stage():
    from reliasql.core import Stage

    return Stage.STAGE1


def _gated():
    from reliasql.core import Stage

    return Stage.GATED


def _template_text(config: PipelineConfig, name: str) -> Optional[str]:
    if config.templates_dir is None:
        return None
    path = Path(config.templates_dir) / name
    return path.read_text("utf-8") if path.exists() else None


def versions() -> dict:
    import numpy
    import sqlglot

    return {
        "reliasql": __version__,
        "python": platform.python_version(),
        "sqlite": sqlite3.sqlite_version,
        "sqlglot": sqlglot.__version__,
        "numpy": numpy.__version__,
        "kernels": kernels.BACKEND,
    }


def run_pipeline(config: PipelineConfig, gateway: Gateway | None = None) -> int:
    """Run every stage, write predictions (+ report) and a manifest into ``config.output``."""
    if config.output is None:
        raise ConfigurationError("no output directory configured")
    pipeline = Pipeline(config, gateway)
    pipeline.check_paths()
    if config.questions is None:
        raise ConfigurationError("no questions file configured")
    dataset = load_dataset(config.questions, config.labels)
    predictions = pipeline.run(dataset)

    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(out / "predictions.json", predictions)
    if dataset.labels is not None:
        report = score(predictions, dataset.labels, pipeline.db, config.penalties, config.timeout_ms)
        write_json(out / "report.json", report.to_json(), indent=2)
    manifest = {
        "config": config.to_json(relative_to=out),
        "gateway": pipeline.gateway.stats(),
        "versions": versions(),
        "n_questions": len(dataset),
        "n_abstained": sum(p is None for p in predictions.values()),
    }
    write_json(out / "manifest.json", manifest, indent=2)
    return 0
