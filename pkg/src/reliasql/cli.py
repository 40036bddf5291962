"""Command-line entry point: ``reliasql <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from reliasql.core import ValidationError
from reliasql.corpus import analysis_report, categorize_unanswerable, render_report_table
from reliasql.dataset_io import (
    ANSWERABLE,
    ehrsql_split_paths,
    load_dataset,
    load_predictions,
    parse_labels,
    questions_to_json,
    read_json,
    stratified_kfold,
    stratum_counts,
    write_json,
    write_predictions,
)
from reliasql.evaluator import parse_penalties, score
from reliasql.gateway import ConfigurationError, GatewayError
from reliasql.pipeline import (
    Pipeline,
    PipelineConfig,
    candidates_from_json,
    candidates_to_json,
    run_pipeline,
)
from reliasql.verifier import Database

logger = logging.getLogger("reliasql")

DATA_DIR_ENV = "EHRSQL_DATA_DIR"


def _shared_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("shared options")
    g.add_argument("--config", type=Path, help="JSON pipeline config; flags override its values")
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int, help="worker threads (default: CPU count, 8 max for live gateways)")
    g.add_argument("--log-level", default="WARNING")
    g.add_argument("--questions", type=Path)
    g.add_argument("--labels", type=Path)
    g.add_argument("--db", dest="database", type=Path)
    g.add_argument("--catalog", type=Path)
    g.add_argument("--train-questions", type=Path)
    g.add_argument("--train-labels", type=Path)
    g.add_argument("--template-index", type=Path)
    g.add_argument("--lexicons", type=Path)
    g.add_argument("--templates-dir", type=Path)
    g.add_argument("--gateway-mode", choices=["stub", "replay", "live"])
    g.add_argument("--stub-rules", type=Path)
    g.add_argument("--cache", type=Path)
    g.add_argument("--format", choices=["natural_language", "ddl", "nl", "sql"])
    g.add_argument("--few-shot", type=int)
    g.add_argument("--ensemble-size", type=int)
    g.add_argument("--temperature", type=float)
    g.add_argument("--vote-mode", choices=["query", "result"])
    g.add_argument("--timeout-ms", type=int)
    for name in ("templatize", "reflect", "verify", "ensemble", "gates", "patient-gate", "vocab-gate"):
        g.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction)
    return p


def build_parser() -> argparse.ArgumentParser:
    shared = _shared_parser()
    parser = argparse.ArgumentParser(prog="reliasql", description="Abstention-aware text-to-SQL pipeline and scorer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[shared], help="full pipeline")
    p.add_argument("--out", type=Path, help="output directory")

    p = sub.add_parser("templatize", parents=[shared], help="rewrite questions into template style")
    p.add_argument("--out", type=Path, required=True, help="templatized questions JSON")

    p = sub.add_parser("generate", parents=[shared], help="stage-1 and reflected SQL candidates")
    p.add_argument("--out", type=Path, required=True, help="candidates JSON")

    for name, help_text, out_help in (
        ("verify", "execute, repair and gate candidates", "verified candidates JSON"),
        ("ensemble", "alignment check and majority vote", "predictions JSON"),
    ):
        p = sub.add_parser(name, parents=[shared], help=help_text)
        p.add_argument("--candidates", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True, help=out_help)

    p = sub.add_parser("score", parents=[shared], help="reliability scores for a predictions file")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gold", type=Path, required=True)
    p.add_argument("--penalties", default="0,5,10,N")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("analyze", parents=[shared], help="top n-gram tables per split")
    p.add_argument("--split", action="append", default=[], help="EHRSQL split name (repeatable)")
    p.add_argument("--data-dir", type=Path, help=f"EHRSQL release root (default: ${DATA_DIR_ENV})")
    p.add_argument("--n", type=int, default=3, help="largest n (tables are produced for 1..n)")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--out", type=Path, help="write the JSON report here")

    p = sub.add_parser("split", parents=[shared], help="stratified k-fold assignment")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", type=Path, required=True)
    return parser


_FLAG_KEYS = (
    "questions", "labels", "database", "catalog", "train_questions", "train_labels", "template_index",
    "lexicons", "templates_dir", "templatize", "reflect", "verify", "ensemble", "gates", "patient_gate",
    "vocab_gate", "vote_mode", "timeout_ms", "seed", "jobs",
)


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    """Config file values, then any flag the user actually passed."""
    if args.config is not None:
        doc = json.loads(Path(args.config).read_text("utf-8"))
        base = Path(args.config).resolve().parent
    else:
        doc, base = {}, Path.cwd()
    cwd = Path.cwd()

    def absolute(p: Path) -> str:
        return str(p if p.is_absolute() else cwd / p)

    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = absolute(value) if isinstance(value, Path) else value
    if args.command == "run" and getattr(args, "out", None) is not None:
        doc["output"] = absolute(args.out)

    gateway = dict(doc.get("gateway") or {})
    if args.gateway_mode:
        gateway["mode"] = args.gateway_mode
    if args.stub_rules:
        gateway["stub_rules"] = absolute(args.stub_rules)
    if args.cache:
        gateway["cache"] = absolute(args.cache)
    doc["gateway"] = gateway or {"mode": "stub"}

    generation = dict(doc.get("generation") or {})
    for flag, key in (("format", "format"), ("few_shot", "few_shot_k"), ("ensemble_size", "ensemble_size"),
                      ("temperature", "temperature")):
        value = getattr(args, flag)
        if value is not None:
            generation[key] = value
    doc["generation"] = generation
    return PipelineConfig.from_dict(doc, base)


def _stratum_fn(dataset):
    by_id = dataset.by_id()

    def stratum(qid: str) -> str:
        if dataset.labels[qid].answerable:
            return ANSWERABLE
        return categorize_unanswerable(by_id[qid]).value

    return stratum


def _require(value, what: str):
    if value is None:
        raise ConfigurationError(f"missing {what}")
    return value


def _dump(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, ensure_ascii=False) + "\n")


def dispatch(args: argparse.Namespace) -> int:
    cmd = args.command
    if cmd == "score":
        preds = load_predictions(args.pred)
        golds = load_dataset_labels(args.gold)
        if args.database is not None and not Path(args.database).exists():
            raise ConfigurationError(f"database not found: {args.database}")
        db = Database(args.database) if args.database else None
        report = score(preds, golds, db, parse_penalties(args.penalties))
        if args.out:
            write_json(args.out, report.to_json(), indent=2)
        _dump(report.to_json())
        return 0

    if cmd == "analyze":
        splits: dict[str, list[str]] = {}
        if args.split:
            data_dir = args.data_dir or os.environ.get(DATA_DIR_ENV)
            if not data_dir:
                raise ConfigurationError(f"--split needs --data-dir or ${DATA_DIR_ENV}")
            for name in args.split:
                qpath, _ = ehrsql_split_paths(data_dir, name)
                splits[name] = [q.raw_text for q in load_dataset(qpath).questions]
        if args.questions:
            splits[Path(args.questions).stem] = [q.raw_text for q in load_dataset(args.questions).questions]
        if not splits:
            raise ConfigurationError("analyze needs --split or --questions")
        report = analysis_report(splits, max_n=args.n, top=args.top)
        if args.out:
            write_json(args.out, report, indent=2)
        sys.stdout.write(render_report_table(report))
        return 0

    config = config_from_args(args)

    if cmd == "split":
        dataset = load_dataset(_require(config.questions, "--questions"), _require(config.labels, "--labels"))
        folds = stratified_kfold(dataset, args.k, _stratum_fn(dataset), config.seed)
        write_json(args.out, folds.to_json(), indent=2)
        _dump(stratum_counts(folds, _stratum_fn(dataset)))
        return 0

    if cmd == "run":
        return run_pipeline(config)

    pipeline = Pipeline(config)
    pipeline.check_paths()
    records = list(load_dataset(_require(config.questions, "--questions")).questions)
    if cmd == "templatize":
        write_json(args.out, questions_to_json(pipeline.stage_templatize(records)), indent=2)
    elif cmd == "generate":
        write_json(args.out, candidates_to_json(pipeline.stage_generate(records)), indent=2)
    elif cmd == "verify":
        cands = candidates_from_json(read_json(args.candidates))
        write_json(args.out, candidates_to_json(pipeline.stage_verify(records, cands)), indent=2)
    elif cmd == "ensemble":
        cands = candidates_from_json(read_json(args.candidates))
        write_predictions(args.out, pipeline.stage_ensemble(records, cands))
    return 0


def load_dataset_labels(path: Path):
    return parse_labels(read_json(path), Path(path))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, GatewayError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
