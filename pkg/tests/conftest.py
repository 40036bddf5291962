import os
import sqlite3
from pathlib import Path

import pytest

from reliasql.dataset_io import ehrsql_split_paths
from reliasql.schema import RenderFormat, load_catalog, render_brief
from reliasql.verifier import Database, build_value_index

TOY_DIR = Path(__file__).parent / "fixtures" / "toy"
FIXTURES = Path(__file__).parent / "fixtures"


def build_toy_database(path: Path) -> Path:
    catalog = load_catalog(TOY_DIR / "catalog.json")
    conn = sqlite3.connect(path)
    try:
        conn.executescript(render_brief(catalog, RenderFormat.DDL))
        conn.executescript((TOY_DIR / "toy_data.sql").read_text("utf-8"))
        conn.commit()
    finally:
        conn.close()
    return path


@pytest.fixture(scope="session")
def toy_dir() -> Path:
    return TOY_DIR


@pytest.fixture(scope="session")
def toy_catalog():
    return load_catalog(TOY_DIR / "catalog.json")


@pytest.fixture(scope="session")
def toy_db_path(tmp_path_factory) -> Path:
    return build_toy_database(tmp_path_factory.mktemp("toydb") / "toy.sqlite")


@pytest.fixture(scope="session")
def toy_db(toy_db_path) -> Database:
    return Database(toy_db_path)


@pytest.fixture(scope="session")
def toy_value_index(toy_db, toy_catalog):
    return build_value_index(toy_db, toy_catalog)


def ehrsql_dir():
    """Root of an EHRSQL release if one is available locally, else None."""
    root = os.environ.get("EHRSQL_DATA_DIR")
    if not root:
        return None
    questions, labels = ehrsql_split_paths(root, "train")
    return Path(root) if questions.exists() and labels is not None else None


@pytest.fixture(scope="session")
def ehrsql_train():
    root = ehrsql_dir()
    if root is None:
        pytest.skip("EHRSQL data not available (set EHRSQL_DATA_DIR)")
    from reliasql.dataset_io import load_dataset

    questions, labels = ehrsql_split_paths(root, "train")
    return load_dataset(questions, labels, "train")


# -- acceptance summary --------------------------------------------------------

ACCEPTANCE_RESULTS: dict[str, tuple[str, float, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: (int(k.split()[0]), k)):
        status, seconds, detail = ACCEPTANCE_RESULTS[key]
        line = f"criterion {key}: {status} ({seconds:.2f}s)"
        terminalreporter.write_line(line + (f" - {detail}" if detail else ""))
