import random
import sqlite3

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reliasql.core import Candidate, QuestionRecord, Stage
from reliasql.verifier import (
    Database,
    FailureKind,
    GateConfig,
    ValueIndex,
    execute_check,
    gate_fires,
    patient_id_gate,
    repair_names,
    verify,
    verify_candidate,
    vocab_gate,
)

Q = QuestionRecord("q", "how many admissions did patient 10004457 have?")


def test_execute_check_ok_and_failures(toy_db):
    assert execute_check("SELECT COUNT(*) FROM admissions", toy_db).rows == ((4,),)
    assert execute_check("SELEC 1", toy_db).failure is FailureKind.SYNTAX
    assert execute_check("SELECT * FROM nope", toy_db).failure is FailureKind.MISSING_OBJECT
    assert execute_check("SELECT nope FROM admissions", toy_db).failure is FailureKind.MISSING_OBJECT
    assert execute_check("", toy_db).failure is FailureKind.SYNTAX
    assert execute_check("SELECT abs(-9223372036854775808)", toy_db).failure is FailureKind.RUNTIME


@pytest.mark.parametrize(
    "sql",
    [
        "DELETE FROM patients",
        "DROP TABLE patients",
        "INSERT INTO patients VALUES (9, 1, 'f', NULL, NULL)",
        "UPDATE patients SET gender = 'x'",
        "ATTACH DATABASE ':memory:' AS other",
        "PRAGMA writable_schema = 1",
        "CREATE TABLE t (a)",
    ],
)
def test_execute_check_refuses_writes(toy_db, sql):
    out = execute_check(sql, toy_db)
    assert not out.ok
    assert execute_check("SELECT COUNT(*) FROM patients", toy_db).rows == ((3,),)


def test_execute_check_timeout(toy_db):
    slow = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT MAX(x) FROM c"
    out = execute_check(slow, toy_db, timeout_ms=50)
    assert out.failure is FailureKind.TIMEOUT
    assert execute_check("SELECT 1", toy_db).ok


def test_database_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        Database(tmp_path / "absent.sqlite")


def test_value_index(toy_value_index):
    assert toy_value_index.get("aspirin") == frozenset({("prescriptions", "drug")})
    assert toy_value_index.get("emergency") == frozenset({("admissions", "admission_type")})
    assert toy_value_index.get("zzz") == frozenset()
    assert len(toy_value_index) > 10


def test_repair_misspelled_table(toy_db, toy_catalog, toy_value_index):
    assert repair_names("SELECT * FROM admission", toy_catalog, toy_value_index) == (
        "SELECT * FROM admissions",
        True,
    )
    out = verify("SELECT * FROM admission", Q, toy_db, toy_catalog, toy_value_index)
    assert out == "SELECT * FROM admissions"


def test_repair_table_by_value_location(toy_db, toy_catalog, toy_value_index):
    out = verify("SELECT * FROM meds WHERE drug='aspirin'", Q, toy_db, toy_catalog, toy_value_index)
    assert out == "SELECT * FROM prescriptions WHERE drug='aspirin'"
    assert execute_check(out, toy_db).ok


def test_repair_column_by_edit_distance_and_value(toy_catalog, toy_value_index):
    sql, changed = repair_names("SELECT gendr FROM patients", toy_catalog, toy_value_index)
    assert (sql, changed) == ("SELECT gender FROM patients", True)
    sql, changed = repair_names(
        "SELECT COUNT(*) FROM prescriptions WHERE medication = 'aspirin'", toy_catalog, toy_value_index
    )
    assert sql == "SELECT COUNT(*) FROM prescriptions WHERE drug = 'aspirin'" and changed


def test_repair_leaves_ambiguity_alone(toy_catalog, toy_value_index):
    # nothing in the catalog is close to "xyzzy" and no literal locates it
    assert repair_names("SELECT * FROM xyzzy", toy_catalog, toy_value_index) == ("SELECT * FROM xyzzy", False)
    assert repair_names("SELECT * FROM meds WHERE drug = 'not-in-db'", toy_catalog, toy_value_index)[1] is False


def test_verify_abstains_on_unrepairable(toy_db, toy_catalog, toy_value_index):
    cand = verify_candidate(Candidate("SELECT * FROM xyzzy", Stage.REFLECTED), Q, toy_db, toy_catalog, toy_value_index)
    assert cand.prediction is None and cand.stage is Stage.GATED
    assert "MissingObject" in cand.notes
    assert verify(None, Q, toy_db, toy_catalog, toy_value_index) is None


@pytest.mark.parametrize(
    "text, fires",
    [
        ("what is the gender of patient 24628?", True),
        ("has patient 21074 been to the icu?", True),
        ("Patient 1903 had how many visits?", True),
        ("what is the gender of patient 10004457?", False),
        ("how many patients were admitted?", False),
        ("patient 10004457 and patient 123", True),
    ],
)
def test_patient_gate(text, fires):
    assert patient_id_gate(text) is fires


def test_gates_and_config(toy_db, toy_catalog, toy_value_index):
    bad = QuestionRecord("q", "what is the gender of patient 24628?")
    assert gate_fires(bad, GateConfig()) == "patient-number gate"
    assert gate_fires(bad, GateConfig(patient_id=False)) is None
    assert verify("SELECT 1", bad, toy_db, toy_catalog, toy_value_index) is None
    vocab = frozenset({"what", "is", "the", "weather", "today"})
    assert vocab_gate(["weather", "today"], vocab)
    assert not vocab_gate([], vocab) and not vocab_gate(["weather", "aspirin"], vocab)
    q = QuestionRecord("q", "What is the weather today?")
    assert gate_fires(q, GateConfig(vocab=True, unanswerable_vocab=vocab)) == "vocabulary gate"
    assert gate_fires(q, GateConfig(vocab=False, unanswerable_vocab=vocab)) is None


def random_valid_queries(catalog, n, seed):
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        t = rng.choice(catalog.tables)
        cols = rng.sample(t.column_names, k=min(2, len(t.column_names)))
        sql = f"SELECT {', '.join(cols)} FROM {t.name}"
        if rng.random() < 0.5:
            sql += f" WHERE {cols[0]} IS NOT NULL"
        if rng.random() < 0.3:
            sql += f" ORDER BY {cols[-1]} LIMIT {rng.randint(1, 5)}"
        out.append(sql)
    return out


def test_valid_queries_pass_through_unchanged(toy_db, toy_catalog, toy_value_index):
    for sql in random_valid_queries(toy_catalog, 200, 9):
        assert verify(sql, Q, toy_db, toy_catalog, toy_value_index) == sql


fragments = st.sampled_from(
    ["SELECT", "*", "FROM", "admission", "admissions", "meds", "WHERE", "drug", "=", "'aspirin'",
     "gendr", "patients", ",", "(", ")", "COUNT(*)", "JOIN", "ON", "1", "DELETE", ";", "--", "'"]
)


@settings(max_examples=300, deadline=None)
@given(st.lists(fragments, min_size=1, max_size=10).map(" ".join))
def test_verify_contract(toy_db, toy_catalog, toy_value_index, sql):
    out = verify(sql, Q, toy_db, toy_catalog, toy_value_index)
    if out is not None:
        assert execute_check(out, toy_db).ok
        assert verify(out, Q, toy_db, toy_catalog, toy_value_index) == out


def test_verify_contract_without_value_index(toy_db, toy_catalog):
    out = verify("SELECT * FROM meds WHERE drug='aspirin'", Q, toy_db, toy_catalog, ValueIndex())
    assert out is None


def test_database_is_opened_read_only(toy_db_path, toy_db):
    conn = toy_db.introspect()
    with pytest.raises(sqlite3.OperationalError):
        conn.execute("DELETE FROM patients")
    conn.close()
