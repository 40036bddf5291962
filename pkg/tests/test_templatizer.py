import json
import random
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from reliasql.core import QuestionRecord
from reliasql.gateway import ReplayGateway, ResponseCache, StubGateway, StubRule
from reliasql.templatizer import (
    HashingEmbedder,
    IndexEntry,
    Lexicons,
    TemplateIndex,
    Templatizer,
    build_index,
    mask_record,
    mask_values,
    nearest_templates,
    templatize,
)

FIXTURES = Path(__file__).parent / "fixtures"

PROCEDURES = Lexicons.from_json(
    {
        "<patient number>": {"pattern": r"(?<=\bpatient )\d+"},
        "<procedure>": ["coronary arteriography using two catheters", "hemodialysis"],
        "<drug>": ["aspirin", "duloxetine"],
    }
)


def test_mask_patient_and_procedure():
    raw = (
        "Count how many times in the first hospital visit patient 10004457 had "
        "coronary arteriography using two catheters."
    )
    masked, bindings = mask_values(raw, PROCEDURES)
    assert "patient <patient number> had <procedure>" in masked
    assert bindings == {
        "<patient number>": ("10004457",),
        "<procedure>": ("coronary arteriography using two catheters",),
    }


def test_mask_no_match_passes_through():
    raw = "List the single rooms that are available now?"
    assert mask_values(raw, Lexicons.empty()) == (raw, {})
    assert mask_values(raw, Lexicons.default()) == (raw, {})


def test_mask_prefers_earliest_then_longest():
    lex = Lexicons.from_json({"<a>": ["blood"], "<b>": ["blood test"]})
    assert mask_values("a blood test today", lex)[0] == "a <b> today"


def test_mask_record_satisfies_invariant():
    rec = mask_record(QuestionRecord("q", "did patient 10004457 get aspirin or aspirin?"), PROCEDURES)
    assert rec.masked_text == "did patient <patient number> get <drug> or <drug>?"
    assert rec.bindings["<drug>"] == ("aspirin", "aspirin")


WORDS = ["patient", "had", "aspirin", "hemodialysis", "the", "last", "since", "of", "duloxetine", "first", "visit"]
tokens = st.one_of(st.sampled_from(WORDS), st.integers(0, 10**9).map(str), st.just("<unk>"))
questions = st.lists(tokens, min_size=0, max_size=15).map(" ".join)


@settings(max_examples=300, deadline=None)
@given(questions)
def test_mask_idempotent(text):
    masked, _ = mask_values(text, PROCEDURES)
    assert mask_values(masked, PROCEDURES)[0] == masked
    rec = mask_record(QuestionRecord("q", text), PROCEDURES)
    assert rec.masked_text == masked


def test_mask_idempotent_on_thousand_question_corpus():
    rng = random.Random(3)
    for _ in range(1000):
        words = [rng.choice(WORDS + [str(rng.randrange(10**9))]) for _ in range(rng.randint(1, 14))]
        text = " ".join(words)
        once = mask_values(text, PROCEDURES)[0]
        assert mask_values(once, PROCEDURES)[0] == once


def test_hashing_embedder():
    embed = HashingEmbedder()
    assert np.array_equal(embed("a b"), embed("b a"))
    assert abs(np.linalg.norm(embed("what is the last visit")) - 1) < 1e-9
    assert not embed("").any() and embed("").shape == (512,)
    assert np.array_equal(embed("Patient"), embed("patient"))


def random_index(rng, n, dim, dupes=False):
    entries = []
    for i in range(n):
        vec = oracles.random_unit(rng, dim)
        if dupes and i % 5 == 1:
            vec = entries[-1].vector.copy()
        entries.append(IndexEntry(f"template {i:03d}", vec, f"s{i}"))
    return TemplateIndex(entries)


def test_nearest_exact_hit_and_full_sort():
    rng = np.random.default_rng(0)
    index = random_index(rng, 20, 16)
    got = nearest_templates(index.entries[7].vector, index, 1)
    assert got[0][0] == "template 007" and got[0][1] == pytest.approx(0.0, abs=1e-12)
    full = nearest_templates(index.entries[3].vector, index, len(index))
    assert len(full) == len(index)
    assert [d for _, d in full] == sorted(d for _, d in full)


@pytest.mark.parametrize("seed", range(10))
def test_nearest_matches_exhaustive_scan(seed):
    rng = np.random.default_rng(seed)
    index = random_index(rng, 50, 32, dupes=True)
    query = oracles.random_unit(rng, 32)
    want = oracles.knn(query, [(e.template, e.vector) for e in index.entries], 3)
    got = nearest_templates(query, index, 3)
    assert [t for t, _ in got] == [t for t, _ in want]
    assert [d for _, d in got] == pytest.approx([d for _, d in want], abs=1e-12)


def test_nearest_ties_break_by_text():
    v = np.zeros(4)
    v[0] = 1
    index = TemplateIndex([IndexEntry("b", v.copy(), "1"), IndexEntry("a", v.copy(), "2"), IndexEntry("c", -v, "3")])
    assert [t for t, _ in nearest_templates(v, index, 2)] == ["a", "b"]


def test_nearest_errors():
    index = TemplateIndex([IndexEntry("a", np.ones(4) / 2, "1")])
    with pytest.raises(ValueError):
        nearest_templates(np.ones(5), index, 1)
    with pytest.raises(ValueError):
        nearest_templates(np.ones(4), index, 0)
    with pytest.raises(ValueError):
        nearest_templates(np.ones(4), TemplateIndex([]), 1)
    with pytest.raises(ValueError):
        TemplateIndex([IndexEntry("a", np.ones(4), "1"), IndexEntry("b", np.ones(3), "2")])


def test_index_dedup_and_round_trip(tmp_path):
    recs = [QuestionRecord("1", "gender of patient 10004457"), QuestionRecord("2", "gender of patient 10001217")]
    index = build_index(recs, HashingEmbedder(64), Lexicons.default())
    assert len(index) == 1 and index.entries[0].template == "gender of patient <patient number>"
    index.save(tmp_path / "idx.jsonl")
    loaded = TemplateIndex.load(tmp_path / "idx.jsonl")
    assert loaded.entries[0].template == index.entries[0].template
    assert np.array_equal(loaded.matrix, index.matrix)


def templating_examples():
    inputs = json.loads((FIXTURES / "templating_inputs.json").read_text())
    gw = ReplayGateway(ResponseCache(FIXTURES / "templating_cache.jsonl"))
    return inputs, gw


def test_rewrite_influenza_example():
    inputs, gw = templating_examples()
    rec = mask_record(QuestionRecord("e1", inputs[0]["question"]), Lexicons.default())
    out = templatize(rec, inputs[0]["neighbors"], gw)
    assert out == "When is the end date of patient 8016's influenza quarantine?"


def test_rewrite_duloxetine_example():
    inputs, gw = templating_examples()
    rec = mask_record(QuestionRecord("e3", inputs[1]["question"]), Lexicons.default())
    out = templatize(rec, inputs[1]["neighbors"], gw)
    assert out == "What is the number of duloxetine prescription cases since 1 year ago?"


@pytest.mark.parametrize(
    "reply",
    ["", "   ", "What about patient <patient number> and patient <patient number>?", "When is it over?", "<drug> x"],
)
def test_templatize_falls_back_to_raw(reply):
    rec = mask_record(QuestionRecord("q", "When does patient 8016's quarantine end?"), Lexicons.default())
    gw = StubGateway([StubRule(reply, glob="*")])
    assert templatize(rec, ["t"], gw) == rec.raw_text


def test_templatize_strips_quotes_and_restores():
    rec = mask_record(QuestionRecord("q", "When does patient 8016's quarantine end?"), Lexicons.default())
    gw = StubGateway([StubRule('"When will patient <patient number>\'s quarantine end?"', glob="*")])
    assert templatize(rec, ["t"], gw) == "When will patient 8016's quarantine end?"
    with pytest.raises(ValueError):
        templatize(rec, [], gw)


def test_templatize_keeps_preexisting_placeholder():
    rec = mask_record(QuestionRecord("q", "Number of patients with <unk>."), Lexicons.default())
    gw = StubGateway([StubRule("Count the patients with <unk>.", glob="*")])
    assert templatize(rec, ["t"], gw) == "Count the patients with <unk>."


@settings(max_examples=100, deadline=None)
@given(questions, st.sampled_from(["keep", "drop", "empty", "dup"]))
def test_templatize_never_drops_a_bound_value(text, mode):
    rec = mask_record(QuestionRecord("q", text or "x"), PROCEDURES)
    masked = rec.masked_text
    reply = {"keep": "Rewritten: " + masked, "drop": "Rewritten.", "empty": "", "dup": masked + " " + masked}[mode]
    out = templatize(rec, ["t"], StubGateway([StubRule(reply, glob="*")]))
    for values in rec.bindings.values():
        for v in values:
            assert v in out


def test_templatizer_pipeline_is_pure():
    train = [QuestionRecord(str(i), t) for i, t in enumerate(
        ["what is the gender of patient 10000001?", "how many visits did patient 10000002 have?",
         "what drugs were prescribed to patient 10000003?", "when did patient 10000004 leave?"])]
    index = build_index(train, HashingEmbedder(), Lexicons.default())
    seen = []

    class Recorder(StubGateway):
        def complete(self, request):
            seen.append(request.user_text)
            return super().complete(request)

    tz = Templatizer(index, Recorder([StubRule(r"\1", regex=r"\nQuestion: ([^\n]*)\nRewritten question:")]))
    out1 = tz(QuestionRecord("x", "what is the gender of patient 10009999?"))
    out2 = tz(QuestionRecord("x", "what is the gender of patient 10009999?"))
    assert out1 == out2 and out1.templated_text == "what is the gender of patient 10009999?"
    assert '- "what is the gender of patient <patient number>?"' in seen[0].split("Question:")[0]
    assert seen[0].count('\n- "') == 3
