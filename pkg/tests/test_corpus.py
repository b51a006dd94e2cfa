import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phishkd.corpus import (
    EmailRecord,
    ScoreSheet,
    composite_phishing_score,
    cosine_similarity,
    dedup,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    score_email,
    similarity_analysis,
    tfidf_fit,
    tfidf_transform,
)
from phishkd.exceptions import ContractError, CorpusError, ParameterError


@pytest.fixture(scope="module")
def small_corpus():
    return generate_synthetic_corpus(n_per_cell=60, seed=3)


def _split(corpus):
    legit = [r for r in corpus if r.label == "legitimate"]
    human = [r for r in corpus if r.label == "phishing" and r.source == "human"]
    llm = [r for r in corpus if r.label == "phishing" and r.source == "llm"]
    return legit, human, llm


def test_round_trip(tmp_path, small_corpus):
    path = tmp_path / "c.jsonl"
    save_corpus(small_corpus[:100], path)
    assert load_corpus(path) == small_corpus[:100]
    first = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
    assert list(first) == ["id", "subject", "body", "label", "source", "meta"]


def test_unknown_label_reports_line(tmp_path):
    good = {"id": "a", "subject": "", "body": "hi there", "label": "legitimate", "source": "human", "meta": {}}
    bad = {**good, "id": "b", "label": "spamish"}
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(CorpusError, match="line 2"):
        load_corpus(path)
    assert [r.id for r in load_corpus(path, strict=False)] == ["a"]


def test_malformed_and_empty_body(tmp_path):
    path = tmp_path / "c.jsonl"
    rec = {"id": "a", "subject": "s", "body": "<br>", "label": "phishing", "source": "llm", "meta": {}}
    path.write_text("{not json\n" + json.dumps(rec) + "\n")
    with pytest.raises(CorpusError) as info:
        load_corpus(path)
    assert [i for i, _ in info.value.errors] == [1, 2]


def test_empty_file(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text("")
    assert load_corpus(path) == []


def test_generator_counts_and_ids():
    corpus = generate_synthetic_corpus(n_per_cell=500, seed=1)
    assert len(corpus) == 2000
    assert set(Counter((r.label, r.source) for r in corpus).values()) == {500}
    assert len({r.id for r in corpus}) == 2000


def test_generator_deterministic():
    a = generate_synthetic_corpus(n_per_cell=20, seed=11)
    assert a == generate_synthetic_corpus(n_per_cell=20, seed=11)
    assert a != generate_synthetic_corpus(n_per_cell=20, seed=12)


def test_generator_rejects_empty_cells():
    with pytest.raises(ParameterError):
        generate_synthetic_corpus(n_per_cell=0)


def test_generator_single_register():
    corpus = generate_synthetic_corpus(n_per_cell=5, registers=("human",))
    assert {r.source for r in corpus} == {"human"} and len(corpus) == 10


def test_llm_phishing_closer_to_legit(small_corpus):
    summary = similarity_analysis(*_split(small_corpus))
    assert summary.stats["llm"]["mean"] > summary.stats["human"]["mean"]


def test_idf_closed_form():
    model = tfidf_fit(["a b", "a"])
    assert model.idf("a") == pytest.approx(1.0)
    assert model.idf("b") == pytest.approx(math.log(3 / 2) + 1)
    assert model.idf("b") > model.idf("a")


def test_transform_unseen_is_empty():
    model = tfidf_fit(["a b", "a"])
    vec = tfidf_transform(model, "zzz qqq")
    assert vec.empty and vec.norm == 0.0
    assert cosine_similarity(vec, tfidf_transform(model, "a")) == 0.0


def test_cosine_examples():
    model = tfidf_fit(["x y", "x", "y"])
    xy, x, y = (tfidf_transform(model, d) for d in ("x y", "x", "y"))
    assert cosine_similarity(xy, xy) == pytest.approx(1.0)
    assert cosine_similarity(x, y) == 0.0
    # x and y share the same idf, so "x y" is the dense vector [1, 1] up to scale
    assert cosine_similarity(xy, x) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_cosine_snapshot_mismatch():
    a = tfidf_transform(tfidf_fit(["a b"]), "a")
    b = tfidf_transform(tfidf_fit(["a c"]), "a")
    with pytest.raises(ContractError):
        cosine_similarity(a, b)


docs = st.lists(st.sampled_from("alpha beta gamma delta eps zeta".split()), min_size=1, max_size=8).map(" ".join)


@settings(max_examples=100, deadline=None)
@given(docs, docs, st.floats(0.01, 100))
def test_cosine_symmetric_and_scale_invariant(d1, d2, lam):
    model = tfidf_fit([d1, d2, "alpha beta gamma delta eps zeta"])
    a, b = tfidf_transform(model, d1), tfidf_transform(model, d2)
    ab = cosine_similarity(a, b)
    assert ab == pytest.approx(cosine_similarity(b, a), abs=1e-12)
    assert ab == pytest.approx(cosine_similarity(a.scaled(lam), b), abs=1e-12)
    assert 0.0 <= ab <= 1.0


def test_similarity_identical_sets(small_corpus):
    legit, _, llm = _split(small_corpus)
    # a single legitimate email against itself
    summary = similarity_analysis(legit[:1], legit[:1], llm)
    assert summary.stats["human"]["mean"] == pytest.approx(1.0)


def test_similarity_quartiles_and_export(tmp_path, small_corpus):
    summary = similarity_analysis(*_split(small_corpus))
    for st_ in summary.stats.values():
        assert st_["q1"] <= st_["median"] <= st_["q3"]
    path = tmp_path / "sim.csv"
    summary.export_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "legit_id,vs_class,mean_cosine"
    assert len(lines) == 1 + 2 * 120


def test_similarity_needs_all_sets(small_corpus):
    legit, human, _ = _split(small_corpus)
    with pytest.raises(ParameterError):
        similarity_analysis(legit, human, [])


def _rec(i, body):
    return EmailRecord(f"r{i}", "", body, "legitimate", "human")


def test_dedup_examples():
    res = dedup([_rec(0, "reset your password now"), _rec(1, "reset your password now")], threshold=0.9)
    assert [r.id for r in res.kept] == ["r0"]
    assert res.removed_pairs[0][:2] == ("r1", "r0") and res.removed_pairs[0][2] == pytest.approx(1.0)
    distinct = [_rec(i, w) for i, w in enumerate(["alpha", "beta", "gamma"])]
    assert len(dedup(distinct).kept) == 3
    assert len(dedup([_rec(i, "same words here") for i in range(6)], threshold=1.0).kept) == 1


@pytest.mark.parametrize("threshold", [0.0, 1.5])
def test_dedup_threshold_range(threshold):
    with pytest.raises(ParameterError):
        dedup([_rec(0, "a")], threshold=threshold)


def test_dedup_idempotent(small_corpus):
    once = dedup(small_corpus, threshold=0.8).kept
    assert dedup(once, threshold=0.8).removed_pairs == []


def test_composite_examples():
    assert composite_phishing_score(ScoreSheet(["binary", "scaled"], [1, 10])) == 1.0
    assert composite_phishing_score(ScoreSheet(["binary", "scaled"], [0, 0])) == 0.0
    assert composite_phishing_score(ScoreSheet(["binary", "scaled"], [1, 5])) == pytest.approx(0.75)


def test_composite_bad_weights():
    with pytest.raises(ParameterError):
        composite_phishing_score(ScoreSheet(["binary", "binary"], [1, 0], [0.6, 0.6]))


def test_composite_needs_an_answer():
    with pytest.raises(ParameterError):
        composite_phishing_score(ScoreSheet(["binary"], [None]))


def test_rule_provider_separates_registers(small_corpus):
    legit, human, _ = _split(small_corpus)
    lo = np.mean([score_email(r.text).composite for r in legit])
    hi = np.mean([score_email(r.text).composite for r in human])
    assert 0.0 <= lo < hi <= 1.0
