import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phishkd.corpus import EmailRecord, generate_synthetic_corpus
from phishkd.evalbench import (
    BENCH_COLUMNS,
    ConfusionMatrix,
    ScenarioSpec,
    benchmark,
    confusion,
    default_ratios,
    export_bench_csv,
    export_metrics_csv,
    metrics,
    run_scenario,
    scenario_split,
    stratified_kfold,
    weighted_f1,
)
from phishkd.exceptions import ContractError, CorpusError, ParameterError
from phishkd.models import ModelConfig, build_student, param_count


def test_confusion_examples():
    assert confusion([1, 1, 0], [1, 1, 0]) == ConfusionMatrix(tp=2, fp=0, fn=0, tn=1)
    cm = confusion([0, 0, 1], [1, 1, 0])
    assert cm.tp == 0 and cm.tn == 0
    preds = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
    labels = [1, 1, 1, 0, 1, 0, 0, 0, 0, 0]
    assert confusion(preds, labels) == ConfusionMatrix(tp=3, fp=1, fn=1, tn=5)
    with pytest.raises(ContractError):
        confusion([1], [1, 0])


def test_metrics_hand_values():
    rep = metrics(ConfusionMatrix(tp=3, fp=1, fn=1, tn=5))
    assert (rep.accuracy, rep.precision, rep.recall, rep.f1) == (0.8, 0.75, 0.75, 0.75)
    perfect = metrics(ConfusionMatrix(tp=4, fp=0, fn=0, tn=6))
    assert (perfect.accuracy, perfect.precision, perfect.recall, perfect.f1) == (1.0, 1.0, 1.0, 1.0)


def test_metrics_degenerate_conventions():
    rep = metrics(ConfusionMatrix(tp=0, fp=0, fn=2, tn=3))
    assert rep.precision == 0.0 and "precision" in rep.degenerate and rep.f1 == 0.0
    with pytest.raises(ParameterError):
        metrics(ConfusionMatrix(0, 0, 0, 0))
    with pytest.raises(ParameterError):
        ConfusionMatrix(-1, 0, 0, 0)


def test_weighted_f1_examples():
    assert weighted_f1([0.8, 0.6], [10, 10]) == pytest.approx(0.7)
    assert weighted_f1([0.9], [7]) == 0.9
    assert weighted_f1([0.5, 0.5], [1, 99]) == pytest.approx(0.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40), st.randoms())
def test_metrics_permutation_invariant(pairs, rnd):
    p, y = map(list, zip(*pairs))
    order = list(range(len(p)))
    rnd.shuffle(order)
    a = metrics(confusion(p, y))
    b = metrics(confusion([p[i] for i in order], [y[i] for i in order]))
    assert a == b
    f1s = [a.f1, metrics(confusion([1 - v for v in p], [1 - v for v in y])).f1]
    assert min(f1s) - 1e-12 <= a.weighted_f1 <= max(f1s) + 1e-12


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(n_per_cell=50, seed=2)


def test_scenario_mapping():
    assert ScenarioSpec.named("orig_gen") == ScenarioSpec("orig_gen", "human", "llm")
    assert ScenarioSpec.named("mixture").train_source == "both"
    with pytest.raises(ParameterError, match="orig_orig"):
        ScenarioSpec.named("orig_mix")


def test_scenario_pools(corpus):
    pools = scenario_split(corpus, "orig_orig")
    assert {r.source for r in pools.train_pool} == {r.source for r in pools.test_pool} == {"human"}
    assert len(scenario_split(corpus, "mixture").train_pool) == len(corpus)
    cross = scenario_split(corpus, "orig_gen", seed=3)
    assert not {r.id for r in cross.train_pool} & {r.id for r in cross.test_pool}
    assert len(cross.train_pool) == len(cross.test_pool)
    assert {r.source for r in cross.test_pool} == {"llm"}


def test_scenario_missing_cell(corpus):
    human_only = [r for r in corpus if r.source == "human"]
    with pytest.raises(CorpusError, match="source=llm"):
        scenario_split(human_only, "gen_gen")


def test_kfold_counts_for_1000():
    y = np.arange(1000) % 2
    plan = stratified_kfold(y, k=5, seed=0)
    for f in plan.folds:
        assert (len(f.train), len(f.val), len(f.test)) == (720, 80, 200)
        for part in (f.train, f.val, f.test):
            assert abs(y[part].sum() - len(part) / 2) <= 1


@pytest.mark.parametrize("n", [100, 1000, 13692, 37])
def test_kfold_invariants(n):
    y = (np.random.default_rng(n).random(n) < 0.4).astype(int)
    plan = stratified_kfold(y, k=5, seed=1)
    tests = []
    for f in plan.folds:
        tr, va, te = set(f.train), set(f.val), set(f.test)
        assert not (tr & va or tr & te or va & te)
        assert len(tr | va | te) == n
        for part, share in zip((f.train, f.val, f.test), (0.72, 0.08, 0.20)):
            assert abs(len(part) - share * n) <= 1
            for c in (0, 1):
                assert abs(np.sum(y[part] == c) - share * np.sum(y == c)) <= 1
        tests += f.test
    assert sorted(tests) == list(range(n))


def test_kfold_deterministic_and_errors():
    y = np.arange(50) % 2
    a, b = stratified_kfold(y, seed=4), stratified_kfold(y, seed=4)
    assert a.folds == b.folds
    with pytest.raises(ParameterError):
        stratified_kfold([0, 0, 0, 1, 1], k=5)
    with pytest.raises(ParameterError):
        stratified_kfold(y, ratios=(0.5, 0.3, 0.2)[::-1])


def test_default_ratios():
    assert default_ratios(5) == pytest.approx((0.72, 0.08, 0.20))
    assert sum(default_ratios(3)) == pytest.approx(1.0)


def test_constant_model_scores_majority(corpus):
    skewed = [r for r in corpus if r.label == "legitimate"] + [r for r in corpus if r.label == "phishing"][:40]
    rep = run_scenario(lambda tr, va, te, s: np.zeros(len(te)), "mixture", skewed, model_name="const")
    share = sum(r.label == "legitimate" for r in skewed) / len(skewed)
    assert rep.mean("acc") == pytest.approx(share, abs=0.01)
    rows = rep.rows
    assert [r["fold"] for r in rows] == ["0", "1", "2", "3", "4", "mean", "std"]
    assert rep.corpus_size == len(skewed)


def test_run_scenario_reproducible_and_disjoint(corpus, tmp_path):
    seen = []

    def fit_predict(tr, va, te, seed):
        ids = [{r.id for r in part} for part in (tr, va, te)]
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
        seen.append(seed)
        rng = np.random.default_rng(seed)
        return rng.random(len(te))

    a = run_scenario(fit_predict, "gen_orig", corpus, seed=3)
    b = run_scenario(fit_predict, "gen_orig", corpus, seed=3)
    assert [f.report for f in a.folds] == [f.report for f in b.folds]
    assert len(set(seen[:5])) == 5
    path = tmp_path / "m.csv"
    export_metrics_csv([a], path)
    assert path.read_text().splitlines()[0] == "model,scenario,fold,acc,precision,recall,f1,weighted_f1"


def _bench_model(seed=0):
    return build_student(ModelConfig(kind="bilstm", vocab_size=200, embed_dim=16, hidden=16), seed)


def test_benchmark_report(tmp_path):
    m = _bench_model()
    reps = benchmark([("a", m)], batch_size=8, seq_len=12, repeats=30, train_batches=1)
    r = reps[0]
    assert r.params == param_count(m) and r.mode == "f64" and r.p50_ms <= r.p95_ms and r.train_seconds > 0
    path = tmp_path / "b.csv"
    export_bench_csv(reps, path)
    assert path.read_text().splitlines()[0] == ",".join(BENCH_COLUMNS)


def test_benchmark_identical_models_agree():
    a, b = benchmark([("a", _bench_model()), ("b", _bench_model())], batch_size=32, seq_len=32, repeats=30)
    assert abs(a.p50_ms - b.p50_ms) <= 0.2 * max(a.p50_ms, b.p50_ms)


def test_benchmark_restores_weights():
    m = _bench_model()
    before = m.state_dict()
    benchmark([m], batch_size=4, seq_len=6, repeats=1, train_batches=2)
    assert all(np.array_equal(before[k], v) for k, v in m.state_dict().items())
    with pytest.raises(ParameterError):
        benchmark([m], repeats=0)


def test_records_expose_labels():
    r = EmailRecord("a", "", "x", "phishing", "human")
    assert stratified_kfold([r] * 5 + [EmailRecord("b", "", "y", "legitimate", "llm")] * 5, k=5).labels.tolist() == [1] * 5 + [0] * 5
