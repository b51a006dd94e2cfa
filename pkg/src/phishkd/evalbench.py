"""Metrics, scenario splits, stratified folds, experiment runner and latency benchmark."""
from __future__ import annotations

import csv
import itertools
import logging
import os
import platform
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from phishkd.exceptions import ContractError, CorpusError, ParameterError
from phishkd.models import param_count
from phishkd.numerics import backward, make_rng
from phishkd.training import AdamState, TrainConfig, adam_step, hard_loss

logger = logging.getLogger(__name__)

SCENARIOS = ("orig_orig", "gen_gen", "orig_gen", "gen_orig", "mixture")
_SOURCE_OF = {"orig": "human", "gen": "llm"}


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ParameterError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    weighted_f1: float
    degenerate: tuple[str, ...] = ()

    def as_dict(self) -> dict[str, float]:
        return {"acc": self.accuracy, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "weighted_f1": self.weighted_f1}


def confusion(preds, labels) -> ConfusionMatrix:
    """Counts with phishing (1) as the positive class."""
    p = np.asarray(preds).astype(int).reshape(-1)
    y = np.asarray(labels).astype(int).reshape(-1)
    if p.size != y.size:
        raise ContractError(f"{p.size} predictions vs {y.size} labels")
    return ConfusionMatrix(tp=int(np.sum((p == 1) & (y == 1))), fp=int(np.sum((p == 1) & (y == 0))),
                           fn=int(np.sum((p == 0) & (y == 1))), tn=int(np.sum((p == 0) & (y == 0))))


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float, list[str]]:
    flags = []
    if tp + fp == 0:
        precision = 0.0
        flags.append("precision")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 0.0
        flags.append("recall")
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0:
        f1 = 0.0
        flags.append("f1")
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return precision, recall, f1, flags


def weighted_f1(per_class_f1: Sequence[float], class_supports: Sequence[int]) -> float:
    """Support-weighted mean of per-class F1 scores; zero-support classes are ignored."""
    f = np.asarray(per_class_f1, dtype=float)
    s = np.asarray(class_supports, dtype=float)
    if f.shape != s.shape:
        raise ContractError("per-class F1 and supports differ in length")
    if np.any(s < 0) or s.sum() == 0:
        raise ParameterError("class supports must be non-negative with a positive total")
    return float((f * s).sum() / s.sum())


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy, precision, recall and F1 for the phishing class, plus support-weighted F1."""
    if cm.total == 0:
        raise ParameterError("cannot compute metrics of an empty confusion matrix")
    acc = (cm.tp + cm.tn) / cm.total
    p, r, f1, flags = _prf(cm.tp, cm.fp, cm.fn)
    # The legitimate class swaps roles: its true positives are tn.
    _, _, f1_neg, _ = _prf(cm.tn, cm.fn, cm.fp)
    supports = [cm.tp + cm.fn, cm.tn + cm.fp]
    present = [(f, s) for f, s in zip((f1, f1_neg), supports) if s > 0]
    wf1 = weighted_f1([f for f, _ in present], [s for _, s in present])
    if flags:
        logger.debug("degenerate metrics: %s", ", ".join(flags))
    return MetricsReport(acc, p, r, f1, wf1, tuple(flags))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    train_source: str
    test_source: str

    @classmethod
    def named(cls, name: str) -> "ScenarioSpec":
        if name not in SCENARIOS:
            raise ParameterError(f"unknown scenario {name!r}; valid: {', '.join(SCENARIOS)}")
        if name == "mixture":
            return cls(name, "both", "both")
        a, b = name.split("_")
        return cls(name, _SOURCE_OF[a], _SOURCE_OF[b])

    @property
    def cross(self) -> bool:
        return self.train_source != self.test_source


@dataclass
class ScenarioPools:
    spec: ScenarioSpec
    train_pool: list
    test_pool: list

    @property
    def sizes(self) -> dict[str, int]:
        return {"train_pool": len(self.train_pool), "test_pool": len(self.test_pool)}


def _source_pool(corpus, source: str) -> list:
    pool = [r for r in corpus if source == "both" or r.source == source]
    sources = ("human", "llm") if source == "both" else (source,)
    for src in sources:
        for label in ("phishing", "legitimate"):
            if not any(r.source == src and r.label == label for r in pool):
                raise CorpusError(f"empty pool: no records in cell (label={label}, source={src})")
    return pool


def _sample_balanced(pool: list, n: int, rng) -> list:
    """Draw ``n`` records keeping the pool's label proportions."""
    if n >= len(pool):
        return list(pool)
    by = {}
    for r in pool:
        by.setdefault(r.label, []).append(r)
    out = []
    labels = sorted(by)
    quotas = {lab: int(round(n * len(by[lab]) / len(pool))) for lab in labels}
    for lab in labels:
        idx = rng.permutation(len(by[lab]))[:quotas[lab]]
        out += [by[lab][i] for i in sorted(idx)]
    return out


def scenario_split(corpus, spec: ScenarioSpec | str, seed: int = 0) -> ScenarioPools:
    """Train and test pools for a scenario.

    Same-source scenarios and ``mixture`` share one pool; cross-distribution
    scenarios draw equal-size pools from the two sources so that sample
    counts match across scenarios.
    """
    spec = ScenarioSpec.named(spec) if isinstance(spec, str) else spec
    train_pool = _source_pool(corpus, spec.train_source)
    if not spec.cross:
        return ScenarioPools(spec, train_pool, train_pool)
    test_pool = _source_pool(corpus, spec.test_source)
    n = min(len(train_pool), len(test_pool))
    rng = make_rng(seed, "scenario", spec.name)
    train_pool = _sample_balanced(train_pool, n, rng)
    test_pool = _sample_balanced(test_pool, n, rng)
    overlap = {r.id for r in train_pool} & {r.id for r in test_pool}
    if overlap:
        raise ContractError(f"train and test pools share ids: {sorted(overlap)[:20]}")
    return ScenarioPools(spec, train_pool, test_pool)


@dataclass
class Fold:
    train: list[int]
    val: list[int]
    test: list[int]


@dataclass
class FoldPlan:
    k: int
    folds: list[Fold]
    labels: np.ndarray
    ratios: tuple[float, float, float]


def _val_counts(rest_sizes: list[int], class_sizes: list[int], val_ratio: float, train_ratio: float) -> list[int]:
    """Per-class validation counts keeping every split within one sample of its share.

    Each class picks from the integers near both its val target and the
    count that leaves train on target; among those combinations the one with
    the smallest overall deviation wins.
    """
    options = []
    for rest, n in zip(rest_sizes, class_sizes):
        lo, hi = val_ratio * n, rest - train_ratio * n
        cands = [v for v in range(int(np.floor(min(lo, hi))) - 1, int(np.ceil(max(lo, hi))) + 2)
                 if 0 <= v <= rest and abs(v - lo) <= 1 and abs(v - hi) <= 1]
        options.append(cands or [int(round((lo + hi) / 2))])
    N = sum(class_sizes)
    R = sum(rest_sizes)
    if np.prod([len(o) for o in options]) > 4096:
        return [o[len(o) // 2] for o in options]
    best, best_key = None, None
    for combo in itertools.product(*options):
        v = sum(combo)
        spread = sum(abs(c - val_ratio * n) for c, n in zip(combo, class_sizes))
        key = (round(max(abs(v - val_ratio * N), abs(R - v - train_ratio * N)), 9), round(spread, 9))
        if best_key is None or key < best_key:
            best, best_key = list(combo), key
    return best


def default_ratios(k: int) -> tuple[float, float, float]:
    """Test share ``1/k``; the rest splits 9:1 into train and val (72/8/20 at k=5)."""
    rest = 1.0 - 1.0 / k
    return (rest - rest / 10, rest / 10, 1.0 / k)


def stratified_kfold(labels, k: int = 5, ratios=None, seed: int = 0) -> FoldPlan:
    """Stratified folds: test slice ``1/k``, remainder split into train and val.

    Indices are shuffled within class and laid out class by class; position
    ``j`` goes to test fold ``j mod k``. Validation counts per class are
    chosen so that every split stays within one sample of its share, both
    overall and per class. ``labels`` may also be records exposing ``y``.
    """
    y = np.asarray([getattr(r, "y", r) for r in labels])
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    ratios = default_ratios(k) if ratios is None else ratios
    if abs(sum(ratios) - 1.0) > 1e-9 or abs(ratios[2] - 1.0 / k) > 1e-9:
        raise ParameterError(f"ratios {ratios} must sum to 1 with a test share of 1/k")
    rng = make_rng(seed, "kfold")
    by_class = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        if idx.size < k:
            raise ParameterError(f"class {c!r} has {idx.size} samples, fewer than k={k}")
        by_class.append(idx[rng.permutation(idx.size)])
    order = np.concatenate(by_class)
    fold_of = np.arange(order.size) % k
    class_of = np.concatenate([np.full(ix.size, c) for c, ix in enumerate(by_class)])
    folds = []
    for f in range(k):
        test = order[fold_of == f]
        rests = [order[(fold_of != f) & (class_of == c)] for c in range(len(by_class))]
        counts = _val_counts([r.size for r in rests], [ix.size for ix in by_class], ratios[1], ratios[0])
        train, val = [], []
        for r, v in zip(rests, counts):
            # Fold-dependent offset so validation blocks differ between folds.
            r = np.roll(r, -f * (r.size // k))
            val += r[:v].tolist()
            train += r[v:].tolist()
        folds.append(Fold(sorted(train), sorted(val), sorted(test.tolist())))
    return FoldPlan(k, folds, y, tuple(ratios))


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    report: MetricsReport
    train_seconds: float
    test_seconds: float
    sizes: dict[str, int]


@dataclass
class ScenarioReport:
    model: str
    scenario: str
    folds: list[FoldResult]
    corpus_size: int
    per_fold_total: int

    def _values(self, key: str) -> np.ndarray:
        return np.array([f.report.as_dict()[key] for f in self.folds])

    def mean(self, key: str) -> float:
        return float(self._values(key).mean())

    def std(self, key: str) -> float:
        return float(self._values(key).std(ddof=1)) if len(self.folds) > 1 else 0.0

    @property
    def rows(self) -> list[dict]:
        out = [{"model": self.model, "scenario": self.scenario, "fold": str(f.fold), **f.report.as_dict()}
               for f in self.folds]
        keys = ("acc", "precision", "recall", "f1", "weighted_f1")
        out.append({"model": self.model, "scenario": self.scenario, "fold": "mean",
                    **{k: self.mean(k) for k in keys}})
        out.append({"model": self.model, "scenario": self.scenario, "fold": "std",
                    **{k: self.std(k) for k in keys}})
        return out


METRIC_COLUMNS = ("model", "scenario", "fold", "acc", "precision", "recall", "f1", "weighted_f1")


def export_metrics_csv(reports: Sequence[ScenarioReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for rep in reports:
            for row in rep.rows:
                w.writerow([row[c] if c in ("model", "scenario", "fold") else repr(float(row[c]))
                            for c in METRIC_COLUMNS])


def _fold_views(pools: ScenarioPools, fold: Fold, test_fold: Fold | None):
    tr = [pools.train_pool[i] for i in fold.train]
    va = [pools.train_pool[i] for i in fold.val]
    if test_fold is None:
        te = [pools.train_pool[i] for i in fold.test]
    else:
        te = [pools.test_pool[i] for i in test_fold.test]
    return tr, va, te


def run_scenario(fit_predict: Callable, scenario: ScenarioSpec | str, corpus, k: int = 5, seed: int = 0,
                 model_name: str = "model", folds: Sequence[int] | None = None) -> ScenarioReport:
    """Cross-validated evaluation of one model recipe on one scenario.

    ``fit_predict(train, val, test, fold_seed)`` trains a fresh model on the
    record lists and returns phishing probabilities for ``test``. Each fold
    gets its own seed derived from ``seed`` and the fold index.

    In cross-distribution scenarios the test block of fold ``f`` is the
    ``f``-th 20% slice of the other source's pool.
    """
    pools = scenario_split(corpus, scenario, seed)
    plan = stratified_kfold([r.y for r in pools.train_pool], k=k, seed=seed)
    test_plan = stratified_kfold([r.y for r in pools.test_pool], k=k, seed=seed + 1) if pools.spec.cross else None
    results = []
    for f in (range(k) if folds is None else folds):
        tr, va, te = _fold_views(pools, plan.folds[f], None if test_plan is None else test_plan.folds[f])
        fold_seed = int(make_rng(seed, "fold", f).integers(2 ** 31))
        t0 = time.perf_counter()
        probs = np.asarray(fit_predict(tr, va, te, fold_seed))
        elapsed = time.perf_counter() - t0
        y = np.array([r.y for r in te])
        rep = metrics(confusion((probs >= 0.5).astype(int), y))
        results.append(FoldResult(f, rep, elapsed, 0.0, {"train": len(tr), "val": len(va), "test": len(te)}))
        logger.info("%s %s fold %d: f1=%.4f wf1=%.4f", model_name, pools.spec.name, f, rep.f1, rep.weighted_f1)
    per_fold = sum(results[0].sizes.values()) if results else 0
    unique = len({r.id for r in pools.train_pool} | {r.id for r in pools.test_pool})
    return ScenarioReport(model_name, pools.spec.name, results, unique, per_fold)


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchReport:
    model: str
    params: int
    train_seconds: float
    test_seconds: float
    p50_ms: float
    p95_ms: float
    mode: str
    machine: str = ""

    def row(self) -> list:
        return [self.model, self.params, f"{self.train_seconds:.6f}", f"{self.test_seconds:.6f}",
                f"{self.p50_ms:.4f}", f"{self.p95_ms:.4f}", self.mode]


BENCH_COLUMNS = ("model", "params", "train_s", "test_s", "p50_ms", "p95_ms", "mode")


def machine_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or platform.system()} cpus={os.cpu_count()}"


def _time_training(model, ids, mask, batches: int, rng, seed: int) -> float:
    """Seconds for ``batches`` Adam steps; the weights are restored afterwards."""
    saved = model.state_dict()
    state, cfg = AdamState(), TrainConfig()
    params = model.trainable()
    y = rng.integers(0, 2, size=ids.shape[0])
    model.train()
    t0 = time.perf_counter()
    for b in range(batches):
        z = model.logits2(ids, mask, make_rng(seed, "bench-drop", b))
        adam_step(params, backward(hard_loss(z, y), params), state, cfg)
    elapsed = time.perf_counter() - t0
    model.eval()
    model.load_state_dict(saved)
    return elapsed


def benchmark(models: Sequence, batch_size: int = 32, seq_len: int = 64, repeats: int = 30,
              warmup: int = 3, train_batches: int = 0, seed: int = 0) -> list[BenchReport]:
    """Per-batch eval latency and, optionally, a timed training run.

    ``models`` holds :class:`~phishkd.models.ModelGraph` objects or
    ``(name, model)`` pairs. Latency is taken over ``repeats`` timed batches
    after ``warmup`` untimed ones, with BLAS pinned to one thread. Timed
    batches go round-robin over the models so that machine drift during
    the run affects every model alike.
    """
    if repeats < 1:
        raise ParameterError("repeats must be >= 1")
    rng = make_rng(seed, "bench")
    named = [item if isinstance(item, tuple) else (item.cfg.kind, item) for item in models]
    inputs = []
    for _, model in named:
        ids = rng.integers(4, model.cfg.vocab_size, size=(batch_size, seq_len))
        inputs.append((ids, np.ones_like(ids, dtype=bool)))
    times = [[] for _ in named]
    with threadpool_limits(limits=1):
        for (_, model), (ids, mask) in zip(named, inputs):
            for _ in range(warmup):
                model.predict_proba(ids, mask)
        for _ in range(repeats):
            for k, ((_, model), (ids, mask)) in enumerate(zip(named, inputs)):
                t0 = time.perf_counter()
                model.predict_proba(ids, mask)
                times[k].append(time.perf_counter() - t0)
        train_s = [_time_training(model, ids, mask, train_batches, rng, seed) if train_batches else 0.0
                   for (_, model), (ids, mask) in zip(named, inputs)]
    reports = []
    for (name, model), ts, tr in zip(named, times, train_s):
        t = np.array(ts) * 1e3
        mode = "f32" if model.dtype == np.float32 else "f64"
        reports.append(BenchReport(name, param_count(model), tr, float(np.sum(ts)),
                                   float(np.percentile(t, 50)), float(np.percentile(t, 95)), mode,
                                   machine_descriptor()))
    reports.sort(key=lambda r: r.p50_ms)
    return reports


def export_bench_csv(reports: Sequence[BenchReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in reports:
            w.writerow(r.row())
