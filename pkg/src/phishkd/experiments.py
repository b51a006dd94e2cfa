"""End-to-end recipes: tokenize, embed, build, train or distill, predict.

A recipe is a ``fit_predict(train, val, test, seed)`` callable consumed by
:func:`phishkd.evalbench.run_scenario`. Vocabularies and unsupervised
embeddings are fitted once per corpus on unlabeled text.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from phishkd.evalbench import ScenarioReport, run_scenario
from phishkd.exceptions import ParameterError
from phishkd.models import (
    STUDENT_KINDS,
    TEACHER_KIND,
    ModelGraph,
    build_student,
    build_teacher,
    default_config,
    init_embeddings,
    transfer_embeddings,
)
from phishkd.text import (
    EmbeddingConfig,
    Vocab,
    build_vocab,
    build_wordpiece_vocab,
    normalize_email,
    tokenize_word,
    tokenize_wordpiece,
    train_embeddings,
)
from phishkd.training import (
    DistillConfig,
    EncodedData,
    History,
    TrainConfig,
    distill_train,
    predict_proba,
    train,
)

logger = logging.getLogger(__name__)

KINDS = STUDENT_KINDS + (TEACHER_KIND,)


@dataclass
class Profile:
    """Model sizes and budgets for one experiment grid.

    Defaults are a CPU-sized version of the reference configuration:
    baselines train with Adam at 1e-3 for 5 epochs, the KD student follows
    the distillation budget (α 0.5, τ 2, lr 1e-4, 3 epochs), batch 32
    throughout.
    """

    word_dim: int = 64
    hidden: int = 64
    heads: int = 4
    head_dim: int = 32
    teacher_dim: int = 64
    teacher_layers: int = 2
    teacher_heads: int = 4
    teacher_head_dim: int = 16
    teacher_ffn: int = 128
    dropout: float = 0.5
    max_len: int = 128
    word_cap: int = 30000
    word_min_freq: int = 2
    wordpiece_cap: int = 1000
    embed_epochs: int = 3
    embed_batch: int = 1024
    baseline: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, epochs=5, batch_size=32))
    teacher: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, epochs=5, batch_size=32))
    distill: DistillConfig = field(default_factory=DistillConfig)
    freeze_transferred: bool = False
    dtype: str = "float64"

    def model_config(self, kind: str, vocab_size: int):
        if kind == TEACHER_KIND:
            return default_config(kind, vocab_size=vocab_size, embed_dim=self.teacher_dim,
                                  layers=self.teacher_layers, heads=self.teacher_heads,
                                  head_dim=self.teacher_head_dim, ffn_dim=self.teacher_ffn,
                                  max_len=self.max_len)
        extra = dict(vocab_size=vocab_size, hidden=self.hidden, dropout=self.dropout, max_len=self.max_len)
        if kind == "kd_student":
            return default_config(kind, embed_dim=self.teacher_dim, heads=self.heads, head_dim=self.head_dim, **extra)
        if kind == "bilstm_sh":
            return default_config(kind, embed_dim=self.word_dim, heads=1, head_dim=self.heads * self.head_dim, **extra)
        return default_config(kind, embed_dim=self.word_dim, heads=self.heads, head_dim=self.head_dim, **extra)


def _word_text(text: str) -> str:
    return normalize_email(text, word_level=True)


def _piece_text(text: str) -> str:
    return normalize_email(text)


class CorpusResources:
    """Tokenizers and pretrained tables shared by every fold of one corpus.

    Everything here is fitted lazily on the unlabeled text of the whole
    corpus: a word vocabulary with skip-gram vectors for the word-level
    students and a WordPiece vocabulary with skip-gram vectors that
    initialize the teacher. Pass ``word_vocab`` or ``piece_vocab`` to reuse
    an existing vocabulary instead.
    """

    def __init__(self, corpus, profile: Profile, seed: int = 0, word_vocab: Vocab | None = None,
                 piece_vocab: Vocab | None = None):
        self.corpus = list(corpus)
        self.profile = profile
        self.seed = seed
        self._word_vocab = word_vocab
        self._piece_vocab = piece_vocab
        self._word_table = self._piece_table = None
        self._word_cache: dict[str, np.ndarray] = {}
        self._piece_cache: dict[str, np.ndarray] = {}
        self.teachers: dict[tuple, ModelGraph] = {}

    @property
    def word_vocab(self) -> Vocab:
        if self._word_vocab is None:
            texts = [_word_text(r.text) for r in self.corpus]
            self._word_vocab = build_vocab(texts, cap=self.profile.word_cap, min_freq=self.profile.word_min_freq)
        return self._word_vocab

    @property
    def piece_vocab(self) -> Vocab:
        if self._piece_vocab is None:
            texts = [_piece_text(r.text) for r in self.corpus]
            self._piece_vocab = build_wordpiece_vocab(texts, cap=self.profile.wordpiece_cap)
        return self._piece_vocab

    def _table(self, seqs, vocab_size: int, dim: int) -> np.ndarray:
        p = self.profile
        cfg = EmbeddingConfig(dim=dim, epochs=p.embed_epochs, batch_size=p.embed_batch, seed=self.seed)
        return train_embeddings(seqs, vocab_size, cfg).matrix

    @property
    def word_table(self) -> np.ndarray:
        if self._word_table is None:
            seqs = [self.encode_word(r) for r in self.corpus]
            self._word_table = self._table(seqs, len(self.word_vocab), self.profile.word_dim)
        return self._word_table

    @property
    def piece_table(self) -> np.ndarray:
        if self._piece_table is None:
            seqs = [self.encode_piece(r) for r in self.corpus]
            self._piece_table = self._table(seqs, len(self.piece_vocab), self.profile.teacher_dim)
        return self._piece_table

    def encode_word(self, rec) -> np.ndarray:
        hit = self._word_cache.get(rec.id)
        if hit is None:
            hit = self._word_cache[rec.id] = encode_text(rec.text, self.word_vocab, "word", self.profile.max_len)
        return hit

    def encode_piece(self, rec) -> np.ndarray:
        hit = self._piece_cache.get(rec.id)
        if hit is None:
            hit = self._piece_cache[rec.id] = encode_text(rec.text, self.piece_vocab, "wordpiece",
                                                          self.profile.max_len)
        return hit

    def vocab(self, tokenizer: str) -> Vocab:
        return self.piece_vocab if tokenizer == "wordpiece" else self.word_vocab

    def data(self, records, tokenizer: str) -> EncodedData:
        enc = self.encode_piece if tokenizer == "wordpiece" else self.encode_word
        return EncodedData([enc(r) for r in records], [r.y for r in records], [r.id for r in records])


def encode_text(text: str, vocab: Vocab, tokenizer: str, max_len: int) -> np.ndarray:
    """Normalize and tokenize one email the way the matching model family expects."""
    if tokenizer == "wordpiece":
        return np.asarray(tokenize_wordpiece(_piece_text(text), vocab, max_len).ids, dtype=np.int64)
    ids = tokenize_word(_word_text(text), vocab, max_len).ids
    return np.asarray(ids or [1], dtype=np.int64)  # an all-stopword email still needs one position


def _fit_teacher(res: CorpusResources, tr, va, seed: int) -> tuple[ModelGraph, History]:
    key = (tuple(r.id for r in tr), seed)
    hit = res.teachers.get(key)
    if hit is None:
        p = res.profile
        model = build_teacher(p.model_config(TEACHER_KIND, len(res.piece_vocab)), seed).astype(p.dtype)
        init_embeddings(model, res.piece_table)
        history = train(model, res.data(tr, "wordpiece"), replace(p.teacher, seed=seed), res.data(va, "wordpiece"))
        hit = res.teachers[key] = (model, history)
    return hit


def fit_model_with_history(kind: str, res: CorpusResources, tr, va, seed: int) -> tuple[ModelGraph, History]:
    """Train one model of ``kind`` on the records ``tr`` (``va`` for monitoring)."""
    p = res.profile
    if kind == TEACHER_KIND:
        return _fit_teacher(res, tr, va, seed)
    if kind == "kd_student":
        teacher, _ = _fit_teacher(res, tr, va, seed)
        student = build_student(p.model_config(kind, len(res.piece_vocab)), seed).astype(p.dtype)
        transfer_embeddings(student, teacher, freeze=p.freeze_transferred)
        history = distill_train(student, teacher, res.data(tr, "wordpiece"), replace(p.distill, seed=seed),
                                res.data(va, "wordpiece"))
        return student, history
    if kind not in STUDENT_KINDS:
        raise ParameterError(f"unknown model kind {kind!r}")
    model = build_student(p.model_config(kind, len(res.word_vocab)), seed).astype(p.dtype)
    init_embeddings(model, res.word_table)
    history = train(model, res.data(tr, "word"), replace(p.baseline, seed=seed), res.data(va, "word"))
    return model, history


def fit_model(kind: str, res: CorpusResources, tr, va, seed: int) -> ModelGraph:
    return fit_model_with_history(kind, res, tr, va, seed)[0]


def make_recipe(kind: str, res: CorpusResources):
    tokenizer = "wordpiece" if kind in ("kd_student", TEACHER_KIND) else "word"

    def fit_predict(tr, va, te, seed):
        model = fit_model(kind, res, tr, va, seed)
        return predict_proba(model, res.data(te, tokenizer))

    return fit_predict


def run_grid(corpus, kinds, scenarios, profile: Profile | None = None, k: int = 5, seed: int = 0,
             folds=None, resources: CorpusResources | None = None) -> list[ScenarioReport]:
    """Every (kind, scenario) pair under ``k``-fold CV; teachers are shared across KD runs."""
    profile = profile or Profile()
    res = resources or CorpusResources(corpus, profile, seed)
    reports = []
    for scenario in scenarios:
        for kind in kinds:
            reports.append(run_scenario(make_recipe(kind, res), scenario, corpus, k=k, seed=seed,
                                        model_name=kind, folds=folds))
    return reports
