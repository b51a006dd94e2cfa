"""scikit-learn style wrappers around the recipes in :mod:`phishkd.experiments`.

Both estimators take raw email strings as ``X`` and binary labels as ``y``
(1 = phishing). Vocabularies and pretrained tables are fitted on the
training texts only.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from phishkd.corpus import EmailRecord
from phishkd.exceptions import ParameterError
from phishkd.experiments import KINDS, CorpusResources, Profile, encode_text, fit_model
from phishkd.training import DistillConfig, EncodedData, TrainConfig, predict_proba

_PROFILE_PARAMS = ("word_dim", "hidden", "heads", "head_dim", "teacher_dim", "teacher_layers", "dropout",
                   "max_len", "embed_epochs", "dtype")


def _as_texts(X) -> list[str]:
    if isinstance(X, str):
        raise ParameterError("X must be a sequence of email strings, not a single string")
    texts = [str(x) for x in X]
    if not texts:
        raise ParameterError("X is empty")
    return texts


def _records(texts, y) -> list[EmailRecord]:
    labels = ["phishing" if v else "legitimate" for v in y]
    return [EmailRecord(f"x{i:07d}", "", t, lab, "human") for i, (t, lab) in enumerate(zip(texts, labels))]


class _EmailEstimator(ClassifierMixin, BaseEstimator):
    def _profile(self) -> Profile:
        base = Profile()
        params = self.get_params()
        values = {k: params[k] for k in _PROFILE_PARAMS if params.get(k) is not None}
        return replace(base, **values, **self._budgets())

    def _budgets(self) -> dict:
        return {}

    def _check_y(self, y) -> np.ndarray:
        check_classification_targets(y)
        y = np.asarray(y)
        classes = np.unique(y)
        if not set(classes.tolist()) <= {0, 1}:
            raise ParameterError(f"labels must be 0/1 (1 = phishing), got {classes.tolist()}")
        return y.astype(int)

    def _fit_kind(self, kind: str, X, y):
        texts = _as_texts(X)
        y = self._check_y(y)
        if len(texts) != len(y):
            raise ParameterError(f"X has {len(texts)} emails but y has {len(y)} labels")
        records = _records(texts, y)
        res = CorpusResources(records, self._profile(), seed=self.seed)
        self.model_ = fit_model(kind, res, records, [], self.seed)
        self.vocab_ = res.vocab(self.model_.cfg.tokenizer)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        """``(n, 2)`` array of legitimate/phishing probabilities."""
        check_is_fitted(self, "model_")
        texts = _as_texts(X)
        cfg = self.model_.cfg
        seqs = [encode_text(t, self.vocab_, cfg.tokenizer, cfg.max_len) for t in texts]
        p = predict_proba(self.model_, EncodedData(seqs, [0] * len(seqs), [str(i) for i in range(len(seqs))]))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)


class EmailClassifier(_EmailEstimator):
    """One of the recurrent students or the tiny teacher, trained on labels only.

    ``model`` picks the architecture (``lstm``, ``bilstm``, ``bilstm_sh``,
    ``bilstm_mh`` or ``tiny_teacher``); ``None`` size arguments fall back to
    the :class:`~phishkd.experiments.Profile` defaults.
    """

    def __init__(self, model: str = "bilstm_mh", lr: float = 1e-3, epochs: int = 5, batch_size: int = 32,
                 seed: int = 0, word_dim=None, hidden=None, heads=None, head_dim=None, teacher_dim=None,
                 teacher_layers=None, dropout=None, max_len=None, embed_epochs=None, dtype=None):
        self.model = model
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.word_dim = word_dim
        self.hidden = hidden
        self.heads = heads
        self.head_dim = head_dim
        self.teacher_dim = teacher_dim
        self.teacher_layers = teacher_layers
        self.dropout = dropout
        self.max_len = max_len
        self.embed_epochs = embed_epochs
        self.dtype = dtype

    def _budgets(self) -> dict:
        cfg = TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size)
        return {"baseline": cfg, "teacher": cfg}

    def fit(self, X, y):
        if self.model not in KINDS or self.model == "kd_student":
            valid = [k for k in KINDS if k != "kd_student"]
            raise ParameterError(f"unknown model {self.model!r}; expected one of {valid}")
        return self._fit_kind(self.model, X, y)


class DistilledEmailClassifier(_EmailEstimator):
    """BiLSTM + multi-head attention student distilled from a tiny teacher.

    The teacher is trained first on the same data with ``teacher_lr`` and
    ``teacher_epochs``, then frozen while the student learns from the mix
    of hard labels and softened teacher outputs.
    """

    def __init__(self, alpha: float = 0.5, tau: float = 2.0, lr: float = 1e-4, epochs: int = 3,
                 batch_size: int = 32, teacher_lr: float = 1e-3, teacher_epochs: int = 5, seed: int = 0,
                 hidden=None, heads=None, head_dim=None, teacher_dim=None, teacher_layers=None, dropout=None,
                 max_len=None, embed_epochs=None, dtype=None):
        self.alpha = alpha
        self.tau = tau
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.teacher_lr = teacher_lr
        self.teacher_epochs = teacher_epochs
        self.seed = seed
        self.hidden = hidden
        self.heads = heads
        self.head_dim = head_dim
        self.teacher_dim = teacher_dim
        self.teacher_layers = teacher_layers
        self.dropout = dropout
        self.max_len = max_len
        self.embed_epochs = embed_epochs
        self.dtype = dtype

    def _budgets(self) -> dict:
        distill = DistillConfig(alpha=self.alpha, tau=self.tau, lr=self.lr, epochs=self.epochs,
                                batch_size=self.batch_size)
        teacher = TrainConfig(lr=self.teacher_lr, epochs=self.teacher_epochs, batch_size=self.batch_size)
        return {"distill": distill, "teacher": teacher}

    def fit(self, X, y):
        self._fit_kind("kd_student", X, y)
        return self
