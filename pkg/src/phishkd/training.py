"""Losses, Adam, the supervised loop and the teacher-student distillation loop."""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from phishkd.exceptions import ContractError, DimensionError, NumericError, ParameterError
from phishkd.models import PAD_ID, ModelGraph, TeacherLogits
from phishkd.numerics import (
    Tensor,
    as_tensor,
    backward,
    clip,
    log,
    log_softmax,
    make_rng,
    mul,
    no_grad,
    reduce_mean,
    reduce_sum,
    reshape,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.optimizer != "adam":
            raise ParameterError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class DistillConfig:
    alpha: float = 0.5
    tau: float = 2.0
    lr: float = 1e-4
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must be in [0, 1], got {self.alpha}")
        if not self.tau > 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size)

    def as_train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                           beta1=self.beta1, beta2=self.beta2, eps_adam=self.eps_adam)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

_P_MIN = 1e-12


def bce_loss(preds, labels) -> Tensor:
    """Mean binary cross-entropy of probabilities, clamped to [1e-12, 1 - 1e-12]."""
    p = as_tensor(preds)
    y = np.asarray(labels, dtype=p.dtype).reshape(-1)
    if p.size != y.size:
        raise ContractError(f"{p.size} predictions vs {y.size} labels")
    p = clip(p, _P_MIN, 1.0 - _P_MIN)
    if p.ndim != 1:
        p = reshape(p, (p.size,))
    ll = mul(log(p), y) + mul(log(1.0 - p), 1.0 - y)
    return -reduce_mean(ll)


def _one_hot(y, dtype) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    out = np.zeros((y.size, 2), dtype=dtype)
    out[np.arange(y.size), y] = 1.0
    return out


def hard_loss(z_s, y) -> Tensor:
    """Softmax cross-entropy of two-class logits against labels, mean over the batch."""
    z_s = as_tensor(z_s)
    y = np.asarray(y).reshape(-1)
    if z_s.shape[0] != y.size:
        raise ContractError(f"{z_s.shape[0]} logit rows vs {y.size} labels")
    return -reduce_sum(mul(log_softmax(z_s, axis=-1), _one_hot(y, z_s.dtype))) * (1.0 / y.size)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def kl_soft_loss(z_t, z_s, tau: float) -> Tensor:
    """Mean over the batch of ``KL(softmax(z_t/τ) ‖ softmax(z_s/τ))``.

    The teacher side is treated as a constant; gradient reaches ``z_s`` only.
    """
    if not tau > 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    z_s = as_tensor(z_s)
    zt = np.asarray(z_t.data if isinstance(z_t, Tensor) else z_t, dtype=z_s.dtype)
    if zt.shape != z_s.shape:
        raise DimensionError(f"teacher logits {zt.shape} vs student logits {z_s.shape}")
    if zt.ndim == 1:
        zt = zt[None, :]
        z_s = reshape(z_s, (1,) + z_s.shape)
    p_t = _softmax_np(zt / tau)
    with np.errstate(divide="ignore"):
        log_pt = np.where(p_t > 0, np.log(np.where(p_t > 0, p_t, 1.0)), 0.0)
    entropy_part = float((p_t * log_pt).sum()) / zt.shape[0]
    cross = reduce_sum(mul(log_softmax(z_s * (1.0 / tau), axis=-1), p_t)) * (-1.0 / zt.shape[0])
    return cross + entropy_part


@dataclass
class LossBreakdown:
    l_hard: float
    l_soft: float
    l_distill: float
    alpha: float
    tau: float
    total: Tensor | None = field(default=None, repr=False)

    def identity_gap(self) -> float:
        return abs(self.l_distill - (self.alpha * self.l_hard + (1 - self.alpha) * self.tau ** 2 * self.l_soft))


def distill_loss(z_s, z_t, y, cfg: DistillConfig) -> LossBreakdown:
    """``α·hard + (1−α)·τ²·soft``, with the soft term from :func:`kl_soft_loss`."""
    lh = hard_loss(z_s, y)
    a, tau = float(cfg.alpha), float(cfg.tau)
    if a == 1.0:
        ls_val = 0.0 if z_t is None else float(kl_soft_loss(z_t, z_s, tau).data)
        total = lh
    else:
        ls = kl_soft_loss(z_t, z_s, tau)
        ls_val = float(ls.data)
        total = lh * a + ls * ((1.0 - a) * tau * tau)
    # Report the combination from the float parts so the identity is exact by construction.
    lh_val = float(lh.data)
    ld = a * lh_val + (1.0 - a) * tau * tau * ls_val
    return LossBreakdown(lh_val, ls_val, ld, a, tau, total)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, cfg) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    if state.t < 0:
        raise ParameterError(f"Adam timestep must be >= 0, got {state.t}")
    lr, b1, b2 = cfg.lr, cfg.beta1, cfg.beta2
    eps = getattr(cfg, "eps_adam", 1e-8)
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class EncodedData:
    """Token id sequences with labels and record ids."""

    seqs: list[np.ndarray]
    y: np.ndarray
    ids: list[str]

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if not (len(self.seqs) == len(self.y) == len(self.ids)):
            raise ContractError("seqs, labels and ids differ in length")

    def __len__(self) -> int:
        return len(self.seqs)

    def subset(self, index) -> "EncodedData":
        index = list(index)
        return EncodedData([self.seqs[i] for i in index], self.y[index], [self.ids[i] for i in index])


def encode_records(records, encode: Callable[[str], Sequence[int]]) -> EncodedData:
    seqs = []
    for r in records:
        ids = np.asarray(encode(r.text), dtype=np.int64)
        if ids.size == 0:
            ids = np.array([1], dtype=np.int64)  # lone [UNK] keeps the row usable
        seqs.append(ids)
    return EncodedData(seqs, [r.y for r in records], [r.id for r in records])


def pad_batch(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the batch maximum with the padding id; returns ``(ids, mask)``."""
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), PAD_ID, dtype=np.int64)
    for k, s in enumerate(seqs):
        ids[k, :len(s)] = s
    return ids, ids != PAD_ID


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def predict_proba(model: ModelGraph, data: EncodedData, batch_size: int = 64) -> np.ndarray:
    out = []
    for idx in iter_batches(len(data), batch_size, None):
        ids, mask = pad_batch([data.seqs[i] for i in idx])
        out.append(model.predict_proba(ids, mask))
    return np.concatenate(out) if out else np.zeros(0)


def model_logits2(model: ModelGraph, data: EncodedData, batch_size: int = 64) -> np.ndarray:
    """Two-class eval-mode logits for every row of ``data``."""
    prev, model.mode = model.mode, "eval"
    out = []
    try:
        with no_grad():
            for idx in iter_batches(len(data), batch_size, None):
                ids, mask = pad_batch([data.seqs[i] for i in idx])
                out.append(model.logits2(ids, mask).data)
    finally:
        model.mode = prev
    return np.concatenate(out) if out else np.zeros((0, 2))


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    epoch: int
    step: int
    l_hard: float
    l_soft: float
    l_distill: float
    val_acc: float | None = None
    val_f1: float | None = None


@dataclass
class History:
    steps: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def epoch_losses(self) -> list[float]:
        by = {}
        for s in self.steps:
            by.setdefault(s.epoch, []).append(s.l_distill)
        return [float(np.mean(by[e])) for e in sorted(by)]

    def export_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "step", "l_hard", "l_soft", "l_distill", "val_acc", "val_f1"])
            for s in self.steps:
                w.writerow([s.epoch, s.step, repr(s.l_hard), repr(s.l_soft), repr(s.l_distill),
                            "" if s.val_acc is None else repr(s.val_acc),
                            "" if s.val_f1 is None else repr(s.val_f1)])


def _validate(model: ModelGraph, val: EncodedData | None) -> tuple[float | None, float | None]:
    if val is None or len(val) == 0:
        return None, None
    from phishkd.evalbench import confusion, metrics  # evalbench imports this module

    preds = (predict_proba(model, val) >= 0.5).astype(int)
    rep = metrics(confusion(preds, val.y))
    return rep.accuracy, rep.f1


def _check_finite(value: float, where: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value} at {where}")


def _fit(model: ModelGraph, data: EncodedData, cfg, val, loss_fn, tag: str) -> History:
    hist = History()
    if cfg.epochs == 0:
        return hist
    if len(data) == 0:
        raise ParameterError("training set is empty")
    if val is not None and set(val.ids) & set(data.ids):
        raise ContractError("training and validation sets overlap")
    params = model.trainable()
    state = AdamState()
    step = 0
    model.train()
    try:
        for epoch in range(cfg.epochs):
            shuffle = make_rng(cfg.seed, tag, "shuffle", epoch)
            drop = make_rng(cfg.seed, tag, "dropout", epoch)
            for idx in iter_batches(len(data), cfg.batch_size, shuffle):
                ids, mask = pad_batch([data.seqs[i] for i in idx])
                z_s = model.logits2(ids, mask, drop)
                lb = loss_fn(z_s, idx)
                _check_finite(lb.l_distill, f"epoch {epoch} step {step}")
                grads = backward(lb.total, params)
                adam_step(params, grads, state, cfg)
                hist.steps.append(StepRecord(epoch, step, lb.l_hard, lb.l_soft, lb.l_distill))
                step += 1
            model.eval()
            acc, f1 = _validate(model, val)
            model.train()
            hist.steps[-1].val_acc, hist.steps[-1].val_f1 = acc, f1
    finally:
        model.eval()
    return hist


def train(model: ModelGraph, data: EncodedData, cfg: TrainConfig, val: EncodedData | None = None) -> History:
    """Mini-batch Adam on two-class cross-entropy.

    For a student, the two-class view ``(0, s)`` makes this loss equal to
    binary cross-entropy of ``sigmoid(s)``.
    """
    cfg = cfg if isinstance(cfg, TrainConfig) else cfg.as_train_config()
    hard_cfg = DistillConfig(alpha=1.0, tau=1.0, lr=cfg.lr, epochs=max(cfg.epochs, 1), batch_size=cfg.batch_size)

    def loss_fn(z_s, idx):
        return distill_loss(z_s, None, data.y[idx], hard_cfg)

    return _fit(model, data, cfg, val, loss_fn, "train")


def _fingerprint(model: ModelGraph) -> str:
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k].data).tobytes())
    return h.hexdigest()


def distill_train(student: ModelGraph, teacher: ModelGraph | TeacherLogits, data: EncodedData,
                  cfg: DistillConfig, val: EncodedData | None = None) -> History:
    """Train ``student`` against labels and a frozen teacher's softened logits.

    ``teacher`` is either a model consuming the same token ids as the
    student, or a :class:`TeacherLogits` table covering every training id.
    Teacher logits are computed in eval mode without recording a graph.
    """
    if isinstance(teacher, TeacherLogits):
        table = teacher.lookup(data.ids)

        def teacher_logits(idx, ids, mask):
            return table[idx]
        before = None
    else:
        if teacher.cfg.vocab_size != student.cfg.vocab_size:
            raise ContractError(f"teacher vocabulary {teacher.cfg.vocab_size} != student vocabulary "
                                f"{student.cfg.vocab_size}; both must read the same token ids")
        before = _fingerprint(teacher)

        def teacher_logits(idx, ids, mask):
            teacher.eval()
            with no_grad():
                return teacher.logits2(ids, mask).data

    def loss_fn(z_s, idx):
        ids, mask = pad_batch([data.seqs[i] for i in idx])
        z_t = teacher_logits(idx, ids, mask).astype(z_s.dtype)
        return distill_loss(z_s, z_t, data.y[idx], cfg)

    hist = _fit(student, data, cfg.as_train_config(), val, loss_fn, "train")
    if before is not None and _fingerprint(teacher) != before:
        raise ContractError("teacher parameters changed during distillation")
    return hist
