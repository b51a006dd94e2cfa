"""Student and teacher networks assembled from :mod:`phishkd.layers`."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from phishkd.exceptions import ContractError, DimensionError, ParameterError
from phishkd.layers import (
    AttentionParams,
    LstmParams,
    attention_multihead,
    attention_single,
    bilstm_forward,
    dense,
    dropout,
    load_tensors,
    lstm_forward,
    save_tensors,
    xavier_uniform,
)
from phishkd.numerics import (
    Parameter,
    Tensor,
    add,
    concat,
    gelu,
    getitem,
    layer_norm,
    make_rng,
    masked_mean,
    no_grad,
    reshape,
    sigmoid,
    take_rows,
)

STUDENT_KINDS = ("lstm", "bilstm", "bilstm_sh", "bilstm_mh", "kd_student")
TEACHER_KIND = "tiny_teacher"
KINDS = STUDENT_KINDS + (TEACHER_KIND,)
PAD_ID = 0


@dataclass
class ModelConfig:
    kind: str
    vocab_size: int = 30000
    embed_dim: int = 100
    hidden: int = 128
    heads: int = 4
    head_dim: int = 64
    layers: int = 4
    max_len: int = 512
    dropout: float = 0.5
    ffn_dim: int = 512

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown model kind {self.kind!r}; valid: {', '.join(KINDS)}")
        for name in ("vocab_size", "embed_dim", "hidden", "heads", "head_dim", "max_len", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.layers < 0:
            raise ParameterError(f"layers must be >= 0, got {self.layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def tokenizer(self) -> str:
        return "wordpiece" if self.kind in ("kd_student", TEACHER_KIND) else "word"

    def to_dict(self) -> dict:
        return asdict(self)


def default_config(kind: str, **overrides) -> ModelConfig:
    """Reference configuration per kind.

    Word-level baselines use 100-dim embeddings and 128 units per LSTM
    direction; the KD student matches the teacher's 128-dim WordPiece table
    and uses 4 heads of width 64. The teacher is a four-layer transformer of
    width 128 sized for CPU work.
    """
    base = {
        "lstm": dict(embed_dim=100),
        "bilstm": dict(embed_dim=100),
        "bilstm_sh": dict(embed_dim=100, heads=1, head_dim=256),
        "bilstm_mh": dict(embed_dim=100),
        "kd_student": dict(embed_dim=128),
        TEACHER_KIND: dict(vocab_size=5000, embed_dim=128, heads=4, head_dim=32, layers=4,
                           max_len=256, dropout=0.1, ffn_dim=512),
    }
    if kind not in base:
        raise ParameterError(f"unknown model kind {kind!r}; valid: {', '.join(KINDS)}")
    return ModelConfig(kind=kind, **{**base[kind], **overrides})


@dataclass
class ModelGraph:
    """A configured network: ordered named layers over a flat parameter table.

    ``forward`` maps padded id batches to logits: shape ``(B,)`` for students
    (a single pre-sigmoid score) and ``(B, 2)`` for the teacher.
    """

    cfg: ModelConfig
    params: dict[str, Tensor]
    layers: list[str]
    mode: str = "eval"
    frozen: set[str] = field(default_factory=set)

    @property
    def is_teacher(self) -> bool:
        return self.cfg.kind == TEACHER_KIND

    def train(self) -> "ModelGraph":
        self.mode = "train"
        return self

    def eval(self) -> "ModelGraph":
        self.mode = "eval"
        return self

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "ModelGraph":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise DimensionError(f"{k}: checkpoint shape {v.shape} != model shape {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.dtype)

    def forward(self, ids, mask=None, rng: np.random.Generator | None = None) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if mask is None:
            mask = ids != PAD_ID
        mask = np.asarray(mask, dtype=bool)
        if ids.shape[1] == 0:
            raise ParameterError("empty input sequence")
        if ids.max(initial=0) >= self.cfg.vocab_size or ids.min(initial=0) < 0:
            raise ParameterError(f"token id out of range for vocabulary of {self.cfg.vocab_size}")
        if self.mode == "train" and self.cfg.dropout > 0 and rng is None:
            raise ParameterError("train-mode forward needs a generator for dropout")
        fn = _teacher_forward if self.is_teacher else _student_forward
        return fn(self, ids, mask, rng)

    __call__ = forward

    def logits2(self, ids, mask=None, rng=None) -> Tensor:
        """Two-class logits ``(legit, phish)``; students map score ``s`` to ``(0, s)``."""
        z = self.forward(ids, mask, rng)
        if self.is_teacher:
            return z
        zs = reshape(z, (z.shape[0], 1))
        return concat([zs * 0.0, zs], axis=1)

    def predict_proba(self, ids, mask=None) -> np.ndarray:
        """Probability of the phishing class, eval mode, no graph recorded."""
        prev, self.mode = self.mode, "eval"
        try:
            with no_grad():
                z = self.forward(ids, mask)
        finally:
            self.mode = prev
        if self.is_teacher:
            d = z.data[:, 1] - z.data[:, 0]
            return 1.0 / (1.0 + np.exp(-d))
        return sigmoid(z).data

    def save(self, path_or_file) -> None:
        meta = json.dumps({"cfg": self.cfg.to_dict(), "layers": self.layers, "frozen": sorted(self.frozen)},
                          sort_keys=True).encode("utf-8")
        save_tensors(path_or_file, self.state_dict(), meta)


def load_model(path_or_file) -> ModelGraph:
    tensors, meta = load_tensors(path_or_file)
    info = json.loads(meta.decode("utf-8"))
    cfg = ModelConfig(**info["cfg"])
    model = build_teacher(cfg) if cfg.kind == TEACHER_KIND else build_student(cfg)
    model.load_state_dict(tensors)
    model.frozen = set(info.get("frozen", ()))
    return model


# ---------------------------------------------------------------------------
# Students
# ---------------------------------------------------------------------------

def _lstm_named(prefix: str, p: LstmParams) -> dict[str, Tensor]:
    return p.named(prefix)


def _lstm_from(params: Mapping[str, Tensor], prefix: str) -> LstmParams:
    return LstmParams(**{k: params[f"{prefix}.{k}"] for k in ("W_f", "W_i", "W_C", "W_o", "b_f", "b_i", "b_C", "b_o")})


def _attn_from(params: Mapping[str, Tensor], prefix: str, heads: int, head_dim: int) -> AttentionParams:
    return AttentionParams(params[f"{prefix}.W_q"], params[f"{prefix}.W_k"], params[f"{prefix}.W_v"],
                           heads=heads, head_dim=head_dim,
                           W_O=params.get(f"{prefix}.W_O"), b_O=params.get(f"{prefix}.b_O"))


def build_student(cfg: ModelConfig, seed: int = 0) -> ModelGraph:
    """embedding → (Bi)LSTM → [attention] → masked mean pool → dropout → dense.

    Weights are Xavier-uniform and biases zero. The padding row of the
    embedding starts at zero and never receives gradient.
    """
    if cfg.kind not in STUDENT_KINDS:
        raise ParameterError(f"{cfg.kind!r} is not a student kind; valid: {', '.join(STUDENT_KINDS)}")
    rng = make_rng(seed, "student", cfg.kind)
    params: dict[str, Tensor] = {}
    table = xavier_uniform(rng, cfg.vocab_size, cfg.embed_dim)
    table[PAD_ID] = 0.0
    params["embed.table"] = Parameter(table)
    layers = ["embed"]
    if cfg.kind == "lstm":
        params.update(LstmParams.init(cfg.embed_dim, cfg.hidden, rng).named("lstm"))
        layers.append("lstm")
        width = cfg.hidden
    else:
        params.update(LstmParams.init(cfg.embed_dim, cfg.hidden, rng).named("bilstm.fwd"))
        params.update(LstmParams.init(cfg.embed_dim, cfg.hidden, rng).named("bilstm.bwd"))
        layers.append("bilstm")
        width = 2 * cfg.hidden
    if cfg.kind == "bilstm_sh":
        att = AttentionParams.init(width, 1, cfg.heads * cfg.head_dim, rng, project=False)
        params.update(att.named("attn"))
        layers.append("attn_single")
        width = cfg.heads * cfg.head_dim
    elif cfg.kind in ("bilstm_mh", "kd_student"):
        att = AttentionParams.init(width, cfg.heads, cfg.head_dim, rng, project=True)
        params.update(att.named("attn"))
        layers.append("attn_multi")
        width = cfg.heads * cfg.head_dim
    layers += ["pool", "dropout", "head"]
    params["head.W"] = Parameter(xavier_uniform(rng, width, 1))
    params["head.b"] = Parameter(np.zeros(1))
    for k, v in params.items():
        v.name = k
    return ModelGraph(cfg, params, layers)


def _student_forward(m: ModelGraph, ids, mask, rng) -> Tensor:
    P, cfg = m.params, m.cfg
    h = take_rows(P["embed.table"], ids, frozen_rows=(PAD_ID,))
    if "lstm" in m.layers:
        h = lstm_forward(h, _lstm_from(P, "lstm"), mask)
    else:
        h = bilstm_forward(h, _lstm_from(P, "bilstm.fwd"), _lstm_from(P, "bilstm.bwd"), mask)
    if "attn_single" in m.layers:
        _, pooled, _ = attention_single(h, _attn_from(P, "attn", 1, cfg.heads * cfg.head_dim), mask)
    else:
        if "attn_multi" in m.layers:
            h = attention_multihead(h, _attn_from(P, "attn", cfg.heads, cfg.head_dim), mask)
        pooled = masked_mean(h, mask, axis=1)
    pooled = dropout(pooled, cfg.dropout, m.mode, rng)
    z = dense(pooled, P["head.W"], P["head.b"])
    return reshape(z, (z.shape[0],))


# ---------------------------------------------------------------------------
# Teacher
# ---------------------------------------------------------------------------

@dataclass
class BlockParams:
    """One pre-norm transformer layer: attention and GELU feed-forward sublayers."""

    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d: int, heads: int, head_dim: int, ffn: int, rng) -> "BlockParams":
        return cls(Parameter(np.ones(d)), Parameter(np.zeros(d)),
                   AttentionParams.init(d, heads, head_dim, rng, out_dim=d),
                   Parameter(np.ones(d)), Parameter(np.zeros(d)),
                   Parameter(xavier_uniform(rng, d, ffn)), Parameter(np.zeros(ffn)),
                   Parameter(xavier_uniform(rng, ffn, d)), Parameter(np.zeros(d)))

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.ln1.g": self.ln1_g, f"{prefix}.ln1.b": self.ln1_b}
        out.update(self.attn.named(f"{prefix}.attn"))
        out.update({f"{prefix}.ln2.g": self.ln2_g, f"{prefix}.ln2.b": self.ln2_b,
                    f"{prefix}.ffn.W1": self.W1, f"{prefix}.ffn.b1": self.b1,
                    f"{prefix}.ffn.W2": self.W2, f"{prefix}.ffn.b2": self.b2})
        return out

    @classmethod
    def from_params(cls, P: Mapping[str, Tensor], prefix: str, heads: int, head_dim: int) -> "BlockParams":
        return cls(P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"], _attn_from(P, f"{prefix}.attn", heads, head_dim),
                   P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"], P[f"{prefix}.ffn.W1"], P[f"{prefix}.ffn.b1"],
                   P[f"{prefix}.ffn.W2"], P[f"{prefix}.ffn.b2"])


def transformer_block(h: Tensor, p: BlockParams, mask=None) -> Tensor:
    """``h + MHA(LN(h))`` followed by ``h + FFN(LN(h))`` with a GELU hidden layer."""
    a = attention_multihead(layer_norm(h, p.ln1_g, p.ln1_b), p.attn, mask)
    h = add(h, a)
    f = dense(gelu(dense(layer_norm(h, p.ln2_g, p.ln2_b), p.W1, p.b1)), p.W2, p.b2)
    return add(h, f)


def build_teacher(cfg: ModelConfig, seed: int = 0) -> ModelGraph:
    """Token plus learned position embeddings → ``layers`` blocks → final LN → [CLS] row → 2 logits."""
    if cfg.kind != TEACHER_KIND:
        raise ParameterError(f"build_teacher needs kind {TEACHER_KIND!r}, got {cfg.kind!r}")
    rng = make_rng(seed, "teacher")
    d = cfg.embed_dim
    params: dict[str, Tensor] = {}
    table = xavier_uniform(rng, cfg.vocab_size, d)
    table[PAD_ID] = 0.0
    params["embed.table"] = Parameter(table)
    params["embed.pos"] = Parameter(rng.normal(0.0, 0.02, size=(cfg.max_len, d)))
    layers = ["embed"]
    for i in range(cfg.layers):
        params.update(BlockParams.init(d, cfg.heads, cfg.head_dim, cfg.ffn_dim, rng).named(f"block{i}"))
        layers.append(f"block{i}")
    params["final_ln.g"] = Parameter(np.ones(d))
    params["final_ln.b"] = Parameter(np.zeros(d))
    params["head.W"] = Parameter(xavier_uniform(rng, d, 2))
    params["head.b"] = Parameter(np.zeros(2))
    layers += ["final_ln", "cls", "dropout", "head"]
    for k, v in params.items():
        v.name = k
    return ModelGraph(cfg, params, layers)


def _teacher_forward(m: ModelGraph, ids, mask, rng) -> Tensor:
    P, cfg = m.params, m.cfg
    B, T = ids.shape
    if T > cfg.max_len:
        raise ParameterError(f"sequence length {T} exceeds teacher max_len {cfg.max_len}")
    h = add(take_rows(P["embed.table"], ids, frozen_rows=(PAD_ID,)), getitem(P["embed.pos"], slice(0, T)))
    for i in range(cfg.layers):
        h = transformer_block(h, BlockParams.from_params(P, f"block{i}", cfg.heads, cfg.head_dim), mask)
    h = layer_norm(h, P["final_ln.g"], P["final_ln.b"])
    cls = getitem(h, (slice(None), 0))
    cls = dropout(cls, cfg.dropout, m.mode, rng)
    return dense(cls, P["head.W"], P["head.b"])


# ---------------------------------------------------------------------------
# Utilities
# ---------------------------------------------------------------------------

def transfer_embeddings(student: ModelGraph, teacher: ModelGraph, freeze: bool = False) -> None:
    """Copy the teacher's token table into the student; optionally freeze it."""
    src, dst = teacher.params["embed.table"], student.params["embed.table"]
    if src.shape != dst.shape:
        raise ContractError(f"embedding shapes differ: student {dst.shape} vs teacher {src.shape}")
    dst.data = src.data.astype(dst.dtype, copy=True)
    if freeze:
        student.frozen.add("embed.table")


def init_embeddings(model: ModelGraph, matrix: np.ndarray, freeze: bool = False) -> None:
    """Overwrite the token table with pretrained vectors (PAD row forced to zero)."""
    dst = model.params["embed.table"]
    matrix = np.asarray(matrix)
    if matrix.shape != dst.shape:
        raise ContractError(f"embedding shapes differ: model {dst.shape} vs given {matrix.shape}")
    dst.data = matrix.astype(dst.dtype, copy=True)
    dst.data[PAD_ID] = 0.0
    if freeze:
        model.frozen.add("embed.table")


def param_count(m: ModelGraph) -> int:
    return int(sum(t.size for t in m.params.values()))


def trunk_param_count(m: ModelGraph) -> int:
    """Parameters outside the token and position tables."""
    return int(sum(t.size for k, t in m.params.items() if not k.startswith("embed.")))


def build_model(cfg: ModelConfig, seed: int = 0) -> ModelGraph:
    return build_teacher(cfg, seed) if cfg.kind == TEACHER_KIND else build_student(cfg, seed)


# ---------------------------------------------------------------------------
# Teacher logits
# ---------------------------------------------------------------------------

@dataclass
class TeacherLogits:
    """Per-record teacher logits, stored as ``(z_legit, z_phish)``.

    Single-logit sources (``fmt == "single"``) are viewed as ``(0, z)``.
    """

    table: dict[str, tuple[float, float]]
    fmt: str = "pair"

    def __len__(self) -> int:
        return len(self.table)

    def lookup(self, ids: Sequence[str]) -> np.ndarray:
        missing = [i for i in ids if i not in self.table]
        if missing:
            raise ContractError(f"teacher logits missing for {len(missing)} id(s): {missing[:20]}")
        return np.array([self.table[i] for i in ids], dtype=np.float64)

    def save(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if self.fmt == "single":
                w.writerow(["id", "z"])
                for k in sorted(self.table):
                    w.writerow([k, repr(self.table[k][1])])
            else:
                w.writerow(["id", "z0", "z1"])
                for k in sorted(self.table):
                    z0, z1 = self.table[k]
                    w.writerow([k, repr(z0), repr(z1)])


def load_teacher_logits(path) -> TeacherLogits:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header == ["id", "z0", "z1"]:
            fmt = "pair"
        elif header == ["id", "z"]:
            fmt = "single"
        else:
            raise ContractError(f"teacher logits header must be 'id,z0,z1' or 'id,z', got {header}")
        table: dict[str, tuple[float, float]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ContractError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            rid = row[0]
            if rid in table:
                raise ContractError(f"line {lineno}: duplicate id {rid!r}")
            vals = [float(v) for v in row[1:]]
            table[rid] = (0.0, vals[0]) if fmt == "single" else (vals[0], vals[1])
    return TeacherLogits(table, fmt)
