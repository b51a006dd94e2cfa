"""Neural building blocks: LSTM, BiLSTM, attention, dropout, pooling, dense heads.

Sequence inputs are ``(T, m)`` or batched ``(B, T, m)``. Batched calls take an
optional ``mask`` of shape ``(B, T)`` with 1 for real tokens and 0 for
padding; recurrent state is carried unchanged across padded steps and
attention never assigns weight to padded keys.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from phishkd.exceptions import ContractError, DimensionError, ParameterError
from phishkd.numerics import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    concat,
    flip,
    make_op,
    masked_mean,
    matmul,
    mul,
    reshape,
    sigmoid,
    softmax,
    tanh,
    transpose,
)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

GATES = ("f", "i", "C", "o")


@dataclass
class LstmParams:
    """Per-gate weights. Each ``W_*`` is ``(hidden + input, hidden)`` acting on ``[h, x]``."""

    W_f: Tensor
    W_i: Tensor
    W_C: Tensor
    W_o: Tensor
    b_f: Tensor
    b_i: Tensor
    b_C: Tensor
    b_o: Tensor

    def __post_init__(self):
        shapes = {w.shape for w in (self.W_f, self.W_i, self.W_C, self.W_o)}
        if len(shapes) != 1:
            raise DimensionError(f"gate weight blocks differ in shape: {sorted(shapes)}")
        rows, hidden = self.W_f.shape
        if rows <= hidden:
            raise DimensionError(f"gate weights {self.W_f.shape} leave no room for an input block")
        for b in (self.b_f, self.b_i, self.b_C, self.b_o):
            if b.shape != (hidden,):
                raise DimensionError(f"gate bias shape {b.shape} != ({hidden},)")

    @property
    def hidden(self) -> int:
        return self.W_f.shape[1]

    @property
    def input_size(self) -> int:
        return self.W_f.shape[0] - self.hidden

    @classmethod
    def init(cls, input_size: int, hidden: int, rng: np.random.Generator) -> "LstmParams":
        ws = {f"W_{g}": Parameter(xavier_uniform(rng, hidden + input_size, hidden)) for g in GATES}
        bs = {f"b_{g}": Parameter(np.zeros(hidden)) for g in GATES}
        return cls(**ws, **bs)

    @classmethod
    def zeros(cls, input_size: int, hidden: int) -> "LstmParams":
        ws = {f"W_{g}": Parameter(np.zeros((hidden + input_size, hidden))) for g in GATES}
        bs = {f"b_{g}": Parameter(np.zeros(hidden)) for g in GATES}
        return cls(**ws, **bs)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self)}


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None, dtype=np.float64) -> "LstmState":
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(Tensor(np.zeros(shape, dtype=dtype)), Tensor(np.zeros(shape, dtype=dtype)))


def lstm_cell_forward(x_t, prev: LstmState, p: LstmParams) -> LstmState:
    """One LSTM step, gate by gate.

    f, i, o = sigmoid(W·[h, x] + b); Ĉ = tanh(W_C·[h, x] + b_C);
    C = f⊙C_prev + i⊙Ĉ; h = o⊙tanh(C).
    """
    x_t = as_tensor(x_t)
    if x_t.shape[-1] != p.input_size or prev.h.shape[-1] != p.hidden:
        raise DimensionError(
            f"cell expects input {p.input_size} / hidden {p.hidden}, got x {x_t.shape}, h {prev.h.shape}")
    z = concat([prev.h, x_t], axis=-1)
    f = sigmoid(matmul(z, p.W_f) + p.b_f)
    i = sigmoid(matmul(z, p.W_i) + p.b_i)
    c_hat = tanh(matmul(z, p.W_C) + p.b_C)
    o = sigmoid(matmul(z, p.W_o) + p.b_o)
    c = f * prev.c + i * c_hat
    h = o * tanh(c)
    return LstmState(h=h, c=c)


def _lstm_scan(x: Tensor, Wh: Tensor, Wx: Tensor, b: Tensor, mask: np.ndarray) -> Tensor:
    """Fused left-to-right scan over ``x`` (B, T, I) with hand-written BPTT."""
    xd, whd, wxd = x.data, Wh.data, Wx.data
    B, T, _ = xd.shape
    H = whd.shape[0]
    dtype = xd.dtype
    # Time-major so each step reads a contiguous block.
    m = np.ascontiguousarray(mask.T).astype(dtype)[..., None]
    xw = np.ascontiguousarray(xd.transpose(1, 0, 2)) @ wxd + b.data
    hs = np.zeros((T + 1, B, H), dtype=dtype)
    cs = np.zeros((T + 1, B, H), dtype=dtype)
    gates = np.empty((T, B, 4 * H), dtype=dtype)
    tcs = np.empty((T, B, H), dtype=dtype)
    full = bool(mask.all())
    for t in range(T):
        a = xw[t] + hs[t] @ whd
        # sigmoid(a) = (1 + tanh(a/2)) / 2 evaluated for all four blocks at once,
        # then the candidate block is replaced by tanh.
        gt = gates[t]
        np.tanh(a * 0.5, out=gt)
        gt *= 0.5
        gt += 0.5
        np.tanh(a[:, 2 * H:3 * H], out=gt[:, 2 * H:3 * H])
        f, i, g, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
        c_new = f * cs[t] + i * g
        tc = np.tanh(c_new)
        tcs[t] = tc
        if full:
            cs[t + 1] = c_new
            hs[t + 1] = o * tc
        else:
            mt = m[t]
            cs[t + 1] = cs[t] + mt * (c_new - cs[t])
            hs[t + 1] = hs[t] + mt * (o * tc - hs[t])
    out = np.ascontiguousarray(hs[1:].transpose(1, 0, 2))

    def back(dout):
        dout = dout.transpose(1, 0, 2)
        dxw = np.empty((T, B, 4 * H), dtype=dtype)
        dh_next = np.zeros((B, H), dtype=dtype)
        dc_next = np.zeros((B, H), dtype=dtype)
        for t in range(T - 1, -1, -1):
            gt = gates[t]
            f, i, g, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
            tc = tcs[t]
            mt = m[t]
            dh = dout[t] + dh_next
            dh_new = mt * dh
            dc_new = mt * dc_next + dh_new * o * (1.0 - tc * tc)
            da = dxw[t]
            da[:, :H] = dc_new * cs[t] * f * (1.0 - f)
            da[:, H:2 * H] = dc_new * g * i * (1.0 - i)
            da[:, 2 * H:3 * H] = dc_new * i * (1.0 - g * g)
            da[:, 3 * H:] = dh_new * tc * o * (1.0 - o)
            dh_next = da @ whd.T + (1.0 - mt) * dh
            dc_next = dc_new * f + (1.0 - mt) * dc_next
        flat = dxw.reshape(T * B, 4 * H)
        dWh = hs[:-1].reshape(T * B, H).T @ flat
        dWx = np.ascontiguousarray(xd.transpose(1, 0, 2)).reshape(T * B, -1).T @ flat
        db = flat.sum(axis=0)
        dx = (dxw @ wxd.T).transpose(1, 0, 2)
        return dx, dWh, dWx, db

    return make_op(out, (x, Wh, Wx, b), back, "lstm_scan")


def _fused_weights(p: LstmParams) -> tuple[Tensor, Tensor, Tensor]:
    W = concat([p.W_f, p.W_i, p.W_C, p.W_o], axis=1)
    b = concat([p.b_f, p.b_i, p.b_C, p.b_o], axis=0)
    H = p.hidden
    return W[:H], W[H:], b


def _batched(seq) -> tuple[Tensor, bool]:
    seq = as_tensor(seq)
    if seq.ndim == 2:
        return reshape(seq, (1,) + seq.shape), True
    if seq.ndim != 3:
        raise DimensionError(f"sequence must be (T, m) or (B, T, m), got {seq.shape}")
    return seq, False


def _full_mask(seq: Tensor, mask) -> np.ndarray:
    B, T = seq.shape[:2]
    if mask is None:
        return np.ones((B, T), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (B, T):
        raise DimensionError(f"mask shape {mask.shape} != {(B, T)}")
    return mask


def lstm_forward(seq, p: LstmParams, mask=None, reverse: bool = False) -> Tensor:
    """All hidden states of a scan from the zero state.

    ``reverse=True`` scans right to left (per-sequence, respecting padding)
    and returns states aligned with the input positions.
    """
    x, squeeze = _batched(seq)
    if x.shape[1] == 0:
        raise ParameterError("lstm_forward needs at least one time step")
    if x.shape[2] != p.input_size:
        raise DimensionError(f"input width {x.shape[2]} != LSTM input size {p.input_size}")
    m = _full_mask(x, mask)
    Wh, Wx, b = _fused_weights(p)
    if reverse:
        out = flip(_lstm_scan(flip(x, 1), Wh, Wx, b, m[:, ::-1]), 1)
    else:
        out = _lstm_scan(x, Wh, Wx, b, m)
    return reshape(out, out.shape[1:]) if squeeze else out


def lstm_forward_reference(seq, p: LstmParams, state: LstmState | None = None) -> tuple[Tensor, LstmState]:
    """Unfused scan over an unbatched ``(T, m)`` sequence, threading ``state``."""
    seq = as_tensor(seq)
    if seq.shape[0] == 0:
        raise ParameterError("lstm_forward needs at least one time step")
    state = state or LstmState.zeros(p.hidden, dtype=seq.dtype)
    hs = []
    for t in range(seq.shape[0]):
        state = lstm_cell_forward(seq[t], state, p)
        hs.append(reshape(state.h, (1, p.hidden)))
    return concat(hs, axis=0), state


def bilstm_forward(seq, fwd: LstmParams, bwd: LstmParams, mask=None) -> Tensor:
    """Concatenate forward-at-t with backward-at-t hidden states; width 2·hidden."""
    if fwd.hidden != bwd.hidden:
        raise DimensionError(f"direction hidden sizes differ: {fwd.hidden} vs {bwd.hidden}")
    return concat([lstm_forward(seq, fwd, mask), lstm_forward(seq, bwd, mask, reverse=True)], axis=-1)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    """Q/K/V projections ``(model_dim, heads·head_dim)``; head ``i`` owns column block ``i``.

    ``W_O``/``b_O`` project the concatenated heads; they are ``None`` for the
    single-head variant, which returns the attended values directly.
    """

    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    heads: int
    head_dim: int
    W_O: Tensor | None = None
    b_O: Tensor | None = None

    def __post_init__(self):
        width = self.heads * self.head_dim
        for name in ("W_q", "W_k", "W_v"):
            w = getattr(self, name)
            if w.shape[1] != width:
                raise DimensionError(f"{name} has {w.shape[1]} columns, expected heads*head_dim={width}")
        if self.W_O is not None and self.W_O.shape[0] != width:
            raise DimensionError(f"W_O has {self.W_O.shape[0]} rows, expected heads*head_dim={width}")

    @property
    def model_dim(self) -> int:
        return self.W_q.shape[0]

    @classmethod
    def init(cls, model_dim: int, heads: int, head_dim: int, rng: np.random.Generator,
             out_dim: int | None = None, project: bool = True) -> "AttentionParams":
        width = heads * head_dim
        qkv = [Parameter(xavier_uniform(rng, model_dim, width)) for _ in range(3)]
        W_O = b_O = None
        if project:
            out_dim = out_dim or width
            W_O = Parameter(xavier_uniform(rng, width, out_dim))
            b_O = Parameter(np.zeros(out_dim))
        return cls(*qkv, heads=heads, head_dim=head_dim, W_O=W_O, b_O=b_O)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.W_q": self.W_q, f"{prefix}.W_k": self.W_k, f"{prefix}.W_v": self.W_v}
        if self.W_O is not None:
            out[f"{prefix}.W_O"] = self.W_O
            out[f"{prefix}.b_O"] = self.b_O
        return out


def scaled_dot_product(Q: Tensor, K: Tensor, V: Tensor, key_mask=None) -> tuple[Tensor, Tensor]:
    """``softmax(Q Kᵀ / sqrt(d_k)) V`` with row-wise softmax over unmasked keys."""
    d_k = Q.shape[-1]
    scores = matmul(Q, transpose(K, tuple(range(K.ndim - 2)) + (K.ndim - 1, K.ndim - 2)))
    scores = scores * (1.0 / np.sqrt(d_k))
    weights = softmax(scores, axis=-1, mask=key_mask)
    return matmul(weights, V), weights


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    B, T, _ = x.shape
    return transpose(reshape(x, (B, T, heads, head_dim)), (0, 2, 1, 3))


def _attend(h: Tensor, p: AttentionParams, mask) -> tuple[Tensor, Tensor]:
    if h.shape[-1] != p.model_dim:
        raise DimensionError(f"attention input width {h.shape[-1]} != projection rows {p.model_dim}")
    B, T, _ = h.shape
    Q = _split_heads(matmul(h, p.W_q), p.heads, p.head_dim)
    K = _split_heads(matmul(h, p.W_k), p.heads, p.head_dim)
    V = _split_heads(matmul(h, p.W_v), p.heads, p.head_dim)
    key_mask = None if mask is None else np.asarray(mask, dtype=bool)[:, None, None, :]
    ctx, weights = scaled_dot_product(Q, K, V, key_mask)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (B, T, p.heads * p.head_dim))
    return merged, weights


def attention_single(h, p: AttentionParams, mask=None) -> tuple[Tensor, Tensor, Tensor]:
    """Single-head attention over BiLSTM states.

    Returns ``(outputs, pooled, weights)``: per-position attended values
    (T × proj), their mean over unmasked rows, and the attention matrix.
    """
    x, squeeze = _batched(h)
    if p.heads != 1:
        raise ContractError(f"attention_single needs one head, got {p.heads}")
    m = _full_mask(x, mask)
    out, weights = _attend(x, p, m)
    pooled = masked_mean(out, m, axis=1)
    if squeeze:
        return reshape(out, out.shape[1:]), reshape(pooled, pooled.shape[1:]), reshape(weights, weights.shape[2:])
    return out, pooled, weights


def attention_multihead(h, p: AttentionParams, mask=None, return_weights: bool = False):
    """Per-head scaled dot-product attention, concatenated and projected by ``W_O``, ``b_O``."""
    x, squeeze = _batched(h)
    if p.W_O is None:
        raise ContractError("multi-head attention needs an output projection W_O")
    m = _full_mask(x, mask)
    merged, weights = _attend(x, p, m)
    out = matmul(merged, p.W_O) + p.b_O
    if squeeze:
        out = reshape(out, out.shape[1:])
        weights = reshape(weights, weights.shape[1:])
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------------------
# Dropout, pooling, heads
# ---------------------------------------------------------------------------

def dropout(x, rate: float, mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train mode masks and rescales by 1/(1-rate); eval is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    x = as_tensor(x)
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, keep)


def global_average_pool(seq, mask=None) -> Tensor:
    """Column-wise mean over time; padded rows are excluded."""
    x, squeeze = _batched(seq)
    if x.shape[1] == 0:
        raise ParameterError("cannot pool an empty sequence")
    pooled = masked_mean(x, _full_mask(x, mask), axis=1)
    return reshape(pooled, pooled.shape[1:]) if squeeze else pooled


def dense(x, W, b) -> Tensor:
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"dense input width {x.shape[-1]} != weight rows {W.shape[0]}")
    return add(matmul(x, W), b)


def dense_sigmoid(x, W, b) -> Tensor:
    """``sigmoid(x·W + b)``; with ``W`` of shape (m, 1) the result is one probability per row."""
    return sigmoid(dense(x, W, b))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"PKDCKPT1"


def save_tensors(path_or_file, tensors: dict[str, np.ndarray], meta: bytes = b"") -> None:
    """Write named tensors: magic, meta blob, then per tensor name, shape header, '<f8' data.

    Byte-for-byte deterministic for equal inputs.
    """
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<Q", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
        raw = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(data)


def load_tensors(path_or_file) -> tuple[dict[str, np.ndarray], bytes]:
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    if data[:8] != _MAGIC:
        raise ContractError("not a checkpoint archive (bad magic)")
    pos = 8

    def read_u64(n=1):
        nonlocal pos
        vals = struct.unpack_from(f"<{n}Q", data, pos)
        pos += 8 * n
        return vals

    (meta_len,) = read_u64()
    meta = data[pos:pos + meta_len]
    pos += meta_len
    (count,) = read_u64()
    out = {}
    for _ in range(count):
        (name_len,) = read_u64()
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = read_u64()
        shape = read_u64(ndim) if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return out, meta
