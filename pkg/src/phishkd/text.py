"""Email normalization, vocabularies, tokenizers and word embeddings.

Two tokenizer modes exist. Word-level mode lowercases, deletes digits and
drops stopwords; it feeds the baseline students. WordPiece mode keeps
surface forms (digits, stopwords, punctuation) and wraps sequences in
``[CLS] ... [SEP]``; it feeds the teacher and the distilled student, which
share one embedding table.
"""
from __future__ import annotations

import html
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from phishkd.exceptions import ParameterError
from phishkd.numerics.rng import make_rng
from phishkd.numerics.tensor import _sigmoid

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
DEFAULT_MAX_LEN = 512
DEFAULT_VOCAB_CAP = 30_000

# Fixed English stopword list (the common NLTK set minus negations, which
# carry meaning in mail such as "do not share your password").
STOPWORDS = frozenset("""
a about above after again against all am an and any are as at be because been
before being below between both but by can could did do does doing down during
each few for from further had has have having he her here hers herself him
himself his how i if in into is it its itself just me more most my myself now
of off on once only or other our ours ourselves out over own same she should so
some such than that the their theirs them themselves then there these they this
those through to too under until up very was we were what when where which while
who whom why will with would you your yours yourself yourselves
""".split())

_TAG = re.compile(r"<[^>]*>")
_WS = re.compile(r"\s+")
_DIGITS = re.compile(r"\d+")
_WORD = re.compile(r"[^\W\d_]+(?:'[^\W\d_]+)?|\d+")
_BASIC = re.compile(r"\w+|[^\w\s]")


class NormalizedText(str):
    """Normalized email text; ``empty`` flags an email with nothing left."""

    @property
    def empty(self) -> bool:
        return len(self) == 0


def normalize_email(raw: str, word_level: bool = False) -> NormalizedText:
    """Strip HTML, collapse whitespace, lowercase.

    ``word_level=True`` additionally deletes digits, drops punctuation and
    removes stopwords.
    """
    text = html.unescape(_TAG.sub(" ", raw or ""))
    text = _WS.sub(" ", text).strip().lower()
    if word_level:
        text = _DIGITS.sub("", text)
        words = [w for w in _WORD.findall(text) if w not in STOPWORDS]
        text = " ".join(words)
    out = NormalizedText(text)
    if out.empty:
        logger.debug("email normalized to empty text")
    return out


def split_words(text: str) -> list[str]:
    """Word tokens of normalized text (punctuation dropped)."""
    return _WORD.findall(text)


def basic_tokens(text: str) -> list[str]:
    """Whitespace/punctuation pre-tokenization for WordPiece; punctuation kept as tokens."""
    return _BASIC.findall(text)


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

class Vocab:
    """Token ↔ id map with reserved ids ``[PAD]=0 [UNK]=1 [CLS]=2 [SEP]=3``."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                raise ParameterError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        get = self.stoi.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @property
    def non_reserved(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def save(self, path) -> None:
        """One token per line; line ``k`` (0-based) holds id ``k + 4``."""
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.non_reserved:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))


def _ranked(counts: Counter, cap: int, min_freq: int) -> list[str]:
    kept = [(t, c) for t, c in counts.items() if c >= min_freq and t not in RESERVED]
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    room = max(cap - len(RESERVED), 0)
    return [t for t, _ in kept[:room]]


def build_vocab(corpus: Sequence[str], cap: int = DEFAULT_VOCAB_CAP, min_freq: int = 1) -> Vocab:
    """Most-frequent-first word vocabulary after the reserved ids; ties broken lexicographically."""
    if not corpus:
        raise ParameterError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for doc in corpus:
        counts.update(split_words(doc))
    return Vocab(_ranked(counts, cap, min_freq))


def build_wordpiece_vocab(corpus: Sequence[str], cap: int = DEFAULT_VOCAB_CAP, min_freq: int = 2) -> Vocab:
    """WordPiece inventory learned by greedy merges.

    Starts from every character seen (word-initial and ``##`` forms, so
    any word of known characters segments without ``[UNK]``), then
    repeatedly merges the most frequent adjacent pair of units until the
    vocabulary reaches ``cap`` or no pair occurs ``min_freq`` times. Ties go
    to the lexicographically smallest pair.
    """
    if not corpus:
        raise ParameterError("cannot build a vocabulary from an empty corpus")
    words = Counter()
    for doc in corpus:
        words.update(basic_tokens(doc))
    seg = {w: [w[0]] + ["##" + ch for ch in w[1:]] for w in words}
    base = sorted({u for units in seg.values() for u in units})
    pairs: Counter = Counter()
    where: dict[tuple[str, str], set[str]] = {}
    for w, units in seg.items():
        for pr in zip(units, units[1:]):
            pairs[pr] += words[w]
            where.setdefault(pr, set()).add(w)
    vocab = list(base)
    seen = set(base)
    room = cap - len(RESERVED)
    while len(vocab) < room and pairs:
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        (a, b), count = best
        if count < min_freq:
            break
        merged = a + b[2:]
        if merged not in seen:
            seen.add(merged)
            vocab.append(merged)
        for w in sorted(where.pop((a, b), ())):
            units, c = seg[w], words[w]
            for pr in zip(units, units[1:]):
                pairs[pr] -= c
                if pairs[pr] <= 0:
                    del pairs[pr]
                if pr in where and pr != (a, b):
                    where[pr].discard(w)
            out, i = [], 0
            while i < len(units):
                if i + 1 < len(units) and units[i] == a and units[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(units[i])
                    i += 1
            seg[w] = out
            for pr in zip(out, out[1:]):
                pairs[pr] += c
                where.setdefault(pr, set()).add(w)
        pairs.pop((a, b), None)
    return Vocab(vocab[:max(room, 0)])


# ---------------------------------------------------------------------------
# Tokenizers
# ---------------------------------------------------------------------------

@dataclass
class TokenSequence:
    ids: list[int]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)


def tokenize_word(text: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> TokenSequence:
    """Split on whitespace/punctuation and map to ids; OOV words become ``[UNK]``."""
    ids = vocab.encode(split_words(text))
    if len(ids) > max_len:
        return TokenSequence(ids[:max_len], truncated=True)
    return TokenSequence(ids)


def wordpiece_split(word: str, vocab: Vocab, max_chars: int = 100) -> list[str] | None:
    """Greedy longest-match-first segmentation; ``None`` when no segmentation exists."""
    if len(word) > max_chars:
        return None
    pieces = []
    start = 0
    n = len(word)
    while start < n:
        end = n
        found = None
        while end > start:
            cand = word[start:end] if start == 0 else "##" + word[start:end]
            if cand in vocab.stoi:
                found = cand
                break
            end -= 1
        if found is None:
            return None
        pieces.append(found)
        start = end
    return pieces


def tokenize_wordpiece(text: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> TokenSequence:
    """``[CLS]`` + WordPiece ids + ``[SEP]``, at most ``max_len`` ids in total."""
    if max_len < 2:
        raise ParameterError("max_len must leave room for [CLS] and [SEP]")
    ids = [CLS_ID]
    budget = max_len - 1
    truncated = False
    for word in basic_tokens(text):
        pieces = wordpiece_split(word, vocab)
        wids = [UNK_ID] if pieces is None else [vocab.stoi[p] for p in pieces]
        if len(ids) + len(wids) > budget:
            ids.extend(wids[:budget - len(ids)])
            truncated = True
            break
        ids.extend(wids)
    ids.append(SEP_ID)
    return TokenSequence(ids, truncated)


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingConfig:
    dim: int = 100
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.1
    min_lr: float = 1e-4
    batch_size: int = 256
    seed: int = 0
    mode: str = "skipgram"


@dataclass
class EmbeddingTable:
    """``V × d`` matrix; row 0 (``[PAD]``) stays zero."""

    matrix: np.ndarray
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def save(self, path) -> None:
        """Header ``"dim V"`` followed by ``V`` whitespace-separated rows."""
        V, d = self.matrix.shape
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{d} {V}\n")
            for row in self.matrix:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        with open(path, encoding="utf-8") as fh:
            d, V = (int(v) for v in fh.readline().split())
            rows = np.loadtxt(fh, ndmin=2) if V else np.zeros((0, d))
        if rows.shape != (V, d):
            raise ParameterError(f"embedding file declares {V}x{d} but holds {rows.shape}")
        return cls(rows)


def _skipgram_pairs(corpus: Sequence[Sequence[int]], window: int) -> tuple[np.ndarray, np.ndarray]:
    centers, contexts = [], []
    for seq in corpus:
        ids = np.asarray([i for i in seq if i >= len(RESERVED) or i == UNK_ID], dtype=np.int64)
        n = len(ids)
        for off in range(1, window + 1):
            if n <= off:
                break
            centers.extend((ids[:-off], ids[off:]))
            contexts.extend((ids[off:], ids[:-off]))
    if not centers:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


def _cbow_windows(corpus, window: int) -> tuple[np.ndarray, np.ndarray]:
    centers, ctx = [], []
    for seq in corpus:
        ids = [i for i in seq if i >= len(RESERVED) or i == UNK_ID]
        n = len(ids)
        for t in range(n):
            c = ids[max(0, t - window):t] + ids[t + 1:t + 1 + window]
            if c:
                centers.append(ids[t])
                ctx.append(c + [-1] * (2 * window - len(c)))
    return np.asarray(centers, dtype=np.int64), np.asarray(ctx, dtype=np.int64).reshape(-1, 2 * window)


def _scatter_mean(M: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """Add to each row ``M[i]`` the mean of the ``rows`` aimed at it.

    Summing instead would multiply the step for frequent tokens by their
    count in the batch, which diverges on small vocabularies.
    """
    uniq, inv, counts = np.unique(idx, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    S = sp.csr_matrix((1.0 / counts[inv], (inv, np.arange(idx.size))), shape=(uniq.size, idx.size))
    M[uniq] += S @ rows


def _logsig(x):
    return -np.logaddexp(0.0, -x)


def train_embeddings(corpus: Sequence, vocab_size: int, config: EmbeddingConfig | None = None) -> EmbeddingTable:
    """Word2Vec with negative sampling (skip-gram or CBOW), minibatched SGD.

    ``corpus`` holds :class:`TokenSequence` objects or plain id lists.
    Learning rate decays linearly from ``lr`` to ``min_lr``. Deterministic
    for a fixed ``config.seed``.
    """
    cfg = config or EmbeddingConfig()
    if cfg.dim < 2:
        raise ParameterError(f"embedding dim must be >= 2, got {cfg.dim}")
    if cfg.mode not in ("skipgram", "cbow"):
        raise ParameterError(f"mode must be 'skipgram' or 'cbow', got {cfg.mode!r}")
    seqs = [s.ids if isinstance(s, TokenSequence) else list(s) for s in corpus]
    if not seqs:
        raise ParameterError("cannot train embeddings on an empty corpus")
    n_real = vocab_size - len(RESERVED) + 1  # non-reserved ids plus [UNK]
    if n_real < cfg.negatives + 1:
        raise ParameterError(
            f"vocabulary of {vocab_size} ids is too small for {cfg.negatives} negatives")
    rng = make_rng(cfg.seed, "word2vec")
    d = cfg.dim
    W = (rng.random((vocab_size, d)) - 0.5) / d
    W[PAD_ID] = 0.0
    C = np.zeros((vocab_size, d))

    counts = np.zeros(vocab_size)
    for s in seqs:
        np.add.at(counts, np.asarray(s, dtype=np.int64), 1)
    counts[[PAD_ID, CLS_ID, SEP_ID]] = 0
    noise = counts ** 0.75
    if noise.sum() == 0:
        raise ParameterError("corpus holds no trainable tokens")
    noise /= noise.sum()
    noise_cdf = np.cumsum(noise)

    if cfg.mode == "skipgram":
        centers, targets = _skipgram_pairs(seqs, cfg.window)
        ctx = None
    else:
        targets, ctx = _cbow_windows(seqs, cfg.window)
        centers = None
    n = len(targets)
    total_steps = max(1, cfg.epochs * ((n + cfg.batch_size - 1) // cfg.batch_size))
    step = 0
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            lr = cfg.lr - (cfg.lr - cfg.min_lr) * step / total_steps
            step += 1
            idx = order[start:start + cfg.batch_size]
            tgt = targets[idx]
            neg = np.searchsorted(noise_cdf, rng.random((len(idx), cfg.negatives)) * noise_cdf[-1])
            neg = np.minimum(neg, vocab_size - 1)
            if ctx is None:
                src = centers[idx]
                h = W[src]
            else:
                cw = ctx[idx]
                valid = cw >= 0
                cnt = valid.sum(axis=1, keepdims=True)
                h = (W[np.where(valid, cw, 0)] * valid[..., None]).sum(axis=1) / cnt
            out_ids = np.concatenate([tgt[:, None], neg], axis=1)
            U = C[out_ids]
            scores = np.einsum("bd,bkd->bk", h, U)
            labels = np.zeros_like(scores)
            labels[:, 0] = 1.0
            signs = 2.0 * labels - 1.0
            epoch_loss += float(-_logsig(signs * scores).sum())
            g = _sigmoid(scores) - labels
            grad_h = np.einsum("bk,bkd->bd", g, U)
            grad_U = g[..., None] * h[:, None, :]
            _scatter_mean(C, out_ids.reshape(-1), -lr * grad_U.reshape(-1, d))
            if ctx is None:
                _scatter_mean(W, src, -lr * grad_h)
            else:
                share = (-lr * grad_h / cnt)[:, None, :] * valid[..., None]
                _scatter_mean(W, np.where(valid, cw, 0).reshape(-1), share.reshape(-1, d))
        W[PAD_ID] = 0.0
        losses.append(epoch_loss / max(n, 1))
    return EmbeddingTable(W, losses)


def email_vector_mean(seq, table: EmbeddingTable) -> np.ndarray:
    """Mean of the token rows of ``seq`` ignoring ``[PAD]``; zeros (with a warning) if nothing is left."""
    ids = np.asarray(seq.ids if isinstance(seq, TokenSequence) else seq, dtype=np.int64)
    ids = ids[ids != PAD_ID]
    if ids.size == 0:
        logger.warning("email_vector_mean on an all-[PAD] sequence; returning zeros")
        return np.zeros(table.dim)
    return table.matrix[ids].mean(axis=0)
