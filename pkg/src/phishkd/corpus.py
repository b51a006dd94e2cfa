"""Email records, corpus I/O, the synthetic generator and TF-IDF analytics."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.feature_extraction.text import TfidfVectorizer

from phishkd.exceptions import ContractError, CorpusError, ParameterError
from phishkd.numerics.rng import make_rng
from phishkd.text import normalize_email, split_words

logger = logging.getLogger(__name__)

LABELS = ("phishing", "legitimate")
SOURCES = ("human", "llm")
FIELDS = ("id", "subject", "body", "label", "source", "meta")


@dataclass
class EmailRecord:
    id: str
    subject: str
    body: str
    label: str
    source: str
    meta: dict = field(default_factory=dict)

    @property
    def y(self) -> int:
        """1 for phishing (the positive class), 0 for legitimate."""
        return int(self.label == "phishing")

    @property
    def text(self) -> str:
        return f"{self.subject}\n{self.body}" if self.subject else self.body

    def validate(self) -> None:
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if normalize_email(self.body).empty:
            raise ValueError("body is empty after normalization")
        if not isinstance(self.meta, dict):
            raise ValueError("meta must be an object")


def _record_from_obj(obj) -> EmailRecord:
    if not isinstance(obj, dict):
        raise ValueError("line is not a JSON object")
    missing = [k for k in FIELDS if k not in obj]
    if missing:
        raise ValueError(f"missing fields {missing}")
    rec = EmailRecord(id=str(obj["id"]), subject=str(obj["subject"]), body=str(obj["body"]),
                      label=obj["label"], source=obj["source"], meta=obj["meta"])
    rec.validate()
    return rec


def load_corpus(path, strict: bool = True) -> list[EmailRecord]:
    """Read JSON lines. Invalid lines are reported with their 1-based index.

    With ``strict`` any invalid line raises :class:`CorpusError`; otherwise
    invalid lines are skipped and logged.
    """
    records, errors = [], []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = _record_from_obj(json.loads(line))
                if rec.id in seen:
                    raise ValueError(f"duplicate id {rec.id!r}")
            except (ValueError, TypeError) as exc:
                errors.append((lineno, str(exc)))
                continue
            seen.add(rec.id)
            records.append(rec)
    if errors:
        msg = "; ".join(f"line {i}: {m}" for i, m in errors[:20])
        if strict:
            raise CorpusError(f"{len(errors)} invalid record(s): {msg}", errors)
        logger.warning("skipped %d invalid record(s): %s", len(errors), msg)
    return records


def save_corpus(records: Iterable[EmailRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps({k: getattr(rec, k) for k in FIELDS}, sort_keys=False, ensure_ascii=False))
            fh.write("\n")


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class GeneratorConfig:
    """Knobs for :func:`generate_synthetic_corpus`.

    ``vocab_size`` is the size of the pseudo-word pool used for project and
    product names; ``typo_rate`` applies to cue words in the human
    phishing register; ``hard_ham_rate`` is the share of legitimate mail
    that borrows phishing-like vocabulary in a benign context; ``subtle_rate``
    is the share of LLM phishing carrying a single mild cue;
    ``obfuscate_rate`` is the share of human phishing dressed as office mail
    whose only cue is one sentence of deliberately misspelled cue words.
    """

    n_per_cell: int = 500
    seed: int = 7
    vocab_size: int = 400
    registers: tuple[str, ...] = SOURCES
    typo_rate: float = 0.35
    hard_ham_rate: float = 0.25
    subtle_rate: float = 0.35
    obfuscate_rate: float = 0.3


_NAMES = ("alice bob carol david emma frank grace henry irene jack karen liam maria noah olivia "
          "peter quinn rachel sam tina umar victor wendy xavier yara zoe").split()
_DAYS = "monday tuesday wednesday thursday friday".split()
_TIMES = ("9am", "10am", "11am", "1pm", "2pm", "3pm", "4pm")
_TLDS = ("xyz", "top", "ru", "info", "click", "biz")
_BRANDS = "paypal amazon netflix microsoft apple chase wellsfargo dhl fedex".split()
_SYLL = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]

# Cue words shared by both phishing registers. Human phishing uses them
# bluntly (often misspelled); LLM phishing wraps them in polite prose.
_CUE_WORDS = ("account", "verify", "password", "suspended", "confirm", "login", "security",
              "update", "access", "credentials", "immediately", "restricted")


def _pseudo_words(rng, n: int) -> list[str]:
    out, seen = [], set()
    while len(out) < n:
        w = "".join(rng.choice(_SYLL, size=rng.integers(2, 4)))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def _typo(word: str, rng) -> str:
    if len(word) < 4:
        return word
    i = int(rng.integers(1, len(word) - 1))
    kind = int(rng.integers(0, 4))
    if kind == 3:
        return word[:i] + "abcdefghijklmnopqrstuvwxyz"[int(rng.integers(26))] + word[i + 1:]
    if kind == 0:
        return word[:i] + word[i + 1:]
    if kind == 1:
        return word[:i] + word[i + 1] + word[i] + word[i + 2:]
    return word[:i] + word[i] + word[i:]


class _Slots:
    """Random slot fillers drawn from one generator."""

    def __init__(self, rng, nouns: Sequence[str]):
        self.rng = rng
        self.nouns = nouns

    def pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    def fill(self, template: str, **extra) -> str:
        def sub(m):
            key = m.group(1)
            if key in extra:
                return extra[key]
            if key == "name":
                if self.rng.random() < 0.3:
                    # one-off names keep rare tokens in every class
                    return "".join(self.rng.choice(_SYLL, size=3))
                return self.pick(_NAMES)
            if key == "rare":
                return "".join(self.rng.choice(_SYLL, size=3))
            if key == "noun":
                return self.pick(self.nouns)
            if key == "day":
                return self.pick(_DAYS)
            if key == "time":
                return self.pick(_TIMES)
            if key == "brand":
                return self.pick(_BRANDS)
            if key == "num":
                return str(int(self.rng.integers(2, 99)))
            if key == "bad_url":
                host = self.pick(self.nouns) + self.pick(("-secure", "-login", "-verify", "0nline", "-support"))
                return f"http://{host}.{self.pick(_TLDS)}/{self.pick(('login', 'verify', 'account', 'update'))}"
            if key == "good_url":
                return f"https://portal.{self.pick(self.nouns)}.com/{self.pick(('review', 'account', 'summary', 'docs'))}"
            if key == "smooth_url":
                return (f"https://{self.pick(self.nouns)}-{self.pick(('services', 'support', 'accounts'))}.com/"
                        f"{self.pick(('account-review', 'secure-verification', 'access-renewal'))}")
            raise KeyError(key)

        return re.sub(r"\{(\w+)\}", sub, template)


_HUMAN_LEGIT = [
    "the {noun} meeting moved to {day} at {time}.",
    "can you send me the {noun} notes before {day}?",
    "attached is the draft for {noun}, comments welcome.",
    "lunch on {day}? the new place near the office.",
    "i pushed the fix for {noun}, tests pass now.",
    "reminder that the {noun} demo is {day} at {time}.",
    "who has the keys for the {noun} room?",
    "the printer on floor {num} is broken again.",
    "{name} is out sick today, i will cover the {noun} call.",
    "sorry for the late reply, things got busy with {noun}.",
    "let me know if {day} works for the {noun} review.",
    "great job on the {noun} launch everyone.",
    "the {rare} {rare} {rare} {rare} job failed overnight.",
    "notes from the {rare} {rare} {rare} sync are in the shared folder.",
    "{rare} {rare} {rare} {rare}, as discussed.",
    "ask {name} about the {rare} {rare} {rare} estimate.",
]
_HUMAN_LEGIT_HARD = [
    "your password for the {noun} wiki was changed as you asked.",
    "please verify the {noun} numbers before the review.",
    "click the link in the calendar invite to join the {noun} call.",
    "it told me my account was locked so i reset it myself.",
    "security said to update the vpn client before {day}.",
]
_HUMAN_PHISH_CUES = [
    "urgent! your {account} has been {suspended}.",
    "{verify} your {password} {immediately} at {bad_url}",
    "act now or lose {access} within {num} hours!!!",
    "click here {bad_url} to restore your {account}",
    "your {brand} {login} is {restricted}, {confirm} now.",
    "we detected unusal activity, {update} your {credentials} now!",
    "final warning: {account} will be closed today.",
    "you have won a ${num}00 {brand} gift card, claim at {bad_url}",
]
_HUMAN_PHISH_OBFUSCATED = [
    "{verify} your {account} {login} {immediately}.",
    "{confirm} the {password} for your {account}.",
    "your {access} is {restricted}, {update} your {credentials}.",
    "{security}: {account} {suspended}, {verify} your {login}.",
]
_HUMAN_PHISH_OPEN = ["dear customer,", "dear user,", "attention:", "hello,", "dear {brand} member,"]

_LLM_OPEN = ["dear {name},", "hello {name},", "good morning {name},"]
_LLM_COURTESY = [
    "i hope this message finds you well.",
    "thank you for your continued partnership.",
    "i trust your week is going smoothly.",
]
_LLM_LEGIT = [
    "i wanted to follow up regarding the {noun} timeline we discussed on {day}.",
    "please find attached the updated {noun} summary for your review.",
    "could we schedule a brief call on {day} to align on the {noun} deliverables?",
    "the revised {noun} budget reflects the feedback from last quarter.",
    "our team has completed the initial assessment of the {noun} proposal.",
    "i would appreciate your thoughts on the draft before {day}.",
    "the {noun} workshop has been confirmed for {day} at {time}.",
    "you can find the supporting documents on {good_url}.",
]
_LLM_LEGIT_HARD = [
    "as part of our routine security review, please remember to update your password through the usual company portal.",
    "your account details were updated successfully at your request.",
    "for security reasons, the {noun} dashboard now requires you to confirm your login with your usual device.",
    "please review the access permissions for the {noun} folder at your earliest convenience.",
]
_LLM_PHISH_CUES = [
    "our records indicate that your account verification is still pending.",
    "to ensure uninterrupted access, kindly confirm your credentials through the secure portal at {smooth_url}.",
    "failure to complete this review may result in a temporary suspension of your account.",
    "we noticed an unusual sign-in attempt and ask that you verify your identity within {num} hours.",
    "please update your payment information to avoid any disruption to your {brand} services.",
    "for your protection, access to your mailbox will be restricted until the verification is complete.",
]
_LLM_PHISH_MILD = [
    "kindly review your account details using the secure link at {smooth_url}.",
    "please confirm your login information at your earliest convenience via {smooth_url}.",
    "a brief verification of your account is required to keep your {brand} access active.",
]
_LLM_CLOSE = ["best regards, {name}", "kind regards, {name}", "warm regards, the {noun} team",
              "sincerely, {brand} account services"]
_HUMAN_CLOSE = ["thanks, {name}", "cheers, {name}", "-- {name}", "thx"]


def _obfuscated(word: str, rng) -> str:
    if len(word) < 4:
        return word
    out = word
    while out == word:
        out = _typo(_typo(word, rng), rng)
    return out


def _human_phish_obfuscated(s: _Slots) -> tuple[str, str]:
    # office mail with one misspelled cue line and nothing else to tell it apart
    words = {w: _obfuscated(w, s.rng) for w in _CUE_WORDS}
    return _human_legit(s, extra=s.fill(s.pick(_HUMAN_PHISH_OBFUSCATED), **words))


def _human_legit(s: _Slots, hard: bool = False, extra: str | None = None) -> tuple[str, str]:
    n = int(s.rng.integers(2, 5))
    body = [s.fill(s.pick(("hi {name},", "hey {name},", "hello team,", "{name},")))]
    body += [s.fill(s.pick(_HUMAN_LEGIT)) for _ in range(n)]
    if hard:
        extra = s.fill(s.pick(_HUMAN_LEGIT_HARD))
    if extra is not None:
        body.insert(1 + int(s.rng.integers(n)), extra)
    body.append(s.fill(s.pick(_HUMAN_CLOSE)))
    subject = s.fill(s.pick(("re: {noun}", "{noun} update", "quick question", "{day} plans", "fwd: {noun} notes")))
    return subject, " ".join(body)


def _human_phish(s: _Slots, typo_rate: float) -> tuple[str, str]:
    def cue_words():
        return {w: (_typo(w, s.rng) if s.rng.random() < typo_rate else w) for w in _CUE_WORDS}

    n_cues = int(s.rng.integers(1, 4))
    body = [s.fill(s.pick(_HUMAN_PHISH_OPEN))]
    for _ in range(n_cues):
        body.append(s.fill(s.pick(_HUMAN_PHISH_CUES), **cue_words()))
    for _ in range(int(s.rng.integers(0, 2))):
        body.insert(1 + int(s.rng.integers(len(body) - 1)), s.fill(s.pick(_HUMAN_LEGIT)))
    body.append(s.pick(("customer support", "security team", "admin", "the {brand} team")).replace("{brand}", s.pick(_BRANDS)))
    words = cue_words()
    subject = s.fill(s.pick(("URGENT: {account} {suspended}", "action required!!!", "{verify} your {account}",
                             "{brand} alert", "you won!!!")), **words)
    return subject, " ".join(body)


def _llm_legit(s: _Slots, hard: bool) -> tuple[str, str]:
    body = [s.fill(s.pick(_LLM_OPEN)), s.pick(_LLM_COURTESY)]
    n = int(s.rng.integers(2, 5))
    body += [s.fill(s.pick(_LLM_LEGIT)) for _ in range(n)]
    if hard:
        body.insert(2 + int(s.rng.integers(n)), s.fill(s.pick(_LLM_LEGIT_HARD)))
    body.append("please let me know if you have any questions.")
    body.append(s.fill(s.pick(_LLM_CLOSE)))
    subject = s.fill(s.pick(("follow-up: {noun} timeline", "{noun} summary for review", "meeting request: {noun}",
                             "updated {noun} documents")))
    return subject, " ".join(body)


def _llm_phish(s: _Slots, subtle: bool) -> tuple[str, str]:
    body = [s.fill(s.pick(_LLM_OPEN)), s.pick(_LLM_COURTESY)]
    n_fill = int(s.rng.integers(1, 4))
    body += [s.fill(s.pick(_LLM_LEGIT)) for _ in range(n_fill)]
    if subtle:
        cues = [s.fill(s.pick(_LLM_PHISH_MILD))]
    else:
        k = int(s.rng.integers(1, 3))
        cues = [s.fill(c) for c in s.rng.choice(_LLM_PHISH_CUES, size=k, replace=False)]
    for c in cues:
        body.insert(2 + int(s.rng.integers(len(body) - 1)), c)
    body.append("we appreciate your prompt attention to this matter.")
    body.append(s.fill(s.pick(_LLM_CLOSE)))
    subject = s.fill(s.pick(("action needed: account review", "important notice regarding your {brand} account",
                             "follow-up: {noun} timeline", "verification request")))
    return subject, " ".join(body)


def generate_synthetic_corpus(config: GeneratorConfig | None = None, **overrides) -> list[EmailRecord]:
    """Four balanced cells (label × source), deterministic under ``seed``.

    The human register pairs plain office mail with overt template phishing
    (urgency, odd URLs, typos). The LLM register pairs polished business
    mail with polished phishing that reuses the legitimate courtesy and
    filler sentences, so LLM phishing sits lexically closer to legitimate
    mail than human phishing does.
    """
    cfg = config or GeneratorConfig()
    if overrides:
        cfg = GeneratorConfig(**{**asdict(cfg), **overrides})
    if cfg.n_per_cell < 1:
        raise ParameterError(f"n_per_cell must be >= 1, got {cfg.n_per_cell}")
    unknown = set(cfg.registers) - set(SOURCES)
    if unknown:
        raise ParameterError(f"unknown registers {sorted(unknown)}")
    rng = make_rng(cfg.seed, "corpus")
    nouns = _pseudo_words(make_rng(cfg.seed, "lexicon"), cfg.vocab_size)
    s = _Slots(rng, nouns)
    records = []
    for source in SOURCES:
        if source not in cfg.registers:
            continue
        for label in LABELS:
            for k in range(cfg.n_per_cell):
                meta = {}
                if source == "human" and label == "legitimate":
                    meta["hard"] = bool(rng.random() < cfg.hard_ham_rate)
                    subject, body = _human_legit(s, meta["hard"])
                elif source == "human":
                    meta["obfuscated"] = bool(rng.random() < cfg.obfuscate_rate)
                    if meta["obfuscated"]:
                        subject, body = _human_phish_obfuscated(s)
                    else:
                        subject, body = _human_phish(s, cfg.typo_rate)
                elif label == "legitimate":
                    meta["hard"] = bool(rng.random() < cfg.hard_ham_rate)
                    subject, body = _llm_legit(s, meta["hard"])
                else:
                    meta["subtle"] = bool(rng.random() < cfg.subtle_rate)
                    subject, body = _llm_phish(s, meta["subtle"])
                rid = f"{source[0]}{label[0]}-{k:05d}"
                records.append(EmailRecord(rid, subject, body, label, source, meta))
    order = rng.permutation(len(records))
    return [records[i] for i in order]


# ---------------------------------------------------------------------------
# TF-IDF and cosine similarity
# ---------------------------------------------------------------------------

@dataclass
class TfIdfVector:
    """Sparse ``term -> weight`` map tied to one vocabulary snapshot."""

    weights: dict[str, float]
    snapshot: str
    norm: float = 0.0
    empty: bool = False

    def __post_init__(self):
        self.norm = math.sqrt(sum(w * w for w in self.weights.values()))
        self.empty = not self.weights

    def scaled(self, factor: float) -> "TfIdfVector":
        return TfIdfVector({t: w * factor for t, w in self.weights.items()}, self.snapshot)


def _tfidf_tokens(doc: str) -> list[str]:
    return split_words(normalize_email(doc))


class TfIdfModel:
    """Raw-count tf times smoothed idf ``ln((1+N)/(1+df)) + 1``, no row normalization."""

    def __init__(self):
        self._vec = TfidfVectorizer(tokenizer=_tfidf_tokens, lowercase=False, token_pattern=None,
                                    norm=None, smooth_idf=True, sublinear_tf=False)
        self.snapshot = ""

    def fit(self, corpus: Sequence[str]) -> "TfIdfModel":
        if not corpus:
            raise ParameterError("cannot fit TF-IDF on an empty corpus")
        self._vec.fit(list(corpus))
        terms = self._vec.get_feature_names_out()
        digest = hashlib.sha1("\n".join(terms).encode("utf-8")).hexdigest()[:12]
        self.snapshot = f"{len(terms)}:{digest}"
        self.terms = terms
        return self

    def idf(self, term: str) -> float:
        j = self._vec.vocabulary_.get(term)
        if j is None:
            raise KeyError(term)
        return float(self._vec.idf_[j])

    def transform_matrix(self, docs: Sequence[str]) -> sp.csr_matrix:
        return self._vec.transform(list(docs)).tocsr()

    def transform(self, doc: str) -> TfIdfVector:
        row = self._vec.transform([doc]).tocsr()
        weights = {self.terms[j]: float(v) for j, v in zip(row.indices, row.data) if v > 0}
        vec = TfIdfVector(weights, self.snapshot)
        if vec.empty:
            logger.debug("TF-IDF transform produced an empty vector")
        return vec


def tfidf_fit(corpus: Sequence[str]) -> TfIdfModel:
    return TfIdfModel().fit(corpus)


def tfidf_transform(model: TfIdfModel, doc: str) -> TfIdfVector:
    return model.transform(doc)


def cosine_similarity(a: TfIdfVector, b: TfIdfVector) -> float:
    """``dot(a, b) / (|a| |b|)``; 0 when either vector is empty."""
    if a.snapshot != b.snapshot:
        raise ContractError(f"vectors come from different vocabularies ({a.snapshot} vs {b.snapshot})")
    if a.norm == 0.0 or b.norm == 0.0:
        return 0.0
    small, large = (a.weights, b.weights) if len(a.weights) <= len(b.weights) else (b.weights, a.weights)
    dot = sum(w * large.get(t, 0.0) for t, w in small.items())
    return max(-1.0, min(1.0, dot / (a.norm * b.norm)))


def _unit_rows(X: sp.csr_matrix) -> sp.csr_matrix:
    norms = np.sqrt(np.asarray(X.multiply(X).sum(axis=1)).ravel())
    norms[norms == 0] = 1.0
    return sp.diags(1.0 / norms) @ X


def _texts(records) -> list[str]:
    return [r.text if isinstance(r, EmailRecord) else str(r) for r in records]


@dataclass
class SimilaritySummary:
    """Per-class statistics of each legitimate email's mean cosine to a phishing set."""

    stats: dict[str, dict[str, float]]
    scores: dict[str, np.ndarray]
    legit_ids: list[str]

    def export_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["legit_id", "vs_class", "mean_cosine"])
            for cls, vals in self.scores.items():
                for rid, v in zip(self.legit_ids, vals):
                    w.writerow([rid, cls, f"{v:.10f}"])


def _summary(values: np.ndarray) -> dict[str, float]:
    q1, med, q3 = np.quantile(values, [0.25, 0.5, 0.75])
    return {"mean": float(values.mean()), "median": float(med), "q1": float(q1), "q3": float(q3),
            "min": float(values.min()), "max": float(values.max())}


def similarity_analysis(legit, phish_human, phish_llm, model: TfIdfModel | None = None) -> SimilaritySummary:
    """For every legitimate email, the mean TF-IDF cosine against each phishing set.

    The TF-IDF vocabulary covers all three sets unless a fitted ``model`` is given.
    """
    if not legit or not phish_human or not phish_llm:
        raise ParameterError("similarity_analysis needs three nonempty sets")
    L, Ph, Pl = _texts(legit), _texts(phish_human), _texts(phish_llm)
    model = model or tfidf_fit(L + Ph + Pl)
    Xl = _unit_rows(model.transform_matrix(L))
    scores = {}
    for cls, docs in (("human", Ph), ("llm", Pl)):
        Xp = _unit_rows(model.transform_matrix(docs))
        scores[cls] = np.asarray((Xl @ Xp.T).mean(axis=1)).ravel()
    ids = [r.id if isinstance(r, EmailRecord) else str(i) for i, r in enumerate(legit)]
    return SimilaritySummary({k: _summary(v) for k, v in scores.items()}, scores, ids)


@dataclass
class DedupResult:
    kept: list
    removed_pairs: list[tuple[str, str, float]]


def dedup(corpus: Sequence, threshold: float = 0.90, model: TfIdfModel | None = None) -> DedupResult:
    """Greedy scan in input order; drop a record whose cosine to any kept record is ≥ ``threshold``.

    ``removed_pairs`` holds ``(removed_id, kept_id, score)`` for the most
    similar kept record.
    """
    if not 0.0 < threshold <= 1.0:
        raise ParameterError(f"threshold must be in (0, 1], got {threshold}")
    if not corpus:
        return DedupResult([], [])
    texts = _texts(corpus)
    model = model or tfidf_fit(texts)
    X = _unit_rows(model.transform_matrix(texts))
    ids = [r.id if isinstance(r, EmailRecord) else str(i) for i, r in enumerate(corpus)]
    kept_idx: list[int] = []
    removed = []
    block = 512
    for start in range(0, len(texts), block):
        chunk = (X[start:start + block] @ X.T).toarray()
        for off in range(chunk.shape[0]):
            i = start + off
            if kept_idx:
                sims = chunk[off, kept_idx]
                j = int(np.argmax(sims))
                # Tolerance absorbs rounding for exact duplicates at threshold 1.0.
                if sims[j] >= threshold - 1e-12:
                    removed.append((ids[i], ids[kept_idx[j]], float(min(sims[j], 1.0))))
                    continue
            kept_idx.append(i)
    return DedupResult([corpus[i] for i in kept_idx], removed)


# ---------------------------------------------------------------------------
# Phishing-level scoring
# ---------------------------------------------------------------------------

@dataclass
class Question:
    text: str
    kind: str  # "binary" or "scaled" (0..10)


QUESTIONS = (
    Question("Does this email convey a sense of urgency or panic?", "binary"),
    Question("How much flattery is present in this email?", "scaled"),
    Question("How suspicious is the embedded link?", "scaled"),
    Question("How closely does this email resemble a marketing message?", "scaled"),
    Question("Does the email address the recipient by name or include overly specific details?", "binary"),
    Question("To what extent does the message imply consequences for inaction (authority)?", "scaled"),
    Question("Does the email request account updates or signature actions via a link?", "binary"),
    Question("How strongly does the email pressure the recipient to click a link urgently?", "scaled"),
)


@dataclass
class ScoreSheet:
    """Answers per question (binary 0/1 or scaled 0–10) with weights summing to 1."""

    kinds: list[str]
    answers: list[float | None]
    weights: list[float] | None = None

    def __post_init__(self):
        if len(self.kinds) != len(self.answers):
            raise ParameterError("kinds and answers differ in length")
        for k in self.kinds:
            if k not in ("binary", "scaled"):
                raise ParameterError(f"unknown question kind {k!r}")
        if self.weights is None:
            self.weights = [1.0 / len(self.kinds)] * len(self.kinds) if self.kinds else []
        elif len(self.weights) != len(self.kinds):
            raise ParameterError("weights and answers differ in length")

    @property
    def composite(self) -> float:
        return composite_phishing_score(self)


def _normalized_answer(kind: str, value: float) -> float:
    if kind == "binary":
        if value not in (0, 1):
            raise ParameterError(f"binary answer must be 0 or 1, got {value}")
        return float(value)
    if not 0 <= value <= 10:
        raise ParameterError(f"scaled answer must lie in [0, 10], got {value}")
    return value / 10.0


def composite_phishing_score(sheet: ScoreSheet) -> float:
    """Weighted mean of normalized answers (binary → {0,1}, scaled → value/10).

    Unanswered questions (``None``) are skipped and the remaining weights
    renormalized.
    """
    if abs(sum(sheet.weights) - 1.0) > 1e-9:
        raise ParameterError(f"weights must sum to 1, got {sum(sheet.weights)!r}")
    total = wsum = 0.0
    for kind, ans, w in zip(sheet.kinds, sheet.answers, sheet.weights):
        if ans is None:
            continue
        total += w * _normalized_answer(kind, ans)
        wsum += w
    if wsum == 0.0:
        raise ParameterError("score sheet has no answered question")
    return min(1.0, max(0.0, total / wsum))


class AnswerProvider(Protocol):
    def answer(self, email: str, question: Question) -> float | None: ...


_URGENT = re.compile(r"\b(urgent|immediately|now|within \d+ hours|final warning|act now|prompt)\b")
_LINK = re.compile(r"https?://\S+")
_BADHOST = re.compile(r"https?://[^/\s]*(\.(xyz|top|ru|info|click|biz)\b|0nline|-secure|-login|-verify)")
_FLATTER = re.compile(r"\b(valued|dear customer|member|appreciate|congratulations|won)\b")
_MARKETING = re.compile(r"\b(offer|gift card|claim|won|free|deal|\$\d+)\b")
_CONSEQ = re.compile(r"\b(suspen\w*|closed|restrict\w*|lose|disruption|failure)\b")
_ACTION = re.compile(r"\b(verif\w*|confirm\w*|update\w*|credentials|login|password)\b")


class RuleBasedProvider:
    """Keyword heuristics standing in for an LLM judge; one rule per question."""

    def answer(self, email: str, question: Question) -> float | None:
        t = normalize_email(email)
        links = _LINK.findall(t)
        i = QUESTIONS.index(question) if question in QUESTIONS else -1
        if i == 0:
            return float(bool(_URGENT.search(t)))
        if i == 1:
            return min(10.0, 3.0 * len(_FLATTER.findall(t)))
        if i == 2:
            return 0.0 if not links else (9.0 if _BADHOST.search(t) else 4.0)
        if i == 3:
            return min(10.0, 3.0 * len(_MARKETING.findall(t)))
        if i == 4:
            return float(not re.match(r"^(dear (customer|user)|attention|hello,)", t))
        if i == 5:
            return min(10.0, 3.5 * len(_CONSEQ.findall(t)))
        if i == 6:
            return float(bool(links) and bool(_ACTION.search(t)))
        if i == 7:
            return min(10.0, (5.0 if links else 0.0) + 2.5 * len(_URGENT.findall(t)))
        return None


def score_email(email: str, provider: AnswerProvider | None = None,
                questions: Sequence[Question] = QUESTIONS, weights=None) -> ScoreSheet:
    """Ask every question of ``provider`` and collect a :class:`ScoreSheet`."""
    provider = provider or RuleBasedProvider()
    answers = [provider.answer(email, q) for q in questions]
    # "addresses by name" lowers suspicion, so it enters the composite inverted.
    kinds = [q.kind for q in questions]
    answers = [(1.0 - a) if (q is QUESTIONS[4] and a is not None) else a for q, a in zip(questions, answers)]
    return ScoreSheet(kinds, answers, weights)
