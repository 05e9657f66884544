"""Greedy and LM-weighted prefix beam search, plus error-rate scoring.

Posteriorgrams are ``[T, C]`` natural-log probabilities with the blank at
label 0.  The beam objective for a label string ``k`` is

    log P_ctc(k) + alpha * ln P_lm(k </s> | <s>) + beta * log max(|k|, 1)

where ``|k|`` counts every emitted token, spaces included.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .charlm import BOS, EOS, NGramModel
from .ctc import BLANK, Vocabulary, collapse_ids, ctc_loss

NEG_INF = -math.inf
LN10 = math.log(10.0)

Prefix = tuple[int, ...]


def _lse(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = max(a, b)
    return m + math.log1p(math.exp(-abs(a - b)))


@dataclass(frozen=True)
class DecodeParams:
    alpha: float = 0.6
    beta: float = 1.5
    beam_width: int = 200

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")


@dataclass
class Hypothesis:
    prefix: Prefix
    logp_blank: float = NEG_INF
    logp_nonblank: float = NEG_INF
    lm: float = 0.0  # alpha-weighted LM log-probability (nats) of the prefix

    @property
    def total(self) -> float:
        return _lse(self.logp_blank, self.logp_nonblank)


def greedy_ids(post: np.ndarray) -> list[int]:
    """Per-frame argmax (lowest id on ties), collapsed."""
    post = np.asarray(post)
    if post.size == 0:
        return []
    return collapse_ids(np.argmax(post, axis=1).tolist())


def greedy_decode(post: np.ndarray, vocab: Vocabulary) -> str:
    return vocab.decode(greedy_ids(post))


class _LmScorer:
    """Caches alpha-weighted LM terms keyed by prefix."""

    def __init__(self, lm: NGramModel | None, vocab: Vocabulary, alpha: float):
        self.lm, self.vocab, self.alpha = lm, vocab, alpha
        self.cache: dict[Prefix, float] = {(): 0.0}

    def _ctx(self, prefix: Prefix) -> list[str]:
        n = self.lm.order - 1
        if n == 0:
            return []
        ctx = [self.vocab.token(i) for i in prefix[-n:]]
        return [BOS, *ctx] if len(prefix) < n else ctx

    def prefix(self, prefix: Prefix) -> float:
        got = self.cache.get(prefix)
        if got is None:
            got = self.prefix(prefix[:-1]) + self.step(prefix[:-1], self.vocab.token(prefix[-1]))
            self.cache[prefix] = got
        return got

    def step(self, prefix: Prefix, symbol: str) -> float:
        if self.lm is None or self.alpha == 0:
            return 0.0
        return self.alpha * LN10 * self.lm.score(self._ctx(prefix), symbol)

    def end(self, prefix: Prefix) -> float:
        return self.step(prefix, EOS)


def _rank_key(h: Hypothesis, beta: float):
    score = h.total + h.lm + beta * math.log(max(len(h.prefix), 1))
    return (-score, h.prefix)


@dataclass
class BeamResult:
    best: Prefix
    score: float
    beams: list[Hypothesis]  # survivors after the last frame, best first
    history: list[list[Hypothesis]] | None = None


def beam_search(
    post: np.ndarray,
    vocab: Vocabulary,
    lm: NGramModel | None = None,
    params: DecodeParams = DecodeParams(),
    keep_history: bool = False,
) -> BeamResult:
    """Prefix beam search.  Ties in pruning go to the lexicographically
    smaller label sequence."""
    post = np.asarray(post, dtype=np.float64)
    T = post.shape[0] if post.ndim == 2 else 0
    lmt = _LmScorer(lm, vocab, params.alpha)
    beams = [Hypothesis((), 0.0, NEG_INF)]
    history: list[list[Hypothesis]] | None = [] if keep_history else None
    C = post.shape[1] if T else 0
    for t in range(T):
        row = post[t].tolist()
        nxt: dict[Prefix, Hypothesis] = {}

        def slot(prefix: Prefix) -> Hypothesis:
            h = nxt.get(prefix)
            if h is None:
                h = nxt[prefix] = Hypothesis(prefix, lm=lmt.prefix(prefix))
            return h

        for h in beams:
            total = h.total
            same = slot(h.prefix)
            same.logp_blank = _lse(same.logp_blank, total + row[BLANK])
            last = h.prefix[-1] if h.prefix else None
            if last is not None:
                # repeated label without an intervening blank stays on this prefix
                same.logp_nonblank = _lse(same.logp_nonblank, h.logp_nonblank + row[last])
            for c in range(1, C):
                src = h.logp_blank if c == last else total
                if src == NEG_INF or row[c] == NEG_INF:
                    continue
                ext = slot(h.prefix + (c,))
                ext.logp_nonblank = _lse(ext.logp_nonblank, src + row[c])
        beams = sorted(nxt.values(), key=lambda h: _rank_key(h, params.beta))[: params.beam_width]
        if history is not None:
            history.append(beams)
    beams = [replace(h, lm=h.lm + lmt.end(h.prefix)) for h in beams]
    beams.sort(key=lambda h: _rank_key(h, params.beta))
    best = beams[0]
    return BeamResult(best.prefix, -_rank_key(best, params.beta)[0], beams, history)


def beam_decode(
    post: np.ndarray,
    vocab: Vocabulary,
    lm: NGramModel | None = None,
    params: DecodeParams = DecodeParams(),
) -> str:
    if np.asarray(post).size == 0:
        return ""
    return vocab.decode(beam_search(post, vocab, lm, params).best)


def objective(
    prefix: Sequence[int],
    post: np.ndarray,
    vocab: Vocabulary,
    lm: NGramModel | None = None,
    params: DecodeParams = DecodeParams(),
) -> float:
    """The full decoding objective of one label string, computed directly."""
    prefix = tuple(prefix)
    res = ctc_loss(np.asarray(post, dtype=np.float64), list(prefix))
    acoustic = -res.loss if res.feasible else NEG_INF
    lmt = _LmScorer(lm, vocab, params.alpha)
    return acoustic + lmt.prefix(prefix) + lmt.end(prefix) + params.beta * math.log(max(len(prefix), 1))


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


@dataclass
class EditCounts:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        if self.ref_len == 0:
            raise ValueError("error rate undefined for an empty reference")
        return self.errors / self.ref_len

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_len + other.ref_len,
        )


def edit_distance(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Unit-cost Levenshtein alignment with its S/I/D breakdown.

    Among minimal alignments the backtrace prefers match/substitution, then
    deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = ins = dele = 0
    i, j = n, m
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(s), ins, dele, n)


def wer(ref: Sequence[str], hyp: Sequence[str]) -> float:
    return edit_distance(ref, hyp).rate


DEFAULT_STRIP = ("[laughter]", "[vocalized-noise]", "[noise]", "&", "-", "/", "_")


@dataclass(frozen=True)
class StripList:
    """Noise tokens (multi-character entries) are replaced by a space;
    punctuation (single characters) is deleted."""

    entries: tuple[str, ...] = DEFAULT_STRIP

    @classmethod
    def load(cls, path: str | Path) -> "StripList":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(ln.strip("\r") for ln in lines if ln.strip() and not ln.startswith("#")))

    def dumps(self) -> str:
        return "".join(e + "\n" for e in self.entries)


def postprocess(hyp: str, strip: StripList = StripList()) -> list[str]:
    text = hyp
    for tok in sorted((e for e in strip.entries if len(e) > 1), key=len, reverse=True):
        text = text.replace(tok, " ")
    punct = {e for e in strip.entries if len(e) == 1}
    if punct:
        text = "".join(ch for ch in text if ch not in punct)
    return text.split()


def char_sequence(words: Sequence[str]) -> list[str]:
    """Characters of the words joined by single spaces (space counts)."""
    return list(" ".join(words))


@dataclass
class ScoreReport:
    words: EditCounts
    chars: EditCounts
    utterances: int

    def format(self, name: str = "all") -> str:
        w, c = self.words, self.chars
        return (
            f"{name}\tutts={self.utterances}\t"
            f"WER={100 * w.rate:.2f}%\tS={w.substitutions}\tI={w.insertions}\tD={w.deletions}\tN={w.ref_len}\t"
            f"CER={100 * c.rate:.2f}%\tS={c.substitutions}\tI={c.insertions}\tD={c.deletions}\tN={c.ref_len}"
        )


def score_pairs(pairs: Iterable[tuple[str, str]], strip: StripList = StripList()) -> ScoreReport:
    """Aggregate WER/CER over (reference, hypothesis) transcripts."""
    words, chars, n = EditCounts(), EditCounts(), 0
    for ref, hyp in pairs:
        r, h = postprocess(ref, strip), postprocess(hyp, strip)
        words += edit_distance(r, h)
        chars += edit_distance(char_sequence(r), char_sequence(h))
        n += 1
    if words.ref_len == 0:
        raise ValueError("references are empty after post-processing; WER undefined")
    return ScoreReport(words, chars, n)
