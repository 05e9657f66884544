"""Character n-gram language model with Witten-Bell smoothing.

Scores are log10 throughout, as in the ARPA format.  Symbols are vocabulary
tokens plus ``<s>`` (context only) and ``</s>``.  A context is a tuple of
symbols, most recent last.
"""

from __future__ import annotations

import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .ctc import Vocabulary
from .tensorio import atomic_write_text

BOS = "<s>"
EOS = "</s>"
NEVER = -99.0  # ARPA convention for log10(0)
_ARPA_NAMES = {" ": "<space>"}
_ARPA_BACK = {v: k for k, v in _ARPA_NAMES.items()}

Context = tuple[str, ...]


class ArpaError(ValueError):
    pass


@dataclass
class NGramModel:
    order: int
    probs: dict[Context, dict[str, float]] = field(default_factory=dict)
    backoffs: dict[Context, float] = field(default_factory=dict)

    @property
    def symbols(self) -> list[str]:
        """Every symbol with a unigram entry, ``<s>`` included."""
        return list(self.probs.get((), {}))

    def score(self, context: Sequence[str], symbol: str) -> float:
        """log10 p(symbol | context) with standard backoff."""
        uni = self.probs.get((), {})
        if symbol not in uni:
            raise KeyError(f"symbol {symbol!r} not in language model")
        h = tuple(context)[len(context) - self.order + 1 :] if self.order > 1 else ()
        total = 0.0
        while h:
            row = self.probs.get(h)
            if row is not None and symbol in row:
                return total + row[symbol]
            total += self.backoffs.get(h, 0.0)
            h = h[1:]
        return total + uni[symbol]

    def distribution(self, context: Sequence[str]) -> dict[str, float]:
        return {s: self.score(context, s) for s in self.symbols}

    def num_ngrams(self) -> list[int]:
        counts = [0] * self.order
        for h, row in self.probs.items():
            counts[len(h)] += len(row)
        return counts


def sentence_symbols(text: str, vocab: Vocabulary) -> list[str]:
    return [BOS, *vocab.tokenize(text), EOS]


def train_lm(corpus: Iterable[str], order: int, vocab: Vocabulary | None = None) -> NGramModel:
    """Interpolated Witten-Bell estimates stored in backoff form.

    ``p(w|h) = (c(h,w) + T(h) p(w|h')) / (c(h) + T(h))`` where ``T(h)`` is the
    number of distinct successors of ``h`` and ``h'`` drops the oldest symbol.
    The unigram level interpolates with the uniform distribution over the
    vocabulary and ``</s>``.  Seen events are stored explicitly; everything
    else is reached through ``bow(h) = T(h) / (c(h) + T(h))``, which makes the
    backoff form reproduce the interpolated model exactly.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    vocab = vocab or Vocabulary()
    counts: dict[Context, Counter] = defaultdict(Counter)
    n_sent = 0
    for text in corpus:
        seq = sentence_symbols(text, vocab)
        n_sent += 1
        for i in range(1, len(seq)):
            for k in range(0, min(order - 1, i) + 1):
                counts[tuple(seq[i - k : i])][seq[i]] += 1
    if n_sent == 0:
        raise ValueError("cannot train a language model on an empty corpus")

    predicted = [*vocab.tokens, EOS]
    model = NGramModel(order)
    interp: dict[Context, dict[str, float]] = {}

    def lower(h: Context, w: str) -> float:
        # interpolated probability, linear domain
        if not h:
            return interp[()][w]
        row = interp.get(h)
        if row is not None and w in row:
            return row[w]
        return backoff_lin[h] * lower(h[1:], w) if h in backoff_lin else lower(h[1:], w)

    backoff_lin: dict[Context, float] = {}
    for h in sorted(counts, key=len):
        c = counts[h]
        total, types = sum(c.values()), len(c)
        lam = types / (total + types)
        if not h:
            interp[()] = {w: (c[w] + types / len(predicted)) / (total + types) for w in predicted}
        else:
            interp[h] = {w: (n + types * lower(h[1:], w)) / (total + types) for w, n in c.items()}
        backoff_lin[h] = lam
    for h, row in interp.items():
        model.probs[h] = {w: math.log10(p) for w, p in row.items()}
    model.probs[()][BOS] = NEVER
    for h, lam in backoff_lin.items():
        if h and len(h) < order:
            model.backoffs[h] = math.log10(lam)
    return model


def perplexity(model: NGramModel, corpus: Iterable[str], vocab: Vocabulary | None = None) -> float:
    """Per-symbol perplexity counting ``</s>`` but not ``<s>``."""
    vocab = vocab or Vocabulary()
    total, n = 0.0, 0
    for text in corpus:
        seq = sentence_symbols(text, vocab)
        for i in range(1, len(seq)):
            total += model.score(seq[:i], seq[i])
            n += 1
    if n == 0:
        raise ValueError("empty corpus")
    return 10.0 ** (-total / n)


# ---------------------------------------------------------------------------
# ARPA interchange
# ---------------------------------------------------------------------------


def _arpa_name(s: str) -> str:
    return _ARPA_NAMES.get(s, s)


def format_arpa(model: NGramModel) -> str:
    lines = ["", "\\data\\"]
    lines += [f"ngram {k + 1}={n}" for k, n in enumerate(model.num_ngrams())]
    for k in range(model.order):
        lines += ["", f"\\{k + 1}-grams:"]
        for h in sorted(c for c in model.probs if len(c) == k):
            for w, lp in sorted(model.probs[h].items()):
                gram = (*h, w)
                words = " ".join(_arpa_name(s) for s in gram)
                line = f"{lp:.6f}\t{words}"
                if gram in model.backoffs:
                    line += f"\t{model.backoffs[gram]:.6f}"
                lines.append(line)
    lines += ["", "\\end\\", ""]
    return "\n".join(lines)


def write_arpa(model: NGramModel, path: str | Path) -> None:
    atomic_write_text(path, format_arpa(model))


_COUNT_RE = re.compile(r"ngram\s+(\d+)\s*=\s*(\d+)$")
_SECTION_RE = re.compile(r"\\(\d+)-grams:$")


def parse_arpa(text: str) -> NGramModel:
    lines = [ln.strip() for ln in text.splitlines()]
    i = 0
    while i < len(lines) and lines[i] != "\\data\\":
        i += 1
    if i == len(lines):
        raise ArpaError("missing \\data\\ header")
    i += 1
    declared: dict[int, int] = {}
    while i < len(lines) and not lines[i].startswith("\\"):
        if lines[i]:
            m = _COUNT_RE.match(lines[i])
            if not m:
                raise ArpaError(f"\\data\\: malformed count line {lines[i]!r}")
            declared[int(m.group(1))] = int(m.group(2))
        i += 1
    if not declared or sorted(declared) != list(range(1, max(declared) + 1)):
        raise ArpaError("\\data\\: n-gram counts must cover orders 1..N")
    model = NGramModel(max(declared))
    seen: dict[int, int] = {}
    while i < len(lines):
        head = lines[i]
        i += 1
        if not head:
            continue
        if head == "\\end\\":
            break
        m = _SECTION_RE.match(head)
        if not m:
            raise ArpaError(f"malformed section header {head!r}")
        k = int(m.group(1))
        name = f"\\{k}-grams:"
        if k not in declared or k in seen:
            raise ArpaError(f"{name}: unexpected or repeated section")
        n = 0
        while i < len(lines) and not lines[i].startswith("\\"):
            if lines[i]:
                parts = lines[i].split()
                if len(parts) not in (k + 1, k + 2):
                    raise ArpaError(f"{name}: malformed entry {lines[i]!r}")
                try:
                    lp = float(parts[0])
                    bow = float(parts[k + 1]) if len(parts) == k + 2 else None
                except ValueError as exc:
                    raise ArpaError(f"{name}: bad number in {lines[i]!r}") from exc
                gram = tuple(_ARPA_BACK.get(s, s) for s in parts[1 : k + 1])
                model.probs.setdefault(gram[:-1], {})[gram[-1]] = lp
                if bow is not None:
                    model.backoffs[gram] = bow
                n += 1
            i += 1
        if n != declared[k]:
            raise ArpaError(f"{name}: header declares {declared[k]} entries, found {n}")
        seen[k] = n
    else:
        raise ArpaError("missing \\end\\ marker")
    missing = sorted(set(declared) - set(seen))
    if missing:
        raise ArpaError(f"\\{missing[0]}-grams: section missing")
    return model


def read_arpa(path: str | Path) -> NGramModel:
    return parse_arpa(Path(path).read_text(encoding="utf-8"))


def check_vocabulary(model: NGramModel, vocab: Vocabulary) -> None:
    """Raise if the model cannot score every decoder token and ``</s>``."""
    have = set(model.symbols)
    missing = [t for t in (*vocab.tokens, EOS) if t not in have]
    if missing:
        raise ValueError(f"language model lacks vocabulary symbols {missing[:5]}")
