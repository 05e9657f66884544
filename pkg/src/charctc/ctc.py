"""CTC labels, the collapsing map, and the CTC loss.

Label 0 is the blank.  Real tokens occupy ids 1..N in vocabulary-file
order.  Losses are in nats.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_node

BLANK = 0

#: 45 output tokens: letters, digits, space, punctuation and noise markers.
#: Each noise marker is a single token.
DEFAULT_TOKENS: tuple[str, ...] = (
    tuple("abcdefghijklmnopqrstuvwxyz")
    + tuple("0123456789")
    + (" ", "&", "'", "-", "[laughter]", "[vocalized-noise]", "[noise]", "/", "_")
)


class Vocabulary:
    """Token inventory with the blank implicit at id 0."""

    def __init__(self, tokens: Iterable[str] = DEFAULT_TOKENS):
        self.tokens: tuple[str, ...] = tuple(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if any(t == "" or "\n" in t for t in self.tokens):
            raise ValueError("vocabulary tokens must be non-empty single-line strings")
        self._ids = {t: i + 1 for i, t in enumerate(self.tokens)}
        self._max_len = max(len(t) for t in self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    @property
    def num_labels(self) -> int:
        """Token count plus the blank."""
        return len(self.tokens) + 1

    def id(self, token: str) -> int:
        return self._ids[token]

    def token(self, label: int) -> str:
        if label == BLANK:
            raise ValueError("blank has no token")
        return self.tokens[label - 1]

    def tokenize(self, text: str) -> list[str]:
        out: list[str] = []
        i = 0
        while i < len(text):
            # longest match first so "[noise]" wins over "["
            for n in range(min(self._max_len, len(text) - i), 0, -1):
                piece = text[i : i + n]
                if piece in self._ids:
                    out.append(piece)
                    i += n
                    break
            else:
                raise KeyError(f"character {text[i]!r} at position {i} not in vocabulary")
        return out

    def encode(self, text: str) -> list[int]:
        return [self._ids[t] for t in self.tokenize(text)]

    def decode(self, labels: Iterable[int]) -> str:
        return "".join(self.tokens[i - 1] for i in labels if i != BLANK)

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        """One token per line; only the final newline is dropped, so a line
        holding a single space is the space token."""
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(line.rstrip("\r") for line in lines)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def dumps(self) -> str:
        return "".join(t + "\n" for t in self.tokens)


def collapse_ids(pi: Sequence[int], blank: int = BLANK) -> list[int]:
    """Merge runs of identical labels, then drop blanks."""
    out: list[int] = []
    prev = None
    for label in pi:
        if label != prev and label != blank:
            out.append(int(label))
        prev = label
    return out


def collapse(pi: Sequence[int], vocab: Vocabulary) -> str:
    return vocab.decode(collapse_ids(pi))


def required_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit ``target``: one per label plus a blank
    between each pair of equal neighbours."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


@dataclass
class CtcLossResult:
    loss: float
    grad: np.ndarray
    feasible: bool = True


def ctc_loss_bruteforce(logprobs: np.ndarray, target: Sequence[int], blank: int = BLANK) -> float:
    """Negative log of the summed probability of every frame labelling that
    collapses to ``target``, by explicit enumeration."""
    lp = np.asarray(logprobs, dtype=np.float64)
    T, C = lp.shape
    if T > 8 or C > 5:
        raise ValueError(f"enumeration oracle limited to T<=8, C<=5 (got T={T}, C={C})")
    target = [int(t) for t in target]
    terms = [
        sum(lp[t, c] for t, c in enumerate(pi))
        for pi in itertools.product(range(C), repeat=T)
        if collapse_ids(pi, blank) == target
    ]
    if not terms:
        return math.inf
    m = max(terms)
    return -(m + math.log(sum(math.exp(x - m) for x in terms)))


def _extended(target: Sequence[int], blank: int) -> tuple[np.ndarray, np.ndarray]:
    S = 2 * len(target) + 1
    ext = np.full(S, blank, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return ext, skip


def ctc_alpha_beta(logprobs: np.ndarray, target: Sequence[int], blank: int = BLANK):
    """Log-space forward and backward variables over the blank-interleaved
    target.  Both include the emission at their own frame.

    Returns ``(log_alpha, log_beta, ext)`` with ``[T, 2L+1]`` tables.
    """
    lp = np.asarray(logprobs, dtype=np.float64)
    T = lp.shape[0]
    ext, skip = _extended(target, blank)
    S = len(ext)
    emit = lp[:, ext]
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
        alpha[t] = a + emit[t]
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        b = nxt.copy()
        b[:-1] = np.logaddexp(b[:-1], nxt[1:])
        b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
        beta[t] = b + emit[t]
    return alpha, beta, ext


def ctc_loss(logprobs: np.ndarray, target: Sequence[int], blank: int = BLANK) -> CtcLossResult:
    """Forward-backward CTC loss and its gradient w.r.t. ``logprobs``.

    ``logprobs`` is ``[T, C]``; rows are treated as free log-scores, so the
    gradient is ``-posterior occupancy`` per (frame, label).  Infeasible
    targets give ``loss=inf`` and an all-zero gradient.
    """
    lp = np.asarray(logprobs, dtype=np.float64)
    T, C = lp.shape
    target = [int(t) for t in target]
    if any(t == blank or not 0 <= t < C for t in target):
        raise ValueError("target labels must be non-blank ids inside the label set")
    if required_frames(target) > T or T == 0:
        if T == 0 and not target:
            return CtcLossResult(0.0, np.zeros_like(lp))
        return CtcLossResult(math.inf, np.zeros_like(lp), feasible=False)
    alpha, beta, ext = ctc_alpha_beta(lp, target, blank)
    S = len(ext)
    logp = alpha[T - 1, S - 1]
    if S > 1:
        logp = np.logaddexp(logp, alpha[T - 1, S - 2])
    if not np.isfinite(logp):
        return CtcLossResult(math.inf, np.zeros_like(lp), feasible=False)
    emit = lp[:, ext]
    with np.errstate(invalid="ignore"):
        occ = np.exp(alpha + beta - emit - logp)  # [T, S]
    occ[~np.isfinite(emit)] = 0.0
    grad = np.zeros_like(lp)
    np.add.at(grad.T, ext, occ.T)
    return CtcLossResult(float(-logp), -grad)


def ctc_loss_batch(logprobs, lengths: Sequence[int], targets: Sequence[Sequence[int]], blank: int = BLANK):
    """Mean CTC loss over the feasible utterances of a padded batch.

    ``logprobs`` is a ``[B, T, C]`` tensor; utterance ``b`` uses only its
    first ``lengths[b]`` frames.  Returns ``(loss_tensor, per_utterance)``
    where infeasible utterances show ``inf`` in ``per_utterance`` and are left
    out of the mean.  If none is feasible the loss tensor is ``nan``.
    """
    lp = as_tensor(logprobs)
    X = lp.data
    B = X.shape[0]
    if len(lengths) != B or len(targets) != B:
        raise ValueError("lengths/targets must match the batch size")
    grads = np.zeros_like(X)
    per = np.empty(B)
    for b in range(B):
        res = ctc_loss(X[b, : lengths[b]], targets[b], blank)
        per[b] = res.loss
        grads[b, : lengths[b]] = res.grad
    ok = np.isfinite(per)
    n = int(ok.sum())
    value = per[ok].mean() if n else np.nan
    scale = 1.0 / n if n else 0.0
    out = make_node(np.asarray(value), (lp,), lambda g: (grads * (g * scale),), "ctc_loss")
    return out, per


def ctc_loss_tensor(logprobs, target: Sequence[int], blank: int = BLANK) -> Tensor:
    """Single-utterance CTC loss as a differentiable scalar tensor."""
    lp = as_tensor(logprobs)
    res = ctc_loss(lp.data, target, blank)
    grad = res.grad
    return make_node(np.asarray(res.loss), (lp,), lambda g: (grad * g,), "ctc_loss")
