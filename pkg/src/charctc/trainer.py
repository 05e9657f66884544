"""Mini-batch CTC training with Adam, step decay on stagnation, and early
stopping."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tc
from .ctc import ctc_loss_batch, required_frames
from .encoders import Encoder, load_checkpoint, save_checkpoint
from .tensor import Tensor
from .tensorio import atomic_write_text

log = logging.getLogger(__name__)

DEFAULT_BATCH = {"lstm": 64, "cnn": 32}
DEFAULT_LR = {"lstm": 1e-3, "cnn": 2e-4}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int | None = None  # None: per-encoder default
    learning_rate: float | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    decay_factor: float = 0.95
    patience_epochs: int = 2
    stop_patience: int | None = None  # None: same window as the decay rule
    max_epochs: int = 40
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "learning_rate", "stop_patience"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.adam_epsilon <= 0 or self.patience_epochs <= 0 or self.max_epochs <= 0:
            raise ValueError("adam_epsilon, patience_epochs and max_epochs must be positive")

    def resolved(self, kind: str) -> "TrainConfig":
        return replace(
            self,
            batch_size=self.batch_size or DEFAULT_BATCH[kind],
            learning_rate=self.learning_rate or DEFAULT_LR[kind],
            stop_patience=self.stop_patience or self.patience_epochs,
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    learning_rate: float
    wall_seconds: float
    cpu_seconds: float
    skipped: int = 0

    def __post_init__(self):
        if self.wall_seconds < 0 or self.cpu_seconds < 0:
            raise ValueError("times must be non-negative")


@dataclass
class Utterance:
    utt_id: str
    frames: np.ndarray  # [T, 80]
    labels: list[int]


# ---------------------------------------------------------------------------
# optimiser and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], t: int) -> "AdamState":
        st = cls(t=t)
        for k, a in arrays.items():
            kind, name = k.split(".", 1)
            (st.m if kind == "m" else st.v)[name] = np.array(a, dtype=np.float64)
        return st


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in tensor {name!r}")
        if g.shape != params[name].data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].data.shape}")
    state.t += 1
    c1, c2 = 1 - beta1**state.t, 1 - beta2**state.t
    for name, g in grads.items():
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def epochs_since_best(history: Sequence[float]) -> int:
    """Completed epochs after the one holding the best (lowest) loss."""
    if not history:
        return 0
    best = int(np.argmin(history))  # first occurrence: later ties are not improvements
    return len(history) - 1 - best


def lr_schedule(history: Sequence[float], lr: float, decay: float = 0.95, window: int = 2) -> float:
    """Decay once for every full ``window`` epochs without a new best."""
    since = epochs_since_best(history)
    return lr * decay if since > 0 and since % window == 0 else lr


def should_stop(history: Sequence[float], patience: int) -> bool:
    return epochs_since_best(history) >= patience


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------


def make_batches(lengths: Sequence[int], batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Length-bucketed batches in a seeded random order."""
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    perm = np.random.default_rng([seed, epoch]).permutation(len(batches))
    return [batches[i] for i in perm]


def feasible(encoder: Encoder, utt: Utterance) -> bool:
    return required_frames(utt.labels) <= encoder.output_length(utt.frames.shape[0])


def batch_loss(encoder: Encoder, utts: Sequence[Utterance], mode: str, step: int = 0):
    """Mean CTC loss over feasible utterances and the per-utterance losses."""
    out = encoder.forward([u.frames for u in utts], mode=mode, step=step)
    return ctc_loss_batch(out.log_probs, out.lengths, [u.labels for u in utts])


def evaluate(encoder: Encoder, data: Sequence[Utterance], batch_size: int = 32) -> float:
    """Mean per-utterance CTC loss in inference mode, feasible ones only."""
    total, n = 0.0, 0
    order = sorted(range(len(data)), key=lambda i: (data[i].frames.shape[0], i))
    for i in range(0, len(order), batch_size):
        chunk = [data[j] for j in order[i : i + batch_size]]
        _, per = batch_loss(encoder, chunk, "infer")
        ok = np.isfinite(per)
        total += float(per[ok].sum())
        n += int(ok.sum())
    return total / n if n else math.nan


def train_epoch(
    encoder: Encoder,
    data: Sequence[Utterance],
    config: TrainConfig,
    opt: AdamState,
    lr: float,
    epoch: int,
) -> tuple[float, int]:
    """One pass over ``data``; returns (mean train loss, skipped utterances)."""
    cfg = config.resolved(encoder.kind)
    if not data:
        raise ValueError("empty training set")
    keep = [u for u in data if feasible(encoder, u)]
    skipped = len(data) - len(keep)
    if not keep:
        raise ValueError("every training utterance has a target longer than its output")
    batches = make_batches([u.frames.shape[0] for u in keep], cfg.batch_size, cfg.seed, epoch)
    total = 0.0
    params = encoder.params
    for b, idx in enumerate(batches):
        step = epoch * len(batches) + b
        loss, per = batch_loss(encoder, [keep[i] for i in idx], "train", step)
        total += float(per.sum())
        grads = tc.backward(loss, list(params.values()))
        adam_step(
            params,
            dict(zip(params, grads)),
            opt,
            lr,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_epsilon,
        )
        tc.zero_grad(list(params.values()))
    return total / len(keep), skipped


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

LOG_FIELDS = [f.name for f in fields(EpochRecord)]


def format_log(records: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in records:
        w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
    return buf.getvalue()


def read_log(path: str | Path) -> list[EpochRecord]:
    rows = list(csv.reader(Path(path).read_text(encoding="utf-8").splitlines(), delimiter="\t"))
    if not rows or rows[0] != LOG_FIELDS:
        raise ValueError(f"{path}: not a training log")
    types = [int, float, float, float, float, float, int]
    return [EpochRecord(*(t(v) for t, v in zip(types, row))) for row in rows[1:]]


@dataclass
class FitResult:
    records: list[EpochRecord]
    stopped_early: bool
    best_epoch: int | None


def _save(out: Path, name: str, encoder, vocab_text, opt, state):
    save_checkpoint(out / name, encoder, vocab_text, opt.arrays(), state)


def fit(
    encoder: Encoder,
    train: Sequence[Utterance],
    valid: Sequence[Utterance] | None = None,
    config: TrainConfig = TrainConfig(),
    out_dir: str | Path | None = None,
    vocab_text: str | None = None,
    resume: bool = True,
    stop_after: int | None = None,
) -> FitResult:
    """Train for up to ``max_epochs``.

    With ``out_dir`` every completed epoch is checkpointed to ``last/`` (and
    ``best/`` on a new validation best) and appended to ``train_log.tsv``; an
    existing ``last/`` is resumed.  Without a validation set the schedule and
    early stopping are inactive.  ``stop_after`` ends the call after that many
    epochs in this invocation, as an interruption would.
    """
    cfg = config.resolved(encoder.kind)
    out = Path(out_dir) if out_dir is not None else None
    opt, lr, history, records, start = AdamState(), float(cfg.learning_rate), [], [], 0
    if out is not None and resume and (out / "last" / "config.txt").exists():
        ck = load_checkpoint(out / "last")
        if ck.encoder.config != encoder.config:
            raise ValueError(f"{out / 'last'}: checkpoint encoder config differs from the requested one")
        for name, p in ck.encoder.params.items():
            encoder.params[name].data[...] = p.data
        encoder.load_buffers(ck.encoder.buffers())
        st = ck.state
        opt = AdamState.from_arrays(ck.optimizer, int(st["adam_t"]))
        lr, start = float(st["lr"]), int(st["epoch"])
        history = [float(v) for v in st["history"].split(",") if v]
        records = read_log(out / "train_log.tsv")[:start] if (out / "train_log.tsv").exists() else []
        log.info("resuming from epoch %d (lr %.3g)", start, lr)
    stopped = bool(history) and should_stop(history, cfg.stop_patience)
    ran = 0
    for epoch in range(start, cfg.max_epochs):
        if stopped or (stop_after is not None and ran >= stop_after):
            break
        w0, c0 = time.perf_counter(), time.process_time()
        train_loss, skipped = train_epoch(encoder, train, cfg, opt, lr, epoch)
        valid_loss = evaluate(encoder, valid, cfg.batch_size) if valid else math.nan
        rec = EpochRecord(
            epoch, train_loss, valid_loss, lr,
            time.perf_counter() - w0, time.process_time() - c0, skipped,
        )
        records.append(rec)
        ran += 1
        log.info("epoch %d train %.4f valid %.4f lr %.3g", epoch, train_loss, valid_loss, lr)
        improved = False
        if valid and math.isfinite(valid_loss):
            improved = not history or valid_loss < min(history)
            history.append(valid_loss)
            lr = lr_schedule(history, lr, cfg.decay_factor, cfg.patience_epochs)
            stopped = should_stop(history, cfg.stop_patience)
        if out is not None:
            state = {
                "epoch": epoch + 1,
                "lr": repr(lr),
                "adam_t": opt.t,
                "history": ",".join(repr(h) for h in history),
            }
            _save(out, "last", encoder, vocab_text, opt, state)
            if improved:
                _save(out, "best", encoder, vocab_text, opt, state)
            atomic_write_text(out / "train_log.tsv", format_log(records))
    best = int(np.argmin(history)) if history else None
    return FitResult(records, stopped, best)
