"""Acoustic front end: log-mel filterbanks, deltas, per-speaker CMVN.

Also owns the utterance manifest (UTF-8 TSV: utterance-id, speaker-id,
audio-or-feature path, transcript) and the loaders built on it.
"""

from __future__ import annotations

import logging
import wave
from collections import OrderedDict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensorio

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-10
FEATURE_DIM = 80


@dataclass
class AudioClip:
    samples: np.ndarray  # int16 PCM
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("audio clip must be a non-empty mono sample vector")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # [T, 80]
    utt_id: str = ""
    speaker_id: str = ""


def read_wav(path: str | Path) -> AudioClip:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        rate = w.getframerate()
        data = w.readframes(w.getnframes())
    return AudioClip(np.frombuffer(data, dtype="<i2").copy(), rate)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(np.asarray(clip.samples, dtype="<i2").tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_centers(sample_rate: int, n_mels: int = 40) -> np.ndarray:
    """Center frequencies (Hz) of the triangular filters."""
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    return pts[1:-1]


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = 40) -> np.ndarray:
    """``[n_mels, n_fft//2 + 1]`` triangular weights spanning 0..Nyquist."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (freqs - lo) / (mid - lo)
    fall = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rise, fall))


def _frame_params(sample_rate: int, window_ms: float, shift_ms: float) -> tuple[int, int]:
    return int(round(sample_rate * window_ms / 1000.0)), int(round(sample_rate * shift_ms / 1000.0))


def num_frames(n_samples: int, sample_rate: int, window_ms: float = 25, shift_ms: float = 10) -> int:
    win, shift = _frame_params(sample_rate, window_ms, shift_ms)
    return (n_samples - win) // shift + 1 if n_samples >= win else 0


def logmel(
    clip: AudioClip,
    window_ms: float = 25,
    shift_ms: float = 10,
    n_mels: int = 40,
    n_fft: int | None = None,
) -> np.ndarray:
    """Natural-log mel filterbank energies, ``[T, n_mels]``.

    Hamming window, power spectrum, triangular filters from 0 Hz to Nyquist,
    energies floored at ``1e-10`` before the log.
    """
    win, shift = _frame_params(clip.sample_rate, window_ms, shift_ms)
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size < win:
        raise ValueError(f"clip has {x.size} samples, shorter than one {win}-sample window")
    if n_fft is None:
        n_fft = 1 << (win - 1).bit_length()
    T = (x.size - win) // shift + 1
    frames = sliding_window_view(x, win)[::shift][:T] * np.hamming(win)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(clip.sample_rate, n_fft, n_mels).T
    return np.log(np.maximum(energies, LOG_FLOOR))


def deltas(static: np.ndarray, window: int = 2) -> np.ndarray:
    """Regression deltas over +-``window`` frames with edge replication."""
    s = np.asarray(static, dtype=np.float64)
    T = s.shape[0]
    if T < 1:
        raise ValueError("deltas need at least one frame")
    padded = np.pad(s, ((window, window), (0, 0)), mode="edge")
    num = np.zeros_like(s)
    for n in range(1, window + 1):
        num += n * (padded[window + n : window + n + T] - padded[window - n : window - n + T])
    return num / (2.0 * sum(n * n for n in range(1, window + 1)))


def static_and_deltas(clip: AudioClip, **kw) -> np.ndarray:
    """The 80-dim frame: 40 log-mel energies then their deltas."""
    static = logmel(clip, **kw)
    return np.hstack([static, deltas(static)])


def cmvn(features: Sequence[FeatureMatrix], eps: float = 1e-8) -> list[FeatureMatrix]:
    """Per-speaker, per-dimension mean/variance normalisation.

    Returns new matrices in input order.  Speakers with fewer than two frames
    are only mean-subtracted and reported through the log.
    """
    groups: "OrderedDict[str, list[int]]" = OrderedDict()
    for i, fm in enumerate(features):
        groups.setdefault(fm.speaker_id, []).append(i)
    out: list[FeatureMatrix | None] = [None] * len(features)
    for spk, idx in groups.items():
        stacked = np.vstack([features[i].frames for i in idx])
        mu = stacked.mean(axis=0)
        if stacked.shape[0] < 2:
            log.warning("speaker %r has %d frame(s); skipping variance normalisation", spk, stacked.shape[0])
            scale = np.ones_like(mu)
        else:
            scale = 1.0 / np.maximum(stacked.std(axis=0), eps)
        for i in idx:
            out[i] = replace(features[i], frames=(features[i].frames - mu) * scale)
    return out  # type: ignore[return-value]


def stack_pairs(features: np.ndarray) -> np.ndarray:
    """Concatenate frames (2i, 2i+1); an odd last frame is paired with itself."""
    f = np.asarray(features)
    T = f.shape[0]
    if T < 1:
        raise ValueError("stack_pairs needs at least one frame")
    if T % 2:
        f = np.vstack([f, f[-1:]])
    return f.reshape(f.shape[0] // 2, 2 * f.shape[1])


# ---------------------------------------------------------------------------
# manifests and datasets
# ---------------------------------------------------------------------------


@dataclass
class ManifestRow:
    utt_id: str
    speaker_id: str
    path: str
    transcript: str


def read_manifest(path: str | Path) -> list[ManifestRow]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) == 3:
            parts.append("")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(parts)}")
        rows.append(ManifestRow(*parts))
    return rows


def format_manifest(rows: Iterable[ManifestRow]) -> str:
    return "".join(f"{r.utt_id}\t{r.speaker_id}\t{r.path}\t{r.transcript}\n" for r in rows)


def resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def featurize_rows(
    rows: Sequence[ManifestRow],
    base_dir: str | Path = ".",
    sample_rate: int = 8000,
    normalize: bool = True,
) -> list[FeatureMatrix]:
    """Features for every row: WAV files go through the front end, ``.tnsr``
    files are taken as precomputed frames.  CMVN runs over the WAV-derived
    matrices only."""
    base = Path(base_dir)
    feats: list[FeatureMatrix] = []
    computed: list[int] = []
    for row in rows:
        path = resolve(base, row.path)
        if path.suffix == ".tnsr":
            frames = tensorio.load(path)
        else:
            try:
                clip = read_wav(path)
            except (OSError, EOFError, wave.Error) as exc:
                raise FeatureError(row.utt_id, f"cannot read audio {path}: {exc}") from exc
            if clip.sample_rate != sample_rate:
                raise FeatureError(
                    row.utt_id, f"sample rate {clip.sample_rate} Hz, expected {sample_rate} Hz"
                )
            try:
                frames = static_and_deltas(clip)
            except ValueError as exc:
                raise FeatureError(row.utt_id, str(exc)) from exc
            computed.append(len(feats))
        if frames.ndim != 2 or frames.shape[1] != FEATURE_DIM:
            raise FeatureError(row.utt_id, f"feature matrix has shape {frames.shape}, need [T, 80]")
        feats.append(FeatureMatrix(frames, row.utt_id, row.speaker_id))
    if normalize and computed:
        normed = cmvn([feats[i] for i in computed])
        for i, fm in zip(computed, normed):
            feats[i] = fm
    return feats


class FeatureError(RuntimeError):
    def __init__(self, utt_id: str, message: str):
        super().__init__(f"utterance {utt_id}: {message}")
        self.utt_id = utt_id
