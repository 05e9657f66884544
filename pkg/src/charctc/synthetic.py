"""Toy tone corpus: every character is a pure tone, every utterance a
sequence of tones separated by short silences."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import AudioClip, ManifestRow, format_manifest, mel_centers, write_wav
from .tensorio import atomic_write_text

SR = 8000
LETTERS = "abcdefgh"
WORDS = ("abc", "bad", "cafe", "deaf", "each", "fade", "gab", "head", "bead", "hedge")


@dataclass
class ToyUtterance:
    utt_id: str
    speaker_id: str
    clip: AudioClip
    transcript: str


def letter_freqs(sample_rate: int = SR) -> dict[str, float]:
    """Tones sit on well-separated mel-filter centres."""
    centres = mel_centers(sample_rate)
    picks = np.linspace(4, len(centres) - 5, len(LETTERS)).round().astype(int)
    return {ch: float(centres[i]) for ch, i in zip(LETTERS, picks)}


def synthesize(text: str, rng: np.random.Generator, tone_s: float = 0.1, gap_s: float = 0.04,
               sample_rate: int = SR) -> AudioClip:
    freqs = letter_freqs(sample_rate)
    gap = np.zeros(int(gap_s * sample_rate))
    parts = [gap]
    for ch in text:
        t = np.arange(int(tone_s * sample_rate)) / sample_rate
        amp = 6000 * (0.8 + 0.4 * rng.random())
        parts += [amp * np.sin(2 * np.pi * freqs[ch] * t + rng.uniform(0, 2 * np.pi)), gap]
    x = np.concatenate(parts) + rng.normal(0, 30, size=sum(len(p) for p in parts))
    return AudioClip(np.clip(np.round(x), -32768, 32767).astype(np.int16), sample_rate)


def tone_corpus(n: int = 10, seed: int = 0, speakers: int = 2) -> list[ToyUtterance]:
    if n > len(WORDS):
        raise ValueError(f"at most {len(WORDS)} distinct toy words")
    rng = np.random.default_rng(seed)
    return [
        ToyUtterance(f"utt{i:03d}", f"spk{i % speakers}", synthesize(w, rng), w)
        for i, w in enumerate(WORDS[:n])
    ]


def write_corpus(utts: list[ToyUtterance], out_dir: str | Path) -> Path:
    """WAV files plus ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for u in utts:
        write_wav(out / f"{u.utt_id}.wav", u.clip)
        rows.append(ManifestRow(u.utt_id, u.speaker_id, f"{u.utt_id}.wav", u.transcript))
    path = out / "manifest.tsv"
    atomic_write_text(path, format_manifest(rows))
    return path
