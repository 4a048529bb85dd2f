"""
Synthetic Fixture Corpora.
Two unpaired toy domains for tests and the acceptance run: percussive
harmonic tones (domain X) and sustained vibrato tones (domain Y).
"""
import logging
from pathlib import Path
from typing import Dict

import numpy as np

from app.corpus import build_manifest, write_manifest, write_wav
from app.models import AudioClip, Domain

logger = logging.getLogger(__name__)

SAMPLE_RATE = 22050
NOTE_SECONDS = 0.5
MIDI_LOW, MIDI_HIGH = 48, 72


def midi_to_hz(note: float) -> float:
    return 440.0 * 2.0 ** ((note - 69) / 12.0)


def attack_tone(freq: float, seconds: float, sr: int = SAMPLE_RATE, n_harmonics: int = 6) -> np.ndarray:
    """Instant onset, exponential decay, 1/k harmonic amplitudes."""
    t = np.arange(int(seconds * sr)) / sr
    tone = sum(
        np.sin(2 * np.pi * k * freq * t) / k
        for k in range(1, n_harmonics + 1)
        if k * freq < sr / 2
    )
    return tone * np.exp(-t / 0.12)


def vibrato_tone(
    freq: float,
    seconds: float,
    sr: int = SAMPLE_RATE,
    rate: float = 5.5,
    depth: float = 0.02,
    n_harmonics: int = 3,
) -> np.ndarray:
    """Slow linear attack, sustained level, sinusoidal frequency modulation."""
    t = np.arange(int(seconds * sr)) / sr
    modulation = depth * freq / rate * np.sin(2 * np.pi * rate * t)
    tone = sum(
        np.sin(2 * np.pi * k * (freq * t + modulation)) / (k * k)
        for k in range(1, n_harmonics + 1)
        if k * freq * (1 + depth) < sr / 2
    )
    envelope = np.minimum(t / 0.15, 1.0)
    return tone * envelope


def render_clip(domain: Domain, seconds: float, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> AudioClip:
    """A melody of random pitches in the style of the domain."""
    n_notes = max(1, int(round(seconds / NOTE_SECONDS)))
    voice = attack_tone if domain is Domain.X else vibrato_tone
    notes = rng.integers(MIDI_LOW, MIDI_HIGH + 1, size=n_notes)
    samples = np.concatenate([voice(midi_to_hz(n), NOTE_SECONDS, sr) for n in notes])
    samples = 0.9 * samples / np.max(np.abs(samples))
    return AudioClip(samples=samples, sample_rate=sr)


def write_fixture_corpus(
    root: Path,
    seconds: float = 60.0,
    clip_seconds: float = 5.0,
    seed: int = 0,
) -> Dict[Domain, Path]:
    """Write <root>/<domain>/clip_NNN.wav plus <root>/<domain>.txt manifests."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    n_clips = max(1, int(round(seconds / clip_seconds)))
    manifests: Dict[Domain, Path] = {}
    for domain in Domain:
        folder = root / domain.value
        for i in range(n_clips):
            write_wav(folder / f"clip_{i:03d}.wav", render_clip(domain, clip_seconds, rng))
        manifest_path = root / f"{domain.value}.txt"
        write_manifest(build_manifest([folder], domain), manifest_path)
        manifests[domain] = manifest_path
    logger.info(f"Wrote fixture corpus with {n_clips} clips per domain to {root}")
    return manifests
