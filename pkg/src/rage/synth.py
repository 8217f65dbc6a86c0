"""Synthetic speech-like and noise signals for desk-scale corpora.

Clean "utterances" are trains of voiced syllables: a gliding fundamental
with harmonics shaped by a few formant resonances under a smooth envelope.
Noise categories cover stationary broadband, coloured, tonal and babble-like
interference.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dsp import WaveBuffer, rms, write_wav

NOISE_KINDS = ("white", "pink", "hum", "babble", "rotor")


def _formant_gain(freqs: np.ndarray, formants: np.ndarray, bandwidth: float = 120.0) -> np.ndarray:
    g = np.zeros_like(freqs)
    for f in formants:
        g += 1.0 / (1.0 + ((freqs - f) / bandwidth) ** 2)
    return g


def speech_like(seconds: float, sample_rate: int, rng: np.random.Generator, level: float = 0.08) -> np.ndarray:
    n = int(round(seconds * sample_rate))
    out = np.zeros(n)
    pos = int(rng.integers(0, sample_rate // 20))
    while pos < n:
        dur = int(sample_rate * rng.uniform(0.12, 0.32))
        gap = int(sample_rate * rng.uniform(0.02, 0.12))
        seg = min(dur, n - pos)
        if seg < sample_rate // 50:
            break
        t = np.arange(seg) / sample_rate
        f0 = rng.uniform(95, 240) * (1 + rng.uniform(-0.15, 0.15) * t / max(t[-1], 1e-3))
        phase = 2 * np.pi * np.cumsum(f0) / sample_rate
        formants = np.sort(rng.uniform([300, 900, 2000], [850, 2300, 3400]))
        syl = np.zeros(seg)
        for h in range(1, int(4000 / f0.max()) + 1):
            syl += _formant_gain(h * f0, formants) * np.sin(h * phase) / np.sqrt(h)
        env = np.sin(np.pi * np.arange(seg) / seg) ** 2
        out[pos : pos + seg] += syl * env * rng.uniform(0.6, 1.0)
        pos += seg + gap
    if rms(out) == 0:
        out[: n // 2] = np.sin(2 * np.pi * 150 * np.arange(n // 2) / sample_rate)
    return out * (level / rms(out))


def noise(kind: str, seconds: float, sample_rate: int, rng: np.random.Generator, level: float = 0.1) -> np.ndarray:
    n = int(round(seconds * sample_rate))
    if kind == "white":
        x = rng.normal(size=n)
    elif kind == "pink":
        spec = np.fft.rfft(rng.normal(size=n))
        f = np.arange(spec.size)
        spec[1:] /= np.sqrt(f[1:])
        spec[0] = 0
        x = np.fft.irfft(spec, n)
    elif kind == "hum":
        t = np.arange(n) / sample_rate
        base = rng.uniform(50, 120)
        x = sum(np.sin(2 * np.pi * k * base * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 12))
        x = x + 0.2 * rng.normal(size=n)
    elif kind == "babble":
        x = sum(speech_like(seconds, sample_rate, rng) for _ in range(6))
    elif kind == "rotor":
        t = np.arange(n) / sample_rate
        spec = np.fft.rfft(rng.normal(size=n))
        freqs = np.fft.rfftfreq(n, 1 / sample_rate)
        spec *= 1.0 / (1.0 + (freqs / 400.0) ** 2)
        x = np.fft.irfft(spec, n) * (1.0 + 0.8 * np.sin(2 * np.pi * rng.uniform(8, 20) * t))
    else:
        raise ValueError(f"unknown noise kind {kind!r}; choose from {NOISE_KINDS}")
    return x * (level / rms(x))


def write_corpus(
    out_dir,
    n_clean: int,
    noise_kinds=("white", "babble"),
    seconds: float = 2.5,
    noise_seconds: float = 6.0,
    sample_rate: int = 16000,
    seed: int = 0,
) -> tuple[Path, Path]:
    """Write ``clean/utt_XXXX.wav`` and ``noise/<kind>.wav`` under ``out_dir``."""
    out = Path(out_dir)
    clean_dir, noise_dir = out / "clean", out / "noise"
    rng = np.random.default_rng(seed)
    for i in range(n_clean):
        dur = seconds * rng.uniform(1.0, 1.2)
        write_wav(clean_dir / f"utt_{i:04d}.wav", WaveBuffer(speech_like(dur, sample_rate, rng), sample_rate))
    for kind in noise_kinds:
        write_wav(noise_dir / f"{kind}.wav", WaveBuffer(noise(kind, noise_seconds, sample_rate, rng), sample_rate))
    return clean_dir, noise_dir
