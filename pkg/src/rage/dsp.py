"""Waveform I/O, STFT analysis/synthesis and SNR-exact mixing."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_SAMPLE_RATE = 16000
_PCM16_SCALE = 32768.0


class WavFormatError(ValueError):
    pass


@dataclass
class WaveBuffer:
    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 512
    hop: int = 128
    window: str = "hann"

    def __post_init__(self):
        if self.window != "hann":
            raise ValueError(f"only the periodic Hann window is supported, got {self.window!r}")
        if self.n_fft < 2 or self.n_fft % 2:
            raise ValueError(f"n_fft must be an even integer >= 2, got {self.n_fft}")
        if self.hop < 1 or self.n_fft % self.hop or self.hop > self.n_fft // 2:
            raise ValueError(f"hop {self.hop} must divide n_fft {self.n_fft} and be <= n_fft/2")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def window_array(self) -> np.ndarray:
        return hann_window(self.n_fft)

    def to_dict(self) -> dict:
        return {"n_fft": self.n_fft, "hop": self.hop, "window": self.window}


@dataclass
class RISpectrogram:
    """Real/imaginary STFT packed as ``data[2, F, T]``."""

    data: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[0] != 2:
            raise ValueError(f"RI spectrogram must be [2, F, T], got {self.data.shape}")
        if self.data.shape[1] != self.config.n_bins:
            raise ValueError(f"{self.data.shape[1]} bins inconsistent with n_fft={self.config.n_fft}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[2]

    def to_complex(self) -> np.ndarray:
        return self.data[0] + 1j * self.data[1]

    @classmethod
    def from_complex(cls, spec: np.ndarray, config: StftConfig) -> RISpectrogram:
        return cls(np.stack([spec.real, spec.imag]), config)


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------


def read_wav(path, expected_rate: int | None = None) -> WaveBuffer:
    """Read a mono 16-bit PCM WAV file into floats in [-1, 1)."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except wave.Error as exc:
        raise WavFormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated header") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: unsupported channel count {channels} (mono only)")
    if width != 2:
        raise WavFormatError(f"{path}: unsupported sample width {8 * width} bits (16-bit PCM only)")
    if len(raw) != 2 * n:
        raise WavFormatError(f"{path}: truncated data chunk ({len(raw) // 2} of {n} frames)")
    if expected_rate is not None and rate != expected_rate:
        raise WavFormatError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / _PCM16_SCALE
    return WaveBuffer(samples, rate)


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    clipped = np.clip(samples, -1.0, 1.0)
    return np.clip(np.round(clipped * _PCM16_SCALE), -32768, 32767).astype("<i2")


def write_wav(path, buf: WaveBuffer) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(buf.sample_rate_hz)
        wf.writeframes(quantize_pcm16(buf.samples).tobytes())


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(w: WaveBuffer | np.ndarray, cfg: StftConfig = StftConfig()) -> RISpectrogram:
    """Centered, Hann-windowed STFT.

    The signal is reflect-padded by ``n_fft/2`` on each side; frame ``t``
    covers padded samples ``[t*hop, t*hop + n_fft)``.  Inputs shorter than
    one frame are zero-padded to ``n_fft`` first.
    """
    x = w.samples if isinstance(w, WaveBuffer) else np.asarray(w, dtype=np.float64)
    n_fft, hop = cfg.n_fft, cfg.hop
    if x.size < n_fft:
        x = np.pad(x, (0, n_fft - x.size))
    half = n_fft // 2
    xp = np.pad(x, (half, half), mode="reflect")
    n_frames = 1 + (xp.size - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(xp, n_fft)[::hop][:n_frames]
    spec = np.fft.rfft(frames * cfg.window_array(), axis=1).T
    return RISpectrogram.from_complex(spec, cfg)


def istft(s: RISpectrogram, out_len: int) -> WaveBuffer:
    """Weighted overlap-add inverse of :func:`stft` (window-squared normalization)."""
    cfg = s.config
    n_fft, hop = cfg.n_fft, cfg.hop
    T = s.n_frames
    half = n_fft // 2
    full = n_fft + hop * (T - 1)
    if out_len < 0 or out_len + half > full:
        raise ValueError(f"out_len {out_len} exceeds reconstructable length {full - half}")
    win = cfg.window_array()
    frames = np.fft.irfft(s.to_complex().T, n=n_fft, axis=1) * win
    signal = np.zeros(full)
    norm = np.zeros(full)
    wsq = win * win
    for t in range(T):
        signal[t * hop : t * hop + n_fft] += frames[t]
        norm[t * hop : t * hop + n_fft] += wsq
    region = slice(half, half + out_len)
    denom = norm[region]
    if out_len and denom.min() < 1e-10:
        raise ValueError("degenerate overlap-add normalization (window coverage too small)")
    return WaveBuffer(signal[region] / denom if out_len else np.zeros(0))


def pad_to_multiple(data: np.ndarray, multiple: int) -> np.ndarray:
    """Zero-pad the last two axes up to the next multiple of ``multiple``."""
    F, T = data.shape[-2:]
    pf = -F % multiple
    pt = -T % multiple
    if not (pf or pt):
        return data
    pad = [(0, 0)] * (data.ndim - 2) + [(0, pf), (0, pt)]
    return np.pad(data, pad)


def spectrogram_scale(noisy: np.ndarray, cfg: StftConfig) -> float:
    """Factor that brings a noisy waveform's STFT values to roughly unit scale."""
    energy = np.sqrt(np.mean(noisy * noisy)) * np.sqrt(np.sum(cfg.window_array() ** 2))
    return 1.0 / max(float(energy), 1e-8)


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if x.size else 0.0


def snr_db(clean: np.ndarray, noise: np.ndarray) -> float:
    return 20.0 * np.log10(rms(clean) / rms(noise))


@dataclass
class Mixture:
    """Result of :func:`mix_at_snr`; all waveforms already carry ``peak_rescale``."""

    noisy: WaveBuffer
    scaled_noise: WaveBuffer
    clean: WaveBuffer
    noise_gain: float
    peak_rescale: float
    noise_offset: int

    def __iter__(self):
        yield self.noisy
        yield self.scaled_noise


def noise_segment(noise: np.ndarray, length: int, seed: int) -> tuple[np.ndarray, int]:
    """Loop short noise; slice long noise at a seeded random offset."""
    if noise.size < length:
        reps = -(-length // noise.size)
        return np.tile(noise, reps)[:length], 0
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(0, noise.size - length + 1))
    return noise[offset : offset + length], offset


def mix_at_snr(clean: WaveBuffer, noise: WaveBuffer, snr_db: float, seed: int) -> Mixture:
    """Add ``noise`` to ``clean`` so that the mixture has exactly ``snr_db``.

    If the mixture would clip, clean, noise and mixture are all rescaled by
    the same factor (recorded as ``peak_rescale``), which leaves the SNR intact.
    """
    if clean.sample_rate_hz != noise.sample_rate_hz:
        raise ValueError(f"sample rate mismatch: {clean.sample_rate_hz} vs {noise.sample_rate_hz}")
    c = clean.samples
    if c.size == 0 or rms(c) == 0.0:
        raise ValueError("clean signal is silent")
    if noise.samples.size == 0 or rms(noise.samples) == 0.0:
        raise ValueError("noise signal is silent")
    seg, offset = noise_segment(noise.samples, c.size, seed)
    seg_rms = rms(seg)
    if seg_rms == 0.0:
        raise ValueError("selected noise segment is silent")
    gain = rms(c) / seg_rms * 10.0 ** (-snr_db / 20.0)
    scaled = gain * seg
    noisy = c + scaled
    peak = float(np.max(np.abs(noisy)))
    rescale = 1.0 / peak if peak > 1.0 else 1.0
    rate = clean.sample_rate_hz
    return Mixture(
        noisy=WaveBuffer(noisy * rescale, rate),
        scaled_noise=WaveBuffer(scaled * rescale, rate),
        clean=WaveBuffer(c * rescale, rate),
        noise_gain=gain,
        peak_rescale=rescale,
        noise_offset=offset,
    )
