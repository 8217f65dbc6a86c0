"""Manifest construction, mixture materialization and spectrogram batching."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .dsp import StftConfig, WaveBuffer, mix_at_snr, pad_to_multiple, read_wav, spectrogram_scale, stft, write_wav

log = logging.getLogger(__name__)

SNR_GRID = (-3.0, 0.0, 3.0, 6.0, 12.0)
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestEntry:
    clean_path: str
    noise_path: str
    noise_category: str
    snr_db: float
    seed: int
    split: str
    peak_rescale: float = 1.0

    @property
    def entry_id(self) -> str:
        return f"{Path(self.clean_path).stem}__{self.noise_category}__{self.snr_db:+g}dB"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> ManifestEntry:
        d = json.loads(line)
        d["snr_db"] = float(d["snr_db"])
        return cls(**d)


def list_wavs(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".wav")


def _split_sizes(n: int, split_ratios: Sequence[float]) -> list[int]:
    """Largest-remainder allocation of ``n`` items to (train, val, test)."""
    ratios = np.asarray(split_ratios, dtype=float)
    if ratios.shape != (3,) or np.any(ratios < 0) or ratios.sum() <= 0:
        raise ValueError(f"split_ratios must be three non-negative numbers, got {split_ratios}")
    exact = ratios / ratios.sum() * n
    sizes = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    return sizes.tolist()


def build_manifest(
    clean_dir,
    noise_dir,
    snr_grid: Sequence[float] = SNR_GRID,
    per_noise_count: int | None = None,
    split_ratios: Sequence[float] = (1.0, 0.0, 0.0),
    seed: int = 0,
    split_counts: Sequence[int] | None = None,
) -> list[ManifestEntry]:
    """Assign every clean file one noise category and one SNR, then split.

    Clean files are shuffled under ``seed`` and dealt round-robin over the
    noise categories; within a category, successive files cycle through the
    SNR grid.  Each clean file lands in exactly one split.
    """
    cleans = list_wavs(clean_dir)
    noises = list_wavs(noise_dir)
    if not cleans:
        raise ValueError(f"no .wav files in clean directory {clean_dir}")
    if not noises:
        raise ValueError(f"no .wav files in noise directory {noise_dir}")
    if not snr_grid:
        raise ValueError("empty SNR grid")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(cleans))
    cleans = [cleans[i] for i in order]

    n_noise, n_snr = len(noises), len(snr_grid)
    if per_noise_count is not None:
        wanted = per_noise_count * n_noise
        if wanted > len(cleans):
            log.warning("requested %d files per noise (%d total) but only %d clean files; using all",
                        per_noise_count, wanted, len(cleans))
        elif wanted < len(cleans):
            log.warning("truncating %d clean files to %d (%d per noise)", len(cleans), wanted, per_noise_count)
            cleans = cleans[:wanted]
    if len(cleans) % (n_noise * n_snr):
        log.warning("%d clean files do not divide evenly over %d noises x %d SNRs; counts differ by at most one",
                    len(cleans), n_noise, n_snr)

    if split_counts is not None:
        sizes = [int(c) for c in split_counts]
        if any(c < 0 for c in sizes) or sum(sizes) > len(cleans):
            raise ValueError(f"split counts {sizes} exceed {len(cleans)} clean files")
        sizes[0] = len(cleans) - sizes[1] - sizes[2]
    else:
        sizes = _split_sizes(len(cleans), split_ratios)

    seeds = rng.integers(0, 2**31 - 1, size=len(cleans))
    splits = [split for split, size in zip(SPLITS, sizes) for _ in range(size)]
    entries = []
    for j, (k, s) in enumerate(assign_cells(len(cleans), n_noise, n_snr)):
        entries.append(ManifestEntry(
            clean_path=str(cleans[j]),
            noise_path=str(noises[k]),
            noise_category=noises[k].stem,
            snr_db=float(snr_grid[s]),
            seed=int(seeds[j]),
            split=splits[j],
        ))
    return entries


def assign_cells(n: int, n_noise: int, n_snr: int) -> list[tuple[int, int]]:
    """(noise index, SNR index) for items 0..n-1: noises round-robin, SNRs cycling within each noise."""
    return [(j % n_noise, (j // n_noise) % n_snr) for j in range(n)]


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for e in entries:
            f.write(e.to_json() + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    with open(path, encoding="utf-8") as f:
        return [ManifestEntry.from_json(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# materialization
# ---------------------------------------------------------------------------


class MaterializeError(RuntimeError):
    pass


def entry_paths(entry: ManifestEntry, out_dir) -> tuple[Path, Path]:
    base = Path(out_dir) / entry.split
    name = entry.entry_id + ".wav"
    return base / "noisy" / name, base / "clean" / name


def materialize(entry: ManifestEntry, out_dir, sample_rate: int | None = None) -> ManifestEntry:
    """Mix one entry and write ``{split}/noisy`` and ``{split}/clean`` WAVs.

    Returns the entry with ``peak_rescale`` filled in.
    """
    try:
        clean = read_wav(entry.clean_path, expected_rate=sample_rate)
        noise = read_wav(entry.noise_path, expected_rate=clean.sample_rate_hz)
        mix = mix_at_snr(clean, noise, entry.snr_db, entry.seed)
        noisy_path, clean_path = entry_paths(entry, out_dir)
        write_wav(noisy_path, mix.noisy)
        write_wav(clean_path, mix.clean)
    except (OSError, ValueError) as exc:
        raise MaterializeError(f"entry {entry.entry_id} ({entry.clean_path} + {entry.noise_path}): {exc}") from exc
    return replace(entry, peak_rescale=mix.peak_rescale)


def worker_count() -> int:
    return max(1, int(os.environ.get("RAGE_THREADS", "1")))


def materialize_all(entries: Sequence[ManifestEntry], out_dir, sample_rate: int | None = None) -> list[ManifestEntry]:
    workers = worker_count()
    if workers == 1:
        return [materialize(e, out_dir, sample_rate) for e in entries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda e: materialize(e, out_dir, sample_rate), entries))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    noisy: np.ndarray  # [B, 2, F_pad, T_pad], normalized
    clean: np.ndarray
    frames: tuple[int, int]  # unpadded (F, T)
    ids: list[str]
    offsets: list[int]
    scales: list[float]


class SpectrogramBatches:
    """Fixed-length random crops of materialized pairs, as padded RI spectrograms.

    Waveforms are loaded once; :meth:`epoch` yields one seeded pass.
    """

    def __init__(
        self,
        entries: Sequence[ManifestEntry],
        data_dir,
        split: str,
        batch_size: int = 2,
        segment_seconds: float = 2.0,
        stft_config: StftConfig = StftConfig(),
        multiple: int = 16,
    ):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.entries = [e for e in entries if e.split == split]
        if not self.entries:
            raise ValueError(f"split {split!r} is empty")
        self.split = split
        self.batch_size = batch_size
        self.stft_config = stft_config
        self.multiple = multiple
        self.pairs: list[tuple[WaveBuffer, WaveBuffer]] = []
        for e in self.entries:
            noisy_path, clean_path = entry_paths(e, data_dir)
            self.pairs.append((read_wav(noisy_path), read_wav(clean_path)))
        rate = self.pairs[0][0].sample_rate_hz
        self.segment = int(round(segment_seconds * rate))
        shortest = min(len(n) for n, _ in self.pairs)
        if self.segment > shortest:
            raise ValueError(f"segment of {self.segment} samples longer than shortest file ({shortest} samples)")
        if self.segment < 1:
            raise ValueError("segment must be at least one sample")

    def __len__(self) -> int:
        return -(-len(self.entries) // self.batch_size)

    def epoch(self, seed: int) -> Iterator[Batch]:
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self.entries))
        offsets = [int(rng.integers(0, len(self.pairs[i][0]) - self.segment + 1)) for i in order]
        for start in range(0, len(order), self.batch_size):
            idx = order[start : start + self.batch_size]
            offs = offsets[start : start + self.batch_size]
            noisy, clean, scales = [], [], []
            for i, off in zip(idx, offs):
                n_wave, c_wave = self.pairs[i]
                n_seg = n_wave.samples[off : off + self.segment]
                c_seg = c_wave.samples[off : off + self.segment]
                scale = spectrogram_scale(n_seg, self.stft_config)
                noisy.append(stft(n_seg, self.stft_config).data * scale)
                clean.append(stft(c_seg, self.stft_config).data * scale)
                scales.append(scale)
            frames = noisy[0].shape[1:]
            yield Batch(
                noisy=pad_to_multiple(np.stack(noisy), self.multiple),
                clean=pad_to_multiple(np.stack(clean), self.multiple),
                frames=frames,
                ids=[self.entries[i].entry_id for i in idx],
                offsets=offs,
                scales=scales,
            )


def batch_iterator(manifest, data_dir, split, batch_size, segment_seconds, seed,
                   stft_config: StftConfig = StftConfig(), multiple: int = 16) -> Iterator[Batch]:
    """One seeded epoch of batches over ``split``."""
    return SpectrogramBatches(manifest, data_dir, split, batch_size, segment_seconds, stft_config, multiple).epoch(seed)
