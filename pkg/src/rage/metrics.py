"""Waveform-level quality proxies and grouped evaluation reports."""

from __future__ import annotations

import json
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import ManifestEntry, entry_paths, worker_count
from .dsp import StftConfig, WaveBuffer, read_wav, stft

SI_SDR_LIMIT_DB = 60.0
LSD_EPS = 1e-8
SEG_SNR_RANGE_DB = (-10.0, 35.0)
METRIC_NAMES = ("si_sdr_db", "lsd_db", "seg_snr_db")
EXTERNAL_FIELDS = ("pesq", "wer")  # reserved for scores computed by external tools


def _pair(est, ref) -> tuple[np.ndarray, np.ndarray]:
    e = np.asarray(est.samples if isinstance(est, WaveBuffer) else est, dtype=np.float64)
    r = np.asarray(ref.samples if isinstance(ref, WaveBuffer) else ref, dtype=np.float64)
    if e.ndim != 1 or r.ndim != 1:
        raise ValueError("metrics expect mono 1-D signals")
    n = min(e.size, r.size)
    if n == 0:
        raise ValueError("metrics need non-empty signals")
    return e[:n], r[:n]


def si_sdr(est, ref) -> float:
    """Scale-invariant SDR in dB, clamped to +/-60."""
    e, r = _pair(est, ref)
    ref_energy = float(np.dot(r, r))
    if ref_energy == 0.0:
        raise ValueError("si_sdr: reference is silent")
    target = (np.dot(e, r) / ref_energy) * r
    residual = e - target
    t, d = float(np.dot(target, target)), float(np.dot(residual, residual))
    if t == 0.0:  # silent or orthogonal estimate
        return -SI_SDR_LIMIT_DB
    if d == 0.0:
        return SI_SDR_LIMIT_DB
    return float(np.clip(10.0 * np.log10(t / d), -SI_SDR_LIMIT_DB, SI_SDR_LIMIT_DB))


def lsd(est, ref, cfg: StftConfig = StftConfig()) -> float:
    """Log-spectral distance in dB: frame mean of the per-bin RMS log-magnitude gap."""
    e, r = _pair(est, ref)
    mag_e = np.abs(stft(e, cfg).to_complex())
    mag_r = np.abs(stft(r, cfg).to_complex())
    diff = 20.0 * np.log10(mag_e + LSD_EPS) - 20.0 * np.log10(mag_r + LSD_EPS)
    return float(np.mean(np.sqrt(np.mean(diff**2, axis=0))))


def seg_snr(est, ref, frame: int = 512, hop: int = 256, silence: float = 1e-10) -> float:
    """Segmental SNR in dB over frames where the reference is not silent.

    Per-frame values are clamped to [-10, 35] dB before averaging.
    """
    e, r = _pair(est, ref)
    if r.size < frame:
        frame = hop = r.size
    lo, hi = SEG_SNR_RANGE_DB
    values = []
    for start in range(0, r.size - frame + 1, hop):
        rs = r[start : start + frame]
        sig = float(np.dot(rs, rs))
        if sig <= silence * frame:
            continue
        noise = rs - e[start : start + frame]
        err = float(np.dot(noise, noise))
        values.append(hi if err == 0.0 else float(np.clip(10 * np.log10(sig / err), lo, hi)))
    if not values:
        raise ValueError("seg_snr: reference is silent in every frame")
    return float(np.mean(values))


def score(est, ref, cfg: StftConfig = StftConfig()) -> dict[str, float]:
    return {"si_sdr_db": si_sdr(est, ref), "lsd_db": lsd(est, ref, cfg), "seg_snr_db": seg_snr(est, ref)}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


class MissingFilesError(FileNotFoundError):
    def __init__(self, missing: list[str]):
        self.missing = missing
        super().__init__(f"{len(missing)} materialized file(s) missing; refusing partial report:\n  "
                         + "\n  ".join(missing))


@dataclass
class FileResult:
    entry_id: str
    snr_db: float
    noise_category: str
    noisy: dict[str, float]
    enhanced: dict[str, float]


@dataclass
class EvalReport:
    mode: str  # "passthrough" or "model"
    files: list[FileResult]
    source: str | None = None
    external: dict = field(default_factory=lambda: {k: None for k in EXTERNAL_FIELDS})

    def groups(self) -> list[dict]:
        """Arithmetic means per (snr_db, noise_category), sorted by SNR then noise."""
        buckets: dict[tuple[float, str], list[FileResult]] = defaultdict(list)
        for f in self.files:
            buckets[(f.snr_db, f.noise_category)].append(f)
        rows = []
        for (snr, noise), items in sorted(buckets.items()):
            rows.append({
                "snr_db": snr,
                "noise_category": noise,
                "count": len(items),
                "noisy": _mean_metrics([f.noisy for f in items]),
                "enhanced": _mean_metrics([f.enhanced for f in items]),
                **{k: None for k in EXTERNAL_FIELDS},
            })
        return rows

    def overall(self) -> dict:
        return {"count": len(self.files),
                "noisy": _mean_metrics([f.noisy for f in self.files]),
                "enhanced": _mean_metrics([f.enhanced for f in self.files])}

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "source": self.source,
            "files": [
                {"entry_id": f.entry_id, "snr_db": f.snr_db, "noise_category": f.noise_category,
                 "noisy": f.noisy, "enhanced": f.enhanced, **self.external}
                for f in self.files
            ],
            "groups": self.groups(),
            "overall": self.overall(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        header = ["SNR dB", "noise", "n", "SI-SDR in", "SI-SDR out", "LSD in", "LSD out", "segSNR in", "segSNR out"]
        rows = []
        groups = self.groups()
        for snr in sorted({g["snr_db"] for g in groups}):
            at_snr = [g for g in groups if g["snr_db"] == snr]
            for g in at_snr:
                rows.append(_table_row(f"{snr:+g}", g["noise_category"], g["count"], g["noisy"], g["enhanced"]))
            if len(at_snr) > 1:
                files = [f for f in self.files if f.snr_db == snr]
                rows.append(_table_row(f"{snr:+g}", "(all)", len(files),
                                       _mean_metrics([f.noisy for f in files]),
                                       _mean_metrics([f.enhanced for f in files])))
        o = self.overall()
        rows.append(_table_row("all", "(all)", o["count"], o["noisy"], o["enhanced"]))
        widths = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(len(header))]
        fmt = lambda cells: "  ".join(c.rjust(w) if i != 1 else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
        return "\n".join(lines) + "\n"


def _mean_metrics(items: Sequence[dict[str, float]]) -> dict[str, float]:
    return {k: float(np.mean([m[k] for m in items])) for k in METRIC_NAMES}


def _table_row(snr: str, noise: str, count: int, noisy: dict, enhanced: dict) -> list[str]:
    cells = [snr, noise, str(count)]
    for k in METRIC_NAMES:
        cells += [f"{noisy[k]:.2f}", f"{enhanced[k]:.2f}"]
    return cells


def evaluate(
    entries: Sequence[ManifestEntry],
    data_dir,
    enhancer: Callable[[WaveBuffer], WaveBuffer] | None = None,
    split: str = "test",
    stft_config: StftConfig = StftConfig(),
    source: str | None = None,
) -> EvalReport:
    """Score every ``split`` entry; ``enhancer=None`` scores the noisy input itself."""
    chosen = sorted((e for e in entries if e.split == split), key=lambda e: e.entry_id)
    if not chosen:
        raise ValueError(f"manifest has no {split!r} entries")
    missing = [str(p) for e in chosen for p in entry_paths(e, data_dir) if not Path(p).is_file()]
    if missing:
        raise MissingFilesError(missing)

    def one(e: ManifestEntry) -> FileResult:
        noisy_path, clean_path = entry_paths(e, data_dir)
        noisy, clean = read_wav(noisy_path), read_wav(clean_path)
        noisy_scores = score(noisy, clean, stft_config)
        enhanced_scores = noisy_scores if enhancer is None else score(enhancer(noisy), clean, stft_config)
        return FileResult(e.entry_id, e.snr_db, e.noise_category, noisy_scores, enhanced_scores)

    workers = worker_count()
    if workers == 1 or enhancer is not None:  # no_grad toggles a process-wide flag
        files = [one(e) for e in chosen]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            files = list(pool.map(one, chosen))
    return EvalReport("passthrough" if enhancer is None else "model", files, source)
