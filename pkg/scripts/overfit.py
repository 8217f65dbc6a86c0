"""Overfit one 2 s noisy/clean pair and report loss and SI-SDR improvement.

    python3 scripts/overfit.py --out runs/overfit [--channels 16 --depth 4 --epochs 200]
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from rage import dataset as ds
from rage import dsp, metrics, synth
from rage.model import EnhancementUNet, ModelConfig, enhance_waveform
from rage.trainer import TrainConfig, fit


def make_pair(out: Path, seconds: float = 2.0, snr_db: float = 0.0, seed: int = 0) -> list[ds.ManifestEntry]:
    rng = np.random.default_rng(seed)
    sr = 16000
    dsp.write_wav(out / "raw" / "clean" / "utt.wav", dsp.WaveBuffer(synth.speech_like(seconds, sr, rng), sr))
    dsp.write_wav(out / "raw" / "noise" / "white.wav", dsp.WaveBuffer(synth.noise("white", seconds, sr, rng), sr))
    entry = ds.ManifestEntry(str(out / "raw" / "clean" / "utt.wav"), str(out / "raw" / "noise" / "white.wav"),
                             "white", snr_db, seed, "train")
    return [ds.materialize(entry, out / "mix")]


def run(out: Path, channels: int = 16, depth: int = 4, epochs: int = 200, lr: float = 1e-3,
        attention_gates: bool = True, seed: int = 0) -> dict:
    entries = make_pair(out, seed=seed)
    mcfg = ModelConfig(base_channels=channels, depth=depth, use_attention_gates=attention_gates)
    tcfg = TrainConfig(max_epochs=epochs, patience=epochs - 1, learning_rate=lr, batch_size=1, seed=seed)
    batches = ds.SpectrogramBatches(entries, out / "mix", "train", 1, 2.0, mcfg.stft, mcfg.multiple)
    model = EnhancementUNet(mcfg, seed=seed, dtype=tcfg.dtype)
    t0 = time.perf_counter()
    report = fit(model, batches, batches, tcfg)
    noisy_path, clean_path = ds.entry_paths(entries[0], out / "mix")
    noisy, clean = dsp.read_wav(noisy_path), dsp.read_wav(clean_path)
    enhanced = enhance_waveform(model, noisy)
    result = {
        "epochs": report.epochs_run,
        "first_train_loss": report.train_losses[0],
        "final_train_loss": report.train_losses[-1],
        "best_train_loss": min(report.train_losses),
        "loss_ratio": min(report.train_losses) / report.train_losses[0],
        "si_sdr_noisy_db": metrics.si_sdr(noisy, clean),
        "si_sdr_enhanced_db": metrics.si_sdr(enhanced, clean),
        "seconds": time.perf_counter() - t0,
    }
    result["si_sdr_gain_db"] = result["si_sdr_enhanced_db"] - result["si_sdr_noisy_db"]
    out.mkdir(parents=True, exist_ok=True)
    (out / "overfit.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    dsp.write_wav(out / "enhanced.wav", enhanced)
    return result


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs/overfit"))
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    print(json.dumps(run(args.out, args.channels, args.depth, args.epochs, args.lr, seed=args.seed), indent=2))


if __name__ == "__main__":
    main()
