"""Train the attention-gate model on a small synthetic corpus and compare it to passthrough.

    python3 scripts/mini_experiment.py --out runs/mini [--epochs 30]

Also runs a plateau check: a tiny model trained against a validation curve that
stops improving must halt exactly ``patience`` epochs after its best epoch.
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path
from unittest import mock

from rage import dataset as ds
from rage import metrics, synth
from rage import trainer as tr
from rage.model import EnhancementUNet, ModelConfig, enhance_waveform

NOISES = ("white", "rotor")
SPLITS = (20, 10, 10)  # train, val, test


def build_corpus(out: Path, n_files: int = 40, seconds: float = 2.0, splits=SPLITS,
                 seed: int = 0) -> list[ds.ManifestEntry]:
    clean_dir, noise_dir = synth.write_corpus(out / "raw", n_clean=n_files, noise_kinds=NOISES, seconds=seconds,
                                              noise_seconds=4 * seconds, seed=seed)
    entries = ds.build_manifest(clean_dir, noise_dir, split_counts=splits, seed=seed)
    entries = ds.materialize_all(entries, out / "mix")
    ds.write_manifest(out / "mix" / "manifest.jsonl", entries)
    return entries


def train_and_compare(out: Path, epochs: int = 30, patience: int = 10, channels: int = 16, depth: int = 4,
                      seed: int = 0) -> dict:
    entries = build_corpus(out, seed=seed)
    mcfg = ModelConfig(base_channels=channels, depth=depth, use_attention_gates=True)
    tcfg = tr.TrainConfig(max_epochs=epochs, patience=patience, batch_size=2, seed=seed)
    train, val = (ds.SpectrogramBatches(entries, out / "mix", split, tcfg.batch_size, tcfg.segment_seconds,
                                        mcfg.stft, mcfg.multiple) for split in ("train", "val"))
    model = EnhancementUNet(mcfg, seed=seed, dtype=tcfg.dtype)
    t0 = time.perf_counter()
    report = tr.fit(model, train, val, tcfg, out_dir=out / "run")
    passthrough = metrics.evaluate(entries, out / "mix")
    enhanced = metrics.evaluate(entries, out / "mix", enhancer=lambda w: enhance_waveform(model, w),
                                source=str(out / "run" / "best.ckpt"))
    (out / "eval_passthrough.json").write_text(passthrough.to_json())
    (out / "eval_model.json").write_text(enhanced.to_json())
    return {
        "epochs_run": report.epochs_run,
        "stop_reason": report.stop_reason,
        "best_epoch": report.best_epoch,
        "train_losses": report.train_losses,
        "val_losses": report.val_losses,
        "si_sdr_passthrough_db": passthrough.overall()["enhanced"]["si_sdr_db"],
        "si_sdr_enhanced_db": enhanced.overall()["enhanced"]["si_sdr_db"],
        "table": enhanced.to_table(),
        "seconds": time.perf_counter() - t0,
    }


def plateau_check(out: Path, patience: int = 10, improve_for: int = 5, max_epochs: int = 60) -> dict:
    """Feed ``fit`` a validation curve that improves for ``improve_for`` epochs, then stays flat."""
    entries = build_corpus(out, n_files=4, seconds=0.5, splits=(2, 2, 0))
    mcfg = ModelConfig(base_channels=2, depth=1, use_attention_gates=True)
    tcfg = tr.TrainConfig(max_epochs=max_epochs, patience=patience, batch_size=2, segment_seconds=0.25)
    train, val = (ds.SpectrogramBatches(entries, out / "mix", split, 2, 0.25, mcfg.stft, mcfg.multiple)
                  for split in ("train", "val"))
    curve = iter([1.0 / (k + 1) for k in range(improve_for)] + [1.0 / improve_for] * max_epochs)
    with mock.patch.object(tr, "validation_loss", lambda *a, **k: next(curve)):
        report = tr.fit(EnhancementUNet(mcfg, dtype=tcfg.dtype), train, val, tcfg)
    return {"stop_reason": report.stop_reason, "best_epoch": report.best_epoch, "epochs_run": report.epochs_run,
            "expected_epochs": improve_for + patience}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs/mini"))
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    result = {"plateau": plateau_check(args.out / "plateau", args.patience),
              "experiment": train_and_compare(args.out / "corpus", args.epochs, args.patience, seed=args.seed)}
    print(result["experiment"].pop("table"))
    (args.out / "mini.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    summary = {"experiment": {k: v for k, v in result["experiment"].items() if not k.endswith("losses")},
               "plateau": result["plateau"]}
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
