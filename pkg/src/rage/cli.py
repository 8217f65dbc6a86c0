"""Command-line entry point: ``rage <command> [flags]``.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("rage")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _snr_list(value: str) -> tuple[float, ...]:
    try:
        snrs = tuple(float(v) for v in value.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad SNR list {value!r}") from exc
    if not snrs:
        raise argparse.ArgumentTypeError("empty SNR list")
    return snrs


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--channels", type=int, default=16, help="base channel count C (16 or 32 for the named configurations)")
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--ag", type=_on_off, default=True, metavar="{on,off}", help="attention gates on skips")
    p.add_argument("--ra", type=_on_off, default=False, metavar="{on,off}", help="reverse-attention decoders")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rage", description="Spectrogram U-Net speech enhancement toolkit.")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--sample-rate", type=int, default=16000)
    parser.add_argument("--precision", choices=("f32", "f64"), default="f32")
    parser.add_argument("--threads", type=int, default=None, help="worker cap (also read from RAGE_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic clean/noise corpus")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n-clean", type=int, default=40)
    p.add_argument("--noises", default="white,babble", help="comma list from: white,pink,hum,babble,rotor")
    p.add_argument("--seconds", type=float, default=2.5)
    p.add_argument("--noise-seconds", type=float, default=6.0)

    p = sub.add_parser("mix", help="build a manifest and materialize noisy/clean pairs")
    p.add_argument("--clean-dir", required=True, type=Path)
    p.add_argument("--noise-dir", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--snrs", type=_snr_list, default=(-3.0, 0.0, 3.0, 6.0, 12.0))
    p.add_argument("--per-noise", type=int, default=None)
    p.add_argument("--val", type=int, default=10, help="clean files held out for validation")
    p.add_argument("--test", type=int, default=10, help="clean files held out for testing")

    p = sub.add_parser("train", help="train a model on a materialized manifest")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--data-dir", type=Path, default=None, help="defaults to the manifest's directory")
    _model_flags(p)
    p.add_argument("--out", required=True, type=Path, help="run directory for best.ckpt, last.ckpt, report.json")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--segment-seconds", type=float, default=2.0)
    p.add_argument("--loss", choices=("ri_mse", "ri_mse_plus_mag"), default="ri_mse_plus_mag")
    p.add_argument("--resume", type=Path, default=None, help="last.ckpt to continue from")

    p = sub.add_parser("enhance", help="enhance one WAV file")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("eval", help="score the test split, grouped by SNR and noise")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", type=Path)
    src.add_argument("--passthrough", action="store_true", help="score the noisy input itself")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--data-dir", type=Path, default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path, default=None, help="report JSON path")

    p = sub.add_parser("info", help="topology and parameter counts")
    _model_flags(p)

    sub.add_parser("self-test", help="finite-difference check of every autodiff op (float64)")
    return parser


def _resolved(args: argparse.Namespace) -> dict:
    d = {}
    for k, v in sorted(vars(args).items()):
        d[k] = str(v) if isinstance(v, Path) else list(v) if isinstance(v, tuple) else v
    return d


def _model_config(args):
    from .model import ModelConfig

    ag = args.ag
    if args.ra and not ag:
        log.warning("--ra on requires attention gates; enabling --ag on")
        ag = args.ag = True
    return ModelConfig(base_channels=args.channels, depth=args.depth, use_attention_gates=ag,
                       use_reverse_attention=args.ra)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synth import NOISE_KINDS, write_corpus

    kinds = tuple(k.strip() for k in args.noises.split(",") if k.strip())
    bad = [k for k in kinds if k not in NOISE_KINDS]
    if bad:
        raise ValueError(f"unknown noise kind(s) {bad}; choose from {NOISE_KINDS}")
    clean_dir, noise_dir = write_corpus(args.out, args.n_clean, kinds, args.seconds, args.noise_seconds,
                                        args.sample_rate, args.seed)
    print(f"wrote {args.n_clean} clean files to {clean_dir} and {len(kinds)} noise files to {noise_dir}")
    return EXIT_OK


def cmd_mix(args) -> int:
    from . import dataset as ds

    entries = ds.build_manifest(args.clean_dir, args.noise_dir, args.snrs, args.per_noise,
                                seed=args.seed, split_counts=(0, args.val, args.test))
    entries = ds.materialize_all(entries, args.out, args.sample_rate)
    ds.write_manifest(args.out / "manifest.jsonl", entries)
    counts = {s: sum(e.split == s for e in entries) for s in ds.SPLITS}
    rescaled = sum(e.peak_rescale < 1.0 for e in entries)
    print(f"materialized {len(entries)} pairs {counts} into {args.out} ({rescaled} peak-rescaled)")
    return EXIT_OK


def _data_dir(args) -> Path:
    return args.data_dir if args.data_dir is not None else args.manifest.parent


def cmd_train(args) -> int:
    from . import dataset as ds
    from .model import EnhancementUNet, param_count
    from .trainer import TrainConfig, fit

    mcfg = _model_config(args)
    tcfg = TrainConfig(max_epochs=args.epochs, patience=args.patience, learning_rate=args.lr,
                       batch_size=args.batch_size, seed=args.seed, loss_kind=args.loss,
                       segment_seconds=args.segment_seconds, precision=args.precision)
    entries = ds.read_manifest(args.manifest)
    data_dir = _data_dir(args)
    batches = {split: ds.SpectrogramBatches(entries, data_dir, split, tcfg.batch_size, tcfg.segment_seconds,
                                            mcfg.stft, mcfg.multiple) for split in ("train", "val")}
    model = EnhancementUNet(mcfg, seed=args.seed, dtype=tcfg.dtype)
    print(f"model: {param_count(mcfg):,} parameters; train {len(batches['train'].entries)} "
          f"files, val {len(batches['val'].entries)} files")
    report = fit(model, batches["train"], batches["val"], tcfg, out_dir=args.out, resume=args.resume)
    print(f"stopped after {report.epochs_run} epochs ({report.stop_reason}); best val loss "
          f"{report.best_val_loss:.6g} at epoch {report.best_epoch}; checkpoint {args.out / 'best.ckpt'}")
    return EXIT_OK


def _load_model(path: Path, precision: str):
    from .trainer import PRECISIONS, load_checkpoint

    return load_checkpoint(path).build_model(PRECISIONS[precision])


def cmd_enhance(args) -> int:
    from .dsp import read_wav, write_wav
    from .model import enhance_waveform

    model = _load_model(args.ckpt, args.precision)
    noisy = read_wav(args.input, expected_rate=args.sample_rate)
    est = enhance_waveform(model, noisy)
    write_wav(args.out, est)
    print(f"wrote {len(est)} samples to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import dataset as ds
    from .metrics import evaluate
    from .model import enhance_waveform

    entries = ds.read_manifest(args.manifest)
    if args.passthrough:
        enhancer, source = None, None
    else:
        model = _load_model(args.ckpt, args.precision)
        enhancer, source = (lambda w: enhance_waveform(model, w)), str(args.ckpt)
    report = evaluate(entries, _data_dir(args), enhancer, args.split, source=source)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(report.to_json(), encoding="utf-8")
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_info(args) -> int:
    from dataclasses import replace

    from .model import EnhancementUNet, param_count

    cfg = _model_config(args)
    model = EnhancementUNet(cfg)
    live = model.num_parameters()
    closed = param_count(cfg)
    print(f"config: C={cfg.base_channels} D={cfg.depth} AG={'on' if cfg.use_attention_gates else 'off'} "
          f"RA={'on' if cfg.use_reverse_attention else 'off'}; input extents must be multiples of {cfg.multiple}")
    print(f"{'level':>5}  {'width':>5}  {'resolution':>10}")
    for i, w in enumerate(cfg.widths()):
        print(f"{i:>5}  {w:>5}  {'1/' + str(2**i):>10}")
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        groups[top] = groups.get(top, 0) + p.size
    print(f"{'component':<10}  {'parameters':>12}")
    for top, n in groups.items():
        print(f"{top:<10}  {n:>12,}")
    print(f"total (live sum)     {live:,}")
    print(f"total (closed form)  {closed:,}  {'match' if live == closed else 'MISMATCH'}")
    ag_cfg = replace(cfg, use_attention_gates=True, use_reverse_attention=False)
    ra_cfg = replace(cfg, use_attention_gates=True, use_reverse_attention=True)
    ag_n, ra_n = param_count(ag_cfg), param_count(ra_cfg)
    print(f"AG-only {ag_n:,}  with RA {ra_n:,}  RA/AG ratio {ra_n / ag_n:.4f}")
    return EXIT_OK if live == closed else EXIT_NUMERIC


def cmd_self_test(args) -> int:
    from .selfcheck import FD_TOL, self_test

    ok, worst, seconds = self_test()
    for name, err in worst.items():
        print(f"{'ok  ' if err <= FD_TOL else 'FAIL'}  {name:<22} max rel err {err:.2e}")
    print(f"{'passed' if ok else 'FAILED'}: {len(worst)} ops, tolerance {FD_TOL:g}, {seconds:.1f}s (float64)")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "synth": cmd_synth, "mix": cmd_mix, "train": cmd_train, "enhance": cmd_enhance,
    "eval": cmd_eval, "info": cmd_info, "self-test": cmd_self_test,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    if args.command == "self-test":
        args.precision = "f64"
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        os.environ["RAGE_THREADS"] = str(args.threads)
    args.threads = int(os.environ.get("RAGE_THREADS", "1"))
    if args.command in ("train", "info"):
        try:
            _model_config(args)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    print("resolved config: " + json.dumps(_resolved(args), sort_keys=True))

    from .dataset import MaterializeError
    from .metrics import MissingFilesError
    from .trainer import CheckpointError, NumericalError

    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, MaterializeError, MissingFilesError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
