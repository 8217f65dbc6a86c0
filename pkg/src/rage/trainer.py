"""Training loop: loss, Adam, early stopping and the binary checkpoint format."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Parameter, Tensor
from .dataset import Batch, SpectrogramBatches
from .model import EnhancementUNet, ModelConfig

log = logging.getLogger(__name__)

LOSS_KINDS = ("ri_mse", "ri_mse_plus_mag")
PRECISIONS = {"f32": np.float32, "f64": np.float64}
MAG_EPS = 1e-9
MAG_WEIGHT = 0.5


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    patience: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 2
    seed: int = 0
    loss_kind: str = "ri_mse_plus_mag"
    segment_seconds: float = 2.0
    grad_clip: float = 5.0
    precision: str = "f32"

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 < self.patience < self.max_epochs:
            raise ValueError(f"patience ({self.patience}) must be positive and below max_epochs ({self.max_epochs})")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {tuple(PRECISIONS)}, got {self.precision!r}")
        if not self.grad_clip > 0:
            raise ValueError("grad_clip must be > 0")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _magnitude(x: Tensor) -> Tensor:
    # a fixed all-ones 1x1 convolution sums the squared re/im channels
    ones = Tensor(np.ones((1, 2, 1, 1), dtype=x.dtype))
    return ad.sqrt(ad.add(ad.conv2d(ad.square(x), ones), MAG_EPS))


def loss(pred: Tensor, target, kind: str = "ri_mse_plus_mag") -> Tensor:
    """Spectrogram regression loss on [N,2,F,T] real/imaginary tensors."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ValueError(f"loss: prediction {pred.shape} and target {target.shape} differ in shape")
    if pred.ndim != 4 or pred.shape[1] != 2:
        raise ValueError(f"loss expects [N,2,F,T] tensors, got {pred.shape}")
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    value = ad.mean(ad.square(ad.sub(pred, target)))
    if kind == "ri_mse_plus_mag":
        target_mag = Tensor(_magnitude(target.detach()).data)
        value = ad.add(value, ad.mul(ad.mean(ad.square(ad.sub(_magnitude(pred), target_mag))), MAG_WEIGHT))
    return value


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of ``params`` and ``state``."""
    for p, g in zip(params, grads):
        if g is None or not np.all(np.isfinite(g)):
            raise NumericalError("non-finite or missing gradient passed to adam_step")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------


@dataclass
class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to strictly beat the best loss."""

    patience: int
    best: float = math.inf
    best_epoch: int = 0
    epochs_since_best: int = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value`` for 1-based ``epoch``; True when training should stop."""
        if value < self.best:
            self.best, self.best_epoch, self.epochs_since_best = value, epoch, 0
            return False
        self.epochs_since_best += 1
        return self.epochs_since_best >= self.patience


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

MAGIC = b"RAGE"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int
    best_val_loss: float | None
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)  # rng state, history, optimizer step
    format_version: int = FORMAT_VERSION

    def model_state(self, prefix: str = "model.") -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def build_model(self, dtype=None) -> EnhancementUNet:
        model = EnhancementUNet(self.model_config, dtype=dtype or self.train_config.dtype)
        model.load_state_dict(self.model_state())
        return model


def _header(ckpt: Checkpoint) -> bytes:
    doc = {
        "model": ckpt.model_config.to_dict(),
        "train": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "best_val_loss": ckpt.best_val_loss,
        "meta": ckpt.meta,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ckpt.format_version)]
    header = _header(ckpt)
    parts += [struct.pack("<I", len(header)), header]
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts += [struct.pack("<I", len(encoded)), encoded, struct.pack("<B", arr.ndim)]
        parts += [struct.pack("<Q", n) for n in arr.shape]
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def _expected_shapes(model_config: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {n: p.shape for n, p in EnhancementUNet(model_config).named_parameters()}


def parse_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < 16:
        raise CheckpointError(f"{source}: file too short ({len(raw)} bytes)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{source}: CRC mismatch (file corrupt or truncated)")
    if body[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {body[:4]!r}")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    (hlen,) = struct.unpack_from("<I", body, 8)
    doc = json.loads(body[12 : 12 + hlen].decode("utf-8"))
    pos = 12 + hlen
    tensors: dict[str, np.ndarray] = {}
    while pos < len(body):
        (nlen,) = struct.unpack_from("<I", body, pos)
        name = body[pos + 4 : pos + 4 + nlen].decode("utf-8")
        pos += 4 + nlen
        (rank,) = struct.unpack_from("<B", body, pos)
        shape = struct.unpack_from(f"<{rank}Q", body, pos + 1)
        pos += 1 + 8 * rank
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(body):
            raise CheckpointError(f"{source}: tensor {name!r} runs past end of file")
        tensors[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).copy()
        pos += nbytes
    ckpt = Checkpoint(
        model_config=ModelConfig.from_dict(doc["model"]),
        train_config=TrainConfig.from_dict(doc["train"]),
        epoch=doc["epoch"],
        best_val_loss=doc["best_val_loss"],
        tensors=tensors,
        meta=doc["meta"],
        format_version=version,
    )
    _validate_shapes(ckpt, source)
    return ckpt


def _validate_shapes(ckpt: Checkpoint, source: str) -> None:
    expected = _expected_shapes(ckpt.model_config)
    for prefix in ("model.", "best.", "adam.m.", "adam.v."):
        state = ckpt.model_state(prefix)
        if prefix != "model." and not state:
            continue
        for name, shape in expected.items():
            if name not in state:
                raise CheckpointError(f"{source}: missing tensor {prefix + name!r}")
            if state[name].shape != shape:
                raise CheckpointError(
                    f"{source}: tensor {prefix + name!r} has shape {state[name].shape}, topology expects {shape}")
        extra = sorted(set(state) - set(expected))
        if extra:
            raise CheckpointError(f"{source}: unexpected tensor {prefix + extra[0]!r}")


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


@dataclass
class TrainingReport:
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    best_val_loss: float
    stop_reason: str  # "max_epochs", "patience" or "epoch_limit"
    wall_time_s: float
    model_config: dict
    train_config: dict

    @property
    def epochs_run(self) -> int:
        return len(self.train_losses)

    def to_json(self) -> str:
        d = asdict(self)
        d["epochs_run"] = self.epochs_run
        return json.dumps(d, sort_keys=True, indent=2)


def _batch_loss(model: EnhancementUNet, batch: Batch, kind: str) -> Tensor:
    F, T = batch.frames
    pred = ad.crop(model(batch.noisy.astype(model.dtype)), F, T)
    return loss(pred, batch.clean[:, :, :F, :T].astype(model.dtype), kind)


def validation_loss(model: EnhancementUNet, batches: SpectrogramBatches, seed: int, kind: str) -> float:
    """Mean batch loss over one fixed-seed pass, with no tape and no updates."""
    with ad.no_grad():
        values = [_batch_loss(model, b, kind).item() for b in batches.epoch(seed)]
    return float(np.mean(values))


def _grads_or_raise(named: list[tuple[str, Parameter]], epoch: int, batch: Batch) -> list[np.ndarray]:
    grads = []
    for name, p in named:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"epoch {epoch}: non-finite gradient in {name} for batch {batch.ids}")
        grads.append(g)
    return grads


def _snapshot(named) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in named}


def fit(
    model: EnhancementUNet,
    train: SpectrogramBatches,
    val: SpectrogramBatches,
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
    epoch_limit: int | None = None,
) -> TrainingReport:
    """Train with Adam until ``max_epochs`` or early stopping.

    With ``out_dir`` the full training state goes to ``last.ckpt`` after every
    epoch and the best-validation weights to ``best.ckpt``.  ``resume`` takes a
    checkpoint (or path) written as ``last.ckpt`` and continues from it.
    ``epoch_limit`` halts after that many total epochs without restoring the
    best weights, leaving a resumable state behind.
    """
    if len(train.entries) == 0 or len(val.entries) == 0:
        raise ValueError("training and validation splits must be non-empty")
    named = list(model.named_parameters())
    params = [p for _, p in named]
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.patience)
    train_losses: list[float] = []
    val_losses: list[float] = []
    best = _snapshot(named)
    start_epoch = 0

    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if ckpt.model_config != model.cfg:
            raise ValueError("resume checkpoint was written for a different model configuration")
        model.load_state_dict(ckpt.model_state())
        state = AdamState([ckpt.tensors["adam.m." + n].astype(model.dtype) for n, _ in named],
                          [ckpt.tensors["adam.v." + n].astype(model.dtype) for n, _ in named],
                          ckpt.meta["adam_step"])
        best = {n: a.astype(model.dtype) for n, a in ckpt.model_state("best.").items()}
        rng.bit_generator.state = ckpt.meta["rng_state"]
        train_losses = list(ckpt.meta["train_losses"])
        val_losses = list(ckpt.meta["val_losses"])
        stopper = EarlyStopping(cfg.patience, math.inf if ckpt.best_val_loss is None else ckpt.best_val_loss,
                                ckpt.meta["best_epoch"], ckpt.meta["epochs_since_best"])
        start_epoch = ckpt.epoch
        log.info("resuming from epoch %d", start_epoch)

    out = Path(out_dir) if out_dir is not None else None
    t0 = time.perf_counter()
    stop_reason = "max_epochs"
    val_seed = cfg.seed + 1
    for epoch in range(start_epoch + 1, cfg.max_epochs + 1):
        epoch_seed = int(rng.integers(0, 2**31 - 1))
        batch_losses = []
        for batch in train.epoch(epoch_seed):
            model.zero_grad()
            value = _batch_loss(model, batch, cfg.loss_kind)
            if not math.isfinite(value.item()):
                raise NumericalError(f"epoch {epoch}: non-finite loss for batch {batch.ids}")
            value.backward()
            grads = _grads_or_raise(named, epoch, batch)
            clip_grad_norm(grads, cfg.grad_clip)
            adam_step(params, grads, state, cfg.learning_rate)
            batch_losses.append(value.item())
        model.zero_grad()
        train_losses.append(float(np.mean(batch_losses)))
        val_losses.append(validation_loss(model, val, val_seed, cfg.loss_kind))
        if not math.isfinite(val_losses[-1]):
            raise NumericalError(f"epoch {epoch}: non-finite validation loss")
        stop = stopper.update(epoch, val_losses[-1])
        if stopper.best_epoch == epoch:
            best = _snapshot(named)
        log.info("epoch %d train %.6g val %.6g%s", epoch, train_losses[-1], val_losses[-1],
                 " *" if stopper.best_epoch == epoch else "")
        if out is not None:
            meta = {
                "adam_step": state.step,
                "rng_state": rng.bit_generator.state,
                "train_losses": train_losses,
                "val_losses": val_losses,
                "best_epoch": stopper.best_epoch,
                "epochs_since_best": stopper.epochs_since_best,
            }
            tensors = {"model." + n: p.data for n, p in named}
            tensors.update({"adam.m." + n: m for (n, _), m in zip(named, state.m)})
            tensors.update({"adam.v." + n: v for (n, _), v in zip(named, state.v)})
            tensors.update({"best." + n: a for n, a in best.items()})
            save_checkpoint(out / "last.ckpt", Checkpoint(model.cfg, cfg, epoch, stopper.best, tensors, meta))
            if stopper.best_epoch == epoch:
                save_checkpoint(out / "best.ckpt", Checkpoint(
                    model.cfg, cfg, epoch, stopper.best, {"model." + n: a for n, a in best.items()},
                    {"best_epoch": epoch}))
        if stop:
            stop_reason = "patience"
            break
        if epoch_limit is not None and epoch >= epoch_limit:
            stop_reason = "epoch_limit"
            break

    if stop_reason != "epoch_limit":
        model.load_state_dict(best)
    report = TrainingReport(train_losses, val_losses, stopper.best_epoch, stopper.best, stop_reason,
                            time.perf_counter() - t0, model.cfg.to_dict(), cfg.to_dict())
    if out is not None:
        (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return report
