"""ResNet U-Net with attention-gated skips and an optional reverse-attention wrapper.

Topology (depth D, base width C, widths ``w_i = min(C * 2**i, 8 * C)``)::

    stem 1x1 (2 -> C)
    encoder stage i:   ResBlock(w_i) -> e_i ; strided 3x3 conv (w_i -> w_{i+1})
    bottleneck:        ResBlock -> GN -> self-attention (residual) -> ResBlock
    decoder stage i:   1x1 align + 2x upsample of d_{i+1}, add gated e_i,
                       relu(ResBlock) -> d_i ; 3x3 head (w_i -> 2)
    output:            heads summed coarse-to-fine through 2x upsampling

With reverse attention a second encoder (own parameters, shared stem) runs
on the same stem features and three decoders are summed: one on the central
features ``E``, one on ``E - R * sigmoid(-E)`` and one on ``-E``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .dsp import RISpectrogram, StftConfig, WaveBuffer, istft, pad_to_multiple, spectrogram_scale, stft


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    depth: int = 4
    use_attention_gates: bool = True
    use_reverse_attention: bool = False
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.base_channels < 2:
            raise ValueError(f"base_channels must be >= 2, got {self.base_channels}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.use_reverse_attention and not self.use_attention_gates:
            raise ValueError("reverse attention wraps the attention-gated model; enable attention gates")

    def widths(self) -> list[int]:
        C = self.base_channels
        return [min(C * 2**i, 8 * C) for i in range(self.depth + 1)]

    @property
    def multiple(self) -> int:
        return 2**self.depth

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stft"] = self.stft.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["stft"] = StftConfig(**d.get("stft", {}))
        return cls(**d)


GATE_LOGIT_LIMIT = 30.0


def norm_groups(channels: int) -> int:
    """8 groups where possible, fewer for narrow or indivisible widths."""
    if channels < 8:
        return 1
    return max(g for g in range(1, 9) if channels % g == 0)


def gate_channels(x_channels: int) -> int:
    return max(x_channels // 2, 1)


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays in by name; every name and shape must match exactly."""
        own = dict(self.named_parameters())
        for name, p in own.items():
            if name not in state:
                raise KeyError(f"missing tensor {name!r} (expected shape {p.shape})")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"tensor {name!r}: shape {arr.shape} does not match model shape {p.shape}")
        extra = [n for n in state if n not in own]
        if extra:
            raise KeyError(f"unexpected tensor {extra[0]!r} not present in this model")
        for name, p in own.items():
            p.data = np.array(state[name], dtype=p.dtype, copy=True)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, dtype, stride=1, zero_init=False):
        self.stride = stride
        self.padding = kernel // 2
        fan_in = cin * kernel * kernel
        if zero_init:
            w = np.zeros((cout, cin, kernel, kernel))
        else:
            bound = math.sqrt(6.0 / fan_in)  # Kaiming-uniform, relu gain
            w = rng.uniform(-bound, bound, size=(cout, cin, kernel, kernel))
        self.weight = Parameter(w, dtype=dtype)
        self.bias = Parameter(np.zeros(cout), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, channels, dtype):
        self.groups = norm_groups(channels)
        self.weight = Parameter(np.ones(channels), dtype=dtype)
        self.bias = Parameter(np.zeros(channels), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.group_norm(x, self.groups, self.weight, self.bias)


class ResBlock(Module):
    """``shortcut(x) + GN(conv3(relu(GN(conv3(x)))))``; spatial size preserved."""

    def __init__(self, cin, cout, rng, dtype):
        self.conv1 = Conv2d(cin, cout, 3, rng, dtype)
        self.norm1 = GroupNorm(cout, dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, dtype)
        self.norm2 = GroupNorm(cout, dtype)
        self.shortcut = Conv2d(cin, cout, 1, rng, dtype) if cin != cout else None

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        s = x if self.shortcut is None else self.shortcut(x)
        return ad.add(s, h)


class Downsample(Module):
    def __init__(self, cin, cout, rng, dtype):
        self.conv = Conv2d(cin, cout, 3, rng, dtype, stride=2)

    def __call__(self, x: Tensor) -> Tensor:
        H, W = x.shape[-2:]
        if H % 2 or W % 2:
            raise ValueError(f"downsample needs even extents, got {H}x{W}; pad the spectrogram first")
        return self.conv(x)


class AttentionGate(Module):
    """Soft gate on a skip connection.

    ``alpha = up2(sigmoid(psi(relu(W_x(x; stride 2) + W_g(g)))))`` is computed
    at the gating signal's resolution and multiplied onto every channel of ``x``.
    """

    def __init__(self, x_channels, g_channels, rng, dtype):
        inter = gate_channels(x_channels)
        self.inter_channels = inter
        self.W_x = Conv2d(x_channels, inter, 1, rng, dtype, stride=2)
        self.W_g = Conv2d(g_channels, inter, 1, rng, dtype)
        self.psi = Conv2d(inter, 1, 1, rng, dtype)
        self.last_alpha: np.ndarray | None = None

    def coefficients(self, x: Tensor, g: Tensor) -> Tensor:
        if x.shape[0] != g.shape[0] or 2 * g.shape[2] != x.shape[2] or 2 * g.shape[3] != x.shape[3]:
            raise ValueError(f"gating signal {g.shape} must have half the spatial extent of input {x.shape}")
        a = ad.relu(ad.add(self.W_x(x), self.W_g(g)))
        # beyond |30| float64 rounds sigmoid to exactly 0 or 1
        return ad.sigmoid(ad.clip(self.psi(a), -GATE_LOGIT_LIMIT, GATE_LOGIT_LIMIT))

    def __call__(self, x: Tensor, g: Tensor) -> Tensor:
        alpha = self.coefficients(x, g)
        self.last_alpha = alpha.data
        full = ad.expand_channels(ad.upsample2x(alpha), x.shape[1])
        return ad.mul(full, x)


class Bottleneck(Module):
    def __init__(self, channels, rng, dtype):
        self.res1 = ResBlock(channels, channels, rng, dtype)
        self.attn_norm = GroupNorm(channels, dtype)
        self.query = Conv2d(channels, channels, 1, rng, dtype)
        self.key = Conv2d(channels, channels, 1, rng, dtype)
        self.value = Conv2d(channels, channels, 1, rng, dtype)
        self.out = Conv2d(channels, channels, 1, rng, dtype)
        self.res2 = ResBlock(channels, channels, rng, dtype)
        self.last_attention: np.ndarray | None = None

    def attend(self, h: Tensor) -> Tensor:
        """Single-head self-attention over the ``H*W`` positions, channels as features."""
        N, C, H, W = h.shape

        def seq(t):
            return ad.transpose(ad.reshape(t, (N, C, H * W)), (0, 2, 1))

        n = self.attn_norm(h)
        q, k, v = seq(self.query(n)), seq(self.key(n)), seq(self.value(n))
        self.last_attention = ad.attention_weights(q.data, k.data)
        a = ad.scaled_dot_attention(q, k, v)
        back = ad.reshape(ad.transpose(a, (0, 2, 1)), (N, C, H, W))
        return self.out(back)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.res1(x)
        h = ad.add(h, self.attend(h))
        return self.res2(h)


class EncoderStage(Module):
    def __init__(self, cin, cout, rng, dtype):
        self.res = ResBlock(cin, cin, rng, dtype)
        self.down = Downsample(cin, cout, rng, dtype)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        skip = self.res(x)
        return skip, self.down(skip)


class DecoderStage(Module):
    def __init__(self, in_channels, skip_channels, gated, rng, dtype):
        self.align = Conv2d(in_channels, skip_channels, 1, rng, dtype)
        self.gate = AttentionGate(skip_channels, in_channels, rng, dtype) if gated else None
        self.res = ResBlock(skip_channels, skip_channels, rng, dtype)
        self.head = Conv2d(skip_channels, 2, 3, rng, dtype, zero_init=True)

    def __call__(self, d_in: Tensor, skip: Tensor) -> tuple[Tensor, Tensor]:
        if skip.shape[2] != 2 * d_in.shape[2] or skip.shape[3] != 2 * d_in.shape[3]:
            raise ValueError(f"skip {skip.shape} must be twice the extent of decoder input {d_in.shape}")
        # a 1x1 conv commutes with nearest-neighbour upsampling; run it at low resolution
        u = ad.upsample2x(self.align(d_in))
        if u.shape[1] != skip.shape[1]:
            raise ValueError(f"aligned channels {u.shape[1]} != skip channels {skip.shape[1]}")
        s = skip if self.gate is None else self.gate(skip, d_in)
        d_out = ad.relu(self.res(ad.add(u, s)))
        return d_out, self.head(d_out)


def aggregate_heads(heads: list[Tensor]) -> Tensor:
    """Sum 2-channel heads (coarsest first), upsampling the running sum by 2 each step."""
    if not heads:
        raise ValueError("no heads to aggregate")
    running = heads[0]
    for h in heads[1:]:
        if h.shape[:2] != running.shape[:2] or h.shape[2] != 2 * running.shape[2] or h.shape[3] != 2 * running.shape[3]:
            raise ValueError(f"head {h.shape} is not a 2x refinement of {running.shape}")
        running = ad.add(ad.upsample2x(running), h)
    return running


class Features(NamedTuple):
    skips: list[Tensor]  # finest first
    bottom: Tensor


def encode(stages: list[EncoderStage], mid: Bottleneck, h: Tensor) -> Features:
    skips = []
    for stage in stages:
        skip, h = stage(h)
        skips.append(skip)
    return Features(skips, mid(h))


def decode(stages: list[DecoderStage], feats: Features) -> Tensor:
    d = feats.bottom
    heads = []
    for level in reversed(range(len(stages))):
        d, head = stages[level](d, feats.skips[level])
        heads.append(head)
    return aggregate_heads(heads)


def map_features(fn, *feats: Features) -> Features:
    return Features([fn(*xs) for xs in zip(*(f.skips for f in feats))], fn(*(f.bottom for f in feats)))


class EnhancementUNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        w = cfg.widths()
        D = cfg.depth
        ag = cfg.use_attention_gates
        self.stem = Conv2d(2, w[0], 1, rng, dtype)
        self.enc = [EncoderStage(w[i], w[i + 1], rng, dtype) for i in range(D)]
        self.mid = Bottleneck(w[D], rng, dtype)
        self.dec = [DecoderStage(w[i + 1], w[i], ag, rng, dtype) for i in range(D)]
        if cfg.use_reverse_attention:
            self.ra_enc = [EncoderStage(w[i], w[i + 1], rng, dtype) for i in range(D)]
            self.ra_mid = Bottleneck(w[D], rng, dtype)
            self.dec_m = [DecoderStage(w[i + 1], w[i], ag, rng, dtype) for i in range(D)]
            self.dec_r = [DecoderStage(w[i + 1], w[i], ag, rng, dtype) for i in range(D)]

    def gates(self) -> list[AttentionGate]:
        decoders = [self.dec]
        if self.cfg.use_reverse_attention:
            decoders += [self.dec_m, self.dec_r]
        return [s.gate for d in decoders for s in d if s.gate is not None]

    def _input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != 2:
            raise ValueError(f"model input must be [N,2,F,T], got {x.shape}")
        m = self.cfg.multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ValueError(f"spatial extent {x.shape[2:]} not a multiple of {m}; pad with dsp.pad_to_multiple")
        return x

    def branch_outputs(self, x) -> dict[str, Tensor]:
        """Per-decoder aggregated outputs; their sum is the forward output."""
        h = self.stem(self._input(x))
        central = encode(self.enc, self.mid, h)
        out = {"left": decode(self.dec, central)}
        if self.cfg.use_reverse_attention:
            reverse = encode(self.ra_enc, self.ra_mid, h)
            negative = map_features(lambda r, c: ad.mul(r, ad.sigmoid(ad.neg(c))), reverse, central)
            out["middle"] = decode(self.dec_m, map_features(ad.sub, central, negative))
            out["right"] = decode(self.dec_r, map_features(ad.neg, central))
        return out

    def __call__(self, x) -> Tensor:
        branches = list(self.branch_outputs(x).values())
        total = branches[0]
        for b in branches[1:]:
            total = ad.add(total, b)
        return total

    forward = __call__


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------


def param_count(cfg: ModelConfig) -> int:
    """Closed-form scalar parameter count, layer by layer."""

    def conv(cin, cout, k):
        return cout * (cin * k * k + 1)

    def res(cin, cout):
        n = conv(cin, cout, 3) + conv(cout, cout, 3) + 4 * cout  # two convs, two group norms
        return n + (conv(cin, cout, 1) if cin != cout else 0)

    w = cfg.widths()
    D = cfg.depth
    encoder = sum(res(w[i], w[i]) + conv(w[i], w[i + 1], 3) for i in range(D))
    bottleneck = 2 * res(w[D], w[D]) + 2 * w[D] + 4 * conv(w[D], w[D], 1)  # res blocks, attention norm, q/k/v/out

    def decoder_stage(i):
        n = conv(w[i + 1], w[i], 1) + res(w[i], w[i]) + conv(w[i], 2, 3)
        if cfg.use_attention_gates:
            k = gate_channels(w[i])
            n += conv(w[i], k, 1) + conv(w[i + 1], k, 1) + conv(k, 1, 1)
        return n

    decoder = sum(decoder_stage(i) for i in range(D))
    total = conv(2, w[0], 1) + encoder + bottleneck + decoder
    if cfg.use_reverse_attention:
        total += encoder + bottleneck + 2 * decoder
    return total


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------


def predict_spectrogram(model: EnhancementUNet, spec: RISpectrogram) -> RISpectrogram:
    """Pad, run the network without a tape, crop back to the input extent."""
    F, T = spec.data.shape[1:]
    x = pad_to_multiple(spec.data, model.cfg.multiple)[None].astype(model.dtype)
    with ad.no_grad():
        y = model(x).data[0, :, :F, :T]
    if not np.all(np.isfinite(y)):
        raise ad.NumericalError("network produced non-finite spectrogram values")
    return RISpectrogram(y.astype(np.float64), spec.config)


def enhance_waveform(model: EnhancementUNet, noisy: WaveBuffer) -> WaveBuffer:
    """Full enhancement path: normalize, STFT, network, ISTFT, undo normalization."""
    cfg = model.cfg.stft
    scale = spectrogram_scale(noisy.samples, cfg)
    spec = stft(noisy, cfg)
    spec.data = spec.data * scale
    est = predict_spectrogram(model, spec)
    est.data = est.data / scale
    out = istft(est, len(noisy))
    return WaveBuffer(out.samples, noisy.sample_rate_hz)
