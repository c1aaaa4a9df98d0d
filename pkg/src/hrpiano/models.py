"""HRplus (dilated CRNN with conditioning) and HRplus-hybrid (CRNN encoder + NR decoder)."""
from __future__ import annotations

import ast
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import torch
from torch import nn

from .labels import ModelOutputs
from .midi import N_KEYS
from .nn import (BiGRU, Conv2d, FeedForward, InstanceNorm, LayerNorm, Linear,
                 MultiHeadAttention, check_finite, maxpool_freq, param_breakdown, param_count)

N_BINS = 352
BINS_PER_OCTAVE = 48


def harmonic_dilations(q: int = BINS_PER_OCTAVE, k_max: int = 9) -> tuple:
    """Bin distance from a fundamental to each overtone 2..k_max on a Q-bins-per-octave axis."""
    if q < 1 or k_max < 2:
        raise ValueError("need Q >= 1 and k_max >= 2")
    return tuple(int(round(q * math.log2(k))) for k in range(2, k_max + 1))


@dataclass(frozen=True)
class DilatedBlockConfig:
    entry_channels: tuple = (16, 16, 32)
    entry_kernel: int = 7
    dilated_channels: int = 64
    dilation_rates: tuple = harmonic_dilations(48, 9)
    merge_dilation: int = 48
    pool: int = 4
    post_pool_dilation: int = 12
    tail_channels: tuple = (32, 16, 6)
    tail_kernel: int = 5

    @property
    def out_channels(self) -> int:
        return self.tail_channels[-1]


@dataclass(frozen=True)
class HRplusConfig:
    block: DilatedBlockConfig = DilatedBlockConfig()
    gru_hidden: int = 128
    cond_hidden: int = 64
    n_bins: int = N_BINS


@dataclass(frozen=True)
class HybridConfig:
    block: DilatedBlockConfig = DilatedBlockConfig()
    gru_hidden: int = 64
    d_model: int = 96
    heads: int = 4
    ffn: int = 192
    decoder_blocks: int = 4
    max_frames: int = 1001
    n_bins: int = N_BINS


def toy_block(width: int = 2, kernel: int | None = None) -> DilatedBlockConfig:
    """Same layout as the default block with every channel count set to ``width``."""
    cfg = DilatedBlockConfig(entry_channels=(width,) * 3, dilated_channels=width,
                             tail_channels=(width,) * 3)
    if kernel is not None:
        cfg = replace(cfg, entry_kernel=kernel, tail_kernel=kernel)
    return cfg


# ---------------------------------------------------------------------------

class _ConvNormReLU(nn.Module):
    def __init__(self, cin, cout, kernel, dilation=(1, 1)):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, dilation)
        self.norm = InstanceNorm(cout)

    def forward(self, x):
        return torch.relu(self.norm(self.conv(x)))


class HarmonicConv(nn.Module):
    """Parallel 1 x 3 convolutions at harmonic dilations, outputs summed."""

    def __init__(self, cin, cout, dilations):
        super().__init__()
        self.dilations = tuple(dilations)
        self.convs = nn.ModuleList(Conv2d(cin, cout, (1, 3), (1, d)) for d in self.dilations)

    def forward(self, x):
        return sum(conv(x) for conv in self.convs)


class DilatedBlock(nn.Module):
    """Spectrogram N x 1 x T x 352 -> features N x C x T x 88."""

    def __init__(self, cfg: DilatedBlockConfig, n_bins: int = N_BINS):
        super().__init__()
        self.cfg, self.n_bins = cfg, n_bins
        if n_bins % cfg.pool:
            raise ValueError(f"{n_bins} bins do not pool by {cfg.pool}")
        chans = (1,) + tuple(cfg.entry_channels)
        k = cfg.entry_kernel
        self.entry = nn.ModuleList(_ConvNormReLU(a, b, (k, k)) for a, b in zip(chans, chans[1:]))
        self.harmonic = HarmonicConv(chans[-1], cfg.dilated_channels, cfg.dilation_rates)
        self.merge = _ConvNormReLU(cfg.dilated_channels, cfg.dilated_channels, (1, 3),
                                   (1, cfg.merge_dilation))
        self.post_pool = _ConvNormReLU(cfg.dilated_channels, cfg.dilated_channels, (1, 3),
                                       (1, cfg.post_pool_dilation))
        tail = (cfg.dilated_channels,) + tuple(cfg.tail_channels)
        self.tail = nn.ModuleList(
            _ConvNormReLU(a, b, (cfg.tail_kernel, 1)) for a, b in zip(tail, tail[1:]))

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[-1] != self.n_bins:
            raise ValueError(f"expected N x 1 x T x {self.n_bins} input, got {tuple(x.shape)}")
        for layer in self.entry:
            x = layer(x)
        x = self.harmonic(x)
        x = maxpool_freq(self.merge(x), self.cfg.pool)
        x = self.post_pool(x)
        for layer in self.tail:
            x = layer(x)
        return x


def _frames(features):
    """N x C x T x K -> N x T x (C*K)."""
    n, c, t, k = features.shape
    return features.permute(0, 2, 1, 3).reshape(n, t, c * k)


def _as_batch(x):
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    return x


class AcousticHead(nn.Module):
    """Dilated block -> biGRU -> linear -> sigmoid, one T x 88 plane."""

    def __init__(self, block: DilatedBlockConfig, hidden: int, n_bins: int = N_BINS):
        super().__init__()
        self.block = DilatedBlock(block, n_bins)
        self.gru = BiGRU(block.out_channels * n_bins // block.pool, hidden)
        self.fc = Linear(2 * hidden, N_KEYS)

    def forward(self, x):
        return torch.sigmoid(self.fc(self.gru(_frames(self.block(x)))))


class Conditioner(nn.Module):
    """Concatenated T x 88 planes -> biGRU -> linear -> sigmoid."""

    def __init__(self, n_inputs: int, hidden: int):
        super().__init__()
        self.gru = BiGRU(n_inputs * N_KEYS, hidden)
        self.fc = Linear(2 * hidden, N_KEYS)

    def forward(self, *planes):
        return torch.sigmoid(self.fc(self.gru(torch.cat(planes, dim=-1))))


class HRplus(nn.Module):
    def __init__(self, cfg: HRplusConfig = HRplusConfig()):
        super().__init__()
        self.cfg = cfg
        self.frame_head = AcousticHead(cfg.block, cfg.gru_hidden, cfg.n_bins)
        self.onset_head = AcousticHead(cfg.block, cfg.gru_hidden, cfg.n_bins)
        self.offset_head = AcousticHead(cfg.block, cfg.gru_hidden, cfg.n_bins)
        self.velocity_head = AcousticHead(cfg.block, cfg.gru_hidden, cfg.n_bins)
        self.onset_cond = Conditioner(2, cfg.cond_hidden)
        self.frame_cond = Conditioner(3, cfg.cond_hidden)

    def forward(self, x) -> ModelOutputs:
        x = _as_batch(x)
        vel = self.velocity_head(x)
        off = self.offset_head(x)
        on = self.onset_cond(vel, self.onset_head(x))
        frame = self.frame_cond(on, off, self.frame_head(x))
        return ModelOutputs(on, off, frame, vel)


class DecoderBlock(nn.Module):
    """Pre-norm self-attention, cross-attention and feed-forward, each residual."""

    def __init__(self, dim, heads, ffn):
        super().__init__()
        self.norm_self = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm_cross = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn)

    def forward(self, q, memory):
        h = self.norm_self(q)
        q = q + self.self_attn(h, h)
        q = q + self.cross_attn(self.norm_cross(q), memory)
        return q + self.ffn(self.norm_ffn(q))


class HRplusHybrid(nn.Module):
    accepts_offsets = True

    def __init__(self, cfg: HybridConfig = HybridConfig()):
        super().__init__()
        self.cfg = cfg
        self.block = DilatedBlock(cfg.block, cfg.n_bins)
        self.gru = BiGRU(cfg.block.out_channels * cfg.n_bins // cfg.block.pool, cfg.gru_hidden)
        self.project = Linear(2 * cfg.gru_hidden, cfg.d_model)
        self.positions = nn.Parameter(torch.randn(cfg.max_frames, cfg.d_model) * 0.02)
        self.decoder = nn.ModuleList(
            DecoderBlock(cfg.d_model, cfg.heads, cfg.ffn) for _ in range(cfg.decoder_blocks))
        self.fc = Linear(cfg.d_model, 4 * N_KEYS)

    def encode(self, x):
        return self.project(self.gru(_frames(self.block(x))))

    def forward(self, x, offsets=None) -> ModelOutputs:
        """``offsets`` gives, per batch item, the absolute frame index of its
        first frame, so crops of a segment use the matching query rows."""
        x = _as_batch(x)
        n, t = x.shape[0], x.shape[2]
        if offsets is None:
            offsets = torch.zeros(n, dtype=torch.long)
        offsets = torch.as_tensor(offsets, dtype=torch.long).reshape(-1).expand(n)
        if int(offsets.min()) < 0 or int(offsets.max()) + t > self.cfg.max_frames:
            raise ValueError(f"frames {int(offsets.max())}..{int(offsets.max()) + t} exceed the "
                             f"{self.cfg.max_frames}-row query table")
        pos = self.positions[offsets[:, None] + torch.arange(t)]
        # positions also tag the memory so query i can find encoder frame i
        memory = self.encode(x) + pos
        q = pos
        for block in self.decoder:
            q = block(q, memory)
        out = torch.sigmoid(self.fc(q))
        on, off, frame, vel = out.split(N_KEYS, dim=-1)
        return ModelOutputs(on, off, frame, vel)


def build_model(cfg) -> nn.Module:
    if isinstance(cfg, HRplusConfig):
        return HRplus(cfg)
    if isinstance(cfg, HybridConfig):
        return HRplusHybrid(cfg)
    raise TypeError(f"unknown model config {type(cfg).__name__}")


def count_model_params(cfg) -> int:
    return param_count(build_model(cfg))


def param_report(cfg) -> str:
    model = build_model(cfg)
    lines = [f"{name:60s} {str(shape):>22s} {count:>10d}" for name, shape, count in param_breakdown(model)]
    lines.append(f"{'total':60s} {'':>22s} {param_count(model):>10d}")
    return "\n".join(lines)


def forward_checked(model, x, offsets=None) -> ModelOutputs:
    if offsets is not None and getattr(model, "accepts_offsets", False):
        out = model(x, offsets=offsets)
    else:
        out = model(x)
    for name, plane in zip(("on", "off", "frame", "vel"), out.planes()):
        check_finite(plane, f"{name} output")
    return out


# ---------------------------------------------------------------------------
# plain-text key = value configuration

_BLOCK_KEYS = {f.name for f in fields(DilatedBlockConfig)}


def _parse_value(text: str):
    text = text.strip()
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if "," in text:
            return tuple(_parse_value(p) for p in text.split(",") if p.strip())
        return text
    return tuple(value) if isinstance(value, list) else value


def read_key_values(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def model_config_from_dict(values: dict):
    values = dict(values)
    kind = values.pop("model", "hrplus")
    if kind not in ("hrplus", "hybrid"):
        raise ValueError(f"model must be 'hrplus' or 'hybrid', got {kind!r}")
    base = HRplusConfig() if kind == "hrplus" else HybridConfig()
    block_args = {k: values.pop(k) for k in list(values) if k in _BLOCK_KEYS}
    top = {f.name for f in fields(base)} - {"block"}
    unknown = set(values) - top
    if unknown:
        raise ValueError(f"unknown {kind} config keys: {sorted(unknown)}")
    for k, v in block_args.items():
        if isinstance(getattr(base.block, k), tuple):
            block_args[k] = tuple(v) if isinstance(v, (list, tuple)) else (v,)
    return replace(base, block=replace(base.block, **block_args), **values)


def load_model_config(path):
    return model_config_from_dict(read_key_values(path))


def model_config_text(cfg) -> str:
    kind = "hrplus" if isinstance(cfg, HRplusConfig) else "hybrid"
    lines = [f"model = {kind}"]
    for f in fields(cfg.block):
        v = getattr(cfg.block, f.name)
        lines.append(f"{f.name} = {', '.join(map(str, v)) if isinstance(v, tuple) else v}")
    for f in fields(cfg):
        if f.name != "block":
            lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"
