"""Layer set shared by both architectures, on top of torch autograd.

Every layer here is written out explicitly (padding, normalisation
statistics, attention weights) instead of using the torch.nn composites, so
the arithmetic is visible and can be finite-difference checked.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class NumericalError(FloatingPointError):
    """A NaN or Inf appeared in a loss, activation or gradient."""


def glorot_(w: torch.Tensor, fan_in: int, fan_out: int) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        return w.uniform_(-bound, bound)


def orthogonal_(w: torch.Tensor) -> torch.Tensor:
    """Fill each square block of ``w`` (stacked gates) with a QR-orthogonalised Gaussian."""
    rows, cols = w.shape
    with torch.no_grad():
        for start in range(0, rows, cols):
            block = torch.randn(cols, cols, dtype=torch.float64)
            q, r = torch.linalg.qr(block)
            q = q * torch.sign(torch.diagonal(r))
            w[start:start + cols] = q[: min(cols, rows - start)].to(w.dtype)
    return w


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# functional forms

def conv2d(x, weight, bias=None, dilation=(1, 1)):
    """'Same' cross-correlation with symmetric zero padding; kernels must be odd."""
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError("conv2d expects N x C x T x F input and O x C x kT x kF weights")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, weights expect {weight.shape[1]}")
    kt, kf = weight.shape[2:]
    dt, df = dilation
    if dt < 1 or df < 1:
        raise ValueError("dilation must be >= 1")
    if kt % 2 == 0 or kf % 2 == 0:
        raise ValueError("'same' padding needs odd kernel sizes")
    pad = (dt * (kt - 1) // 2, df * (kf - 1) // 2)
    return F.conv2d(x, weight, bias, padding=pad, dilation=(dt, df))


def instance_norm(x, gamma, beta, eps=1e-5):
    t, f = x.shape[-2:]
    if t * f <= 1:
        raise ValueError("instance norm needs more than one element per plane")
    mean = x.mean(dim=(-2, -1), keepdim=True)
    centred = x - mean
    var = (centred * centred).mean(dim=(-2, -1), keepdim=True)
    # zero-variance planes come out as beta
    y = centred / torch.sqrt(var + eps)
    return y * gamma.view(1, -1, 1, 1) + beta.view(1, -1, 1, 1)


def maxpool_freq(x, size=4):
    f = x.shape[-1]
    if f % size:
        raise ValueError(f"frequency axis {f} not divisible by pool size {size}")
    return x.unflatten(-1, (f // size, size)).amax(dim=-1)


def attention(q, k, v, heads):
    """Unmasked scaled dot-product attention over already-projected q, k, v (N x T x D)."""
    n, tq, d = q.shape
    if d % heads:
        raise ValueError(f"model width {d} not divisible by {heads} heads")
    dh = d // heads

    def split(x):
        return x.view(x.shape[0], x.shape[1], heads, dh).transpose(1, 2)

    scores = split(q) @ split(k).transpose(-2, -1) / math.sqrt(dh)
    weights = torch.softmax(scores, dim=-1)
    return (weights @ split(v)).transpose(1, 2).reshape(n, tq, d)


# ---------------------------------------------------------------------------
# modules

class Conv2d(nn.Module):
    def __init__(self, cin, cout, kernel, dilation=(1, 1), bias=True):
        super().__init__()
        kt, kf = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.dilation = tuple(dilation)
        self.weight = nn.Parameter(torch.empty(cout, cin, kt, kf))
        glorot_(self.weight, cin * kt * kf, cout * kt * kf)
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.dilation)


class InstanceNorm(nn.Module):
    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return instance_norm(x, self.gamma, self.beta, self.eps)


class Linear(nn.Module):
    def __init__(self, din, dout, bias=True):
        super().__init__()
        self.weight = nn.Parameter(glorot_(torch.empty(dout, din), din, dout))
        self.bias = nn.Parameter(torch.zeros(dout)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        mean = x.mean(-1, keepdim=True)
        centred = x - mean
        var = (centred * centred).mean(-1, keepdim=True)
        return centred / torch.sqrt(var + self.eps) * self.gamma + self.beta


class BiGRU(nn.Module):
    """Bidirectional single-layer GRU over N x T x D (or T x D) sequences.

    Gate arithmetic is torch's GRU: r and z from sigmoid, candidate
    ``tanh(W_in x + b_in + r * (W_hn h + b_hn))``, ``h' = (1 - z) n + z h``.
    """

    def __init__(self, din, hidden):
        super().__init__()
        self.din, self.hidden = din, hidden
        self.gru = nn.GRU(din, hidden, batch_first=True, bidirectional=True)
        for name, p in self.gru.named_parameters():
            if name.startswith("weight_ih"):
                glorot_(p, din, hidden)
            elif name.startswith("weight_hh"):
                orthogonal_(p)
            else:
                nn.init.zeros_(p)

    def forward(self, x):
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[-1] != self.din:
            raise ValueError(f"GRU expects feature size {self.din}, got {x.shape[-1]}")
        if x.shape[1] < 1:
            raise ValueError("empty sequence")
        y, _ = self.gru(x)
        return y[0] if squeeze else y


class MultiHeadAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError(f"model width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.out = Linear(dim, dim)

    def forward(self, query, memory):
        return self.out(attention(self.q(query), self.k(memory), self.v(memory), self.heads))


class FeedForward(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.inner = Linear(dim, hidden)
        self.outer = Linear(hidden, dim)

    def forward(self, x):
        return self.outer(torch.relu(self.inner(x)))


# ---------------------------------------------------------------------------
# training plumbing

def backward(loss: torch.Tensor, params=None):
    """Reverse-mode pass that refuses non-scalar or non-finite losses and gradients."""
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    loss.backward()
    for name, p in params or []:
        if p.grad is not None:
            check_finite(p.grad, f"gradient of {name}")


def param_count(module: nn.Module | None) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())


def param_breakdown(module: nn.Module):
    return [(name, tuple(p.shape), p.numel()) for name, p in module.named_parameters()]


# ---------------------------------------------------------------------------
# AMTW checkpoints: magic, u32 version, then records of
# (u32 name length, name, u32 rank, u32 dims..., f32 data).

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict):
    with open(path, "wb") as fh:
        fh.write(b"AMTW" + struct.pack("<I", CHECKPOINT_VERSION))
        for name, value in tensors.items():
            arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != b"AMTW":
        raise CheckpointError(f"{path}: not an AMTW checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + nlen].decode("utf-8")
            pos += 4 + nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(data):
                raise CheckpointError(f"{path}: record {name!r} truncated")
            out[name] = np.frombuffer(data, "<f4", count, pos).reshape(dims).copy()
            pos += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt record ({exc})") from exc
    return out


def save_checkpoint(path, model: nn.Module, extra: dict | None = None):
    tensors = dict(model.state_dict())
    tensors.update(extra or {})
    save_tensors(path, tensors)


def load_checkpoint(path, model: nn.Module) -> dict:
    """Load parameters into ``model``; returns records that are not model parameters."""
    records = load_tensors(path)
    state = model.state_dict()
    missing = [k for k in state if k not in records]
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing[:3]}{'...' if len(missing) > 3 else ''}")
    for name, ref in state.items():
        if tuple(records[name].shape) != tuple(ref.shape):
            raise CheckpointError(
                f"{path}: {name} has shape {records[name].shape}, model expects {tuple(ref.shape)}")
    model.load_state_dict({k: torch.from_numpy(records[k]).to(state[k].dtype) for k in state})
    return {k: v for k, v in records.items() if k not in state}
