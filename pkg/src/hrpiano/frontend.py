"""Audio ingestion and the log-compressed constant-Q front-end.

Frame ``t`` of every spectrogram is centred on sample ``t * hop``, so its
centre time is ``t * hop / sample_rate``.  The label codec uses the same
convention (see :mod:`hrpiano.labels`).
"""
from __future__ import annotations

import functools
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse
import scipy.special

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
LOG_SCALE = 1e4


class WavError(ValueError):
    """Base class for WAV decoding failures."""


class MalformedHeaderError(WavError):
    pass


class UnsupportedCodecError(WavError):
    pass


class TruncatedDataError(WavError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip holds mono samples only")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite audio samples")

    @property
    def channels(self) -> int:
        return 1

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class CqtConfig:
    sample_rate: int = SAMPLE_RATE
    hop: int = 320
    bins_per_octave: int = 48
    n_bins: int = 352
    f_min: float = 27.5

    def __post_init__(self):
        if self.hop <= 0:
            raise ValueError("hop must be positive")
        if self.bins_per_octave <= 0 or self.n_bins <= 0 or self.f_min <= 0:
            raise ValueError("bins_per_octave, n_bins and f_min must be positive")
        top = self.f_min * 2.0 ** ((self.n_bins - 1) / self.bins_per_octave)
        if top >= self.sample_rate / 2:
            raise ValueError(f"highest CQT bin {top:.1f} Hz is not below Nyquist")

    @property
    def frame_period(self) -> float:
        return self.hop / self.sample_rate

    @property
    def q_factor(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    def frequencies(self) -> np.ndarray:
        return self.f_min * 2.0 ** (np.arange(self.n_bins) / self.bins_per_octave)

    def kernel_lengths(self) -> np.ndarray:
        return np.ceil(self.q_factor * self.sample_rate / self.frequencies()).astype(int)


@dataclass
class Spectrogram:
    values: np.ndarray  # T x F
    frame_period: float
    f_bins: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("spectrogram values must be T x F")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite spectrogram values")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def frame_times(self) -> np.ndarray:
        return np.arange(self.n_frames) * self.frame_period


# ---------------------------------------------------------------------------
# WAV I/O

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def read_wav_bytes(data: bytes) -> tuple[np.ndarray, int]:
    """Decode a RIFF/WAVE byte string to (frames x channels float64, rate)."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeaderError("missing RIFF/WAVE signature")
    pos = 12
    fmt = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + 16 > len(data):
                raise MalformedHeaderError("fmt chunk too short")
            tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", data, body)
            if tag == _EXTENSIBLE and size >= 40:
                (tag,) = struct.unpack_from("<H", data, body + 24)
            fmt = (tag, channels, rate, block_align, bits)
        elif cid == b"data":
            if fmt is None:
                raise MalformedHeaderError("data chunk precedes fmt chunk")
            tag, channels, rate, block_align, bits = fmt
            if channels not in (1, 2):
                raise UnsupportedCodecError(f"{channels} channels (expected 1 or 2)")
            if rate <= 0:
                raise MalformedHeaderError("zero sample rate")
            if (tag, bits) == (_PCM, 16):
                dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
            elif (tag, bits) == (_IEEE_FLOAT, 32):
                dtype, scale = np.dtype("<f4"), 1.0
            else:
                raise UnsupportedCodecError(f"format tag {tag} with {bits} bits per sample")
            if block_align != channels * dtype.itemsize:
                raise MalformedHeaderError(f"block_align {block_align} inconsistent with format")
            payload = data[body:body + size]
            if len(payload) < size or size % block_align:
                raise TruncatedDataError(
                    f"data chunk declares {size} bytes, {len(data) - body} present")
            x = np.frombuffer(payload, dtype=dtype).astype(np.float64) * scale
            return x.reshape(-1, channels), rate
        pos = body + size + (size & 1)
    if fmt is None:
        raise MalformedHeaderError("no fmt chunk")
    raise TruncatedDataError("no data chunk")


def load_wav(path) -> AudioClip:
    frames, rate = read_wav_bytes(Path(path).read_bytes())
    mono = frames.mean(axis=1)
    if not np.all(np.isfinite(mono)):
        raise WavError("non-finite samples in float WAV")
    peak = np.max(np.abs(mono), initial=0.0)
    if peak > 1.0:
        log.warning("%s: samples exceed full scale (peak %.3f), clipping", path, peak)
        mono = np.clip(mono, -1.0, 1.0)
    return AudioClip(mono, rate)


def write_wav(path, clip: AudioClip, float32: bool = False):
    x = np.clip(clip.samples, -1.0, 1.0)
    if float32:
        payload, tag, bits = x.astype("<f4").tobytes(), _IEEE_FLOAT, 32
    else:
        payload, tag, bits = np.round(x * 32767).astype("<i2").tobytes(), _PCM, 16
    align = bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, tag, 1, clip.sample_rate,
                                    clip.sample_rate * align, align, bits)
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# Resampling

KAISER_BETA = 8.0
ZERO_CROSSINGS = 64
_MAX_PHASES = 4096


def _sinc_taps(frac: np.ndarray, offsets: np.ndarray, cutoff: float, half_width: float):
    """Windowed-sinc weights for input samples at ``offsets`` around each fractional position."""
    u = frac[:, None] - offsets[None, :]
    ratio = np.clip(u / half_width, -1.0, 1.0)
    window = scipy.special.i0(KAISER_BETA * np.sqrt(1.0 - ratio ** 2)) / scipy.special.i0(KAISER_BETA)
    window[np.abs(u) > half_width] = 0.0
    w = cutoff * np.sinc(cutoff * u) * window
    # unit DC gain per phase
    return w / w.sum(axis=1, keepdims=True)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited resampling with a Kaiser-windowed sinc (beta 8, 64 zero crossings)."""
    if len(clip) == 0:
        raise ValueError("cannot resample an empty clip")
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    src = clip.sample_rate
    if src == target_rate:
        return AudioClip(clip.samples.copy(), src)
    g = math.gcd(src, target_rate)
    up, down = target_rate // g, src // g
    cutoff = min(1.0, up / down)
    half_width = ZERO_CROSSINGS / cutoff
    width = int(math.ceil(half_width))
    offsets = np.arange(-width + 1, width + 1)

    n_out = int(round(len(clip) * up / down))
    x = np.pad(clip.samples, (width, width + 1))
    out = np.empty(n_out)
    table = None
    if up <= _MAX_PHASES:
        table = _sinc_taps(np.arange(up) / up, offsets, cutoff, half_width)
    chunk = max(1, 2 ** 22 // len(offsets))
    for start in range(0, n_out, chunk):
        n = np.arange(start, min(n_out, start + chunk))
        base = (n * down) // up
        phase = (n * down) % up
        weights = table[phase] if table is not None else _sinc_taps(phase / up, offsets, cutoff, half_width)
        idx = base[:, None] + offsets[None, :] + width
        out[n] = np.einsum("ij,ij->i", x[idx], weights)
    return AudioClip(out, target_rate)


def to_model_rate(clip: AudioClip) -> AudioClip:
    return resample(clip, SAMPLE_RATE)


# ---------------------------------------------------------------------------
# Constant-Q transform

_SPARSITY = 1e-4


@functools.lru_cache(maxsize=4)
def _kernel_bank(cfg: CqtConfig):
    """Sparse (n_fft//2+1) x n_bins matrix of conjugated kernel spectra."""
    lengths = cfg.kernel_lengths()
    n_fft = 1 << int(math.ceil(math.log2(lengths.max())))
    freqs = cfg.frequencies()
    rows, cols, vals = [], [], []
    for b, (f, n) in enumerate(zip(freqs, lengths)):
        window = np.hanning(n + 2)[1:-1]
        t = (np.arange(n) - (n - 1) / 2) / cfg.sample_rate
        kern = np.zeros(n_fft, dtype=np.complex128)
        start = n_fft // 2 - (n - 1) // 2
        kern[start:start + n] = window / window.sum() * np.exp(2j * np.pi * f * t)
        spec = np.fft.fft(kern)[: n_fft // 2 + 1] / n_fft
        keep = np.flatnonzero(np.abs(spec) >= _SPARSITY * np.abs(spec).max())
        rows.append(keep)
        cols.append(np.full(len(keep), b))
        vals.append(np.conj(spec[keep]))
    bank = scipy.sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_fft // 2 + 1, cfg.n_bins))
    return n_fft, bank


def cqt_magnitude(clip: AudioClip, cfg: CqtConfig = CqtConfig()) -> np.ndarray:
    """Raw CQT magnitudes, T x n_bins, T = ceil(len / hop)."""
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(f"clip is at {clip.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
    longest = int(cfg.kernel_lengths().max())
    if len(clip) < longest:
        raise ValueError(f"clip has {len(clip)} samples, lowest CQT bin needs {longest}")
    n_fft, bank = _kernel_bank(cfg)
    n_frames = -(-len(clip) // cfg.hop)
    half = n_fft // 2
    mode = "reflect" if len(clip) > half else "constant"
    x = np.pad(clip.samples, (half, half), mode=mode)
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::cfg.hop][:n_frames]
    # the kernel is centred at index n_fft//2, matching the frame centre
    out = np.empty((n_frames, cfg.n_bins))
    step = 32
    for start in range(0, n_frames, step):
        spec = np.fft.rfft(frames[start:start + step], axis=1)
        out[start:start + step] = np.abs(bank.T.dot(spec.T).T)
    return out


def log_compress(magnitude: np.ndarray) -> np.ndarray:
    return np.log1p(LOG_SCALE * magnitude)


def cqt(clip: AudioClip, cfg: CqtConfig = CqtConfig()) -> Spectrogram:
    mag = cqt_magnitude(clip, cfg)
    return Spectrogram(log_compress(mag), cfg.frame_period, cfg.frequencies())


# ---------------------------------------------------------------------------
# Binary grid files

_GRID_HEADER = struct.Struct("<4sIId")


def save_spectrogram(path, spec: Spectrogram):
    t, f = spec.values.shape
    with open(path, "wb") as fh:
        fh.write(_GRID_HEADER.pack(b"CQTS", t, f, spec.frame_period))
        fh.write(np.ascontiguousarray(spec.values, dtype="<f4").tobytes())


def load_spectrogram(path, cfg: CqtConfig | None = CqtConfig()) -> Spectrogram:
    data = Path(path).read_bytes()
    if len(data) < _GRID_HEADER.size:
        raise ValueError("spectrogram file too short")
    magic, t, f, period = _GRID_HEADER.unpack_from(data)
    if magic != b"CQTS":
        raise ValueError(f"bad spectrogram magic {magic!r}")
    need = _GRID_HEADER.size + 4 * t * f
    if len(data) != need:
        raise ValueError(f"spectrogram payload is {len(data)} bytes, expected {need}")
    values = np.frombuffer(data, dtype="<f4", offset=_GRID_HEADER.size).reshape(t, f)
    f_bins = cfg.frequencies() if cfg is not None and cfg.n_bins == f else None
    return Spectrogram(values.copy(), period, f_bins)
