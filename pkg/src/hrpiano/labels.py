"""High-resolution onset/offset targets and the note-event decoder.

Targets are triangles of half-width ``J`` frames centred on the exact event
time.  Because the triangle slope is known, three neighbouring samples
around its peak determine the event time exactly, which is what
:func:`decode_precise_time` does.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .frontend import CqtConfig
from .midi import MIN_PITCH, N_KEYS, NoteEvent, NoteSequence

FRAME_PERIOD = CqtConfig().frame_period
SHARPNESS = 5


@dataclass(frozen=True)
class FrameGrid:
    n_frames: int
    frame_period: float = FRAME_PERIOD

    def __post_init__(self):
        if self.frame_period <= 0:
            raise ValueError("frame_period must be positive")
        if self.n_frames < 0:
            raise ValueError("n_frames must be non-negative")

    def center(self, t):
        return t * self.frame_period

    def centers(self) -> np.ndarray:
        return np.arange(self.n_frames) * self.frame_period

    @property
    def span(self) -> float:
        return self.n_frames * self.frame_period

    @classmethod
    def covering(cls, seconds: float, frame_period: float = FRAME_PERIOD) -> "FrameGrid":
        """Smallest grid whose span reaches ``seconds``."""
        return cls(int(np.ceil(seconds / frame_period - 1e-9)) + 1, frame_period)


@dataclass(frozen=True)
class DecodeThresholds:
    onset_thr: float = 0.4
    offset_thr: float = 0.4
    frame_thr: float = 0.4
    velocity_thr: float = 0.0

    def __post_init__(self):
        for name in ("onset_thr", "offset_thr", "frame_thr", "velocity_thr"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class ModelOutputs:
    """Four T x 88 planes: onset/offset regression, frame activity, velocity."""
    on: object
    off: object
    frame: object
    vel: object

    def planes(self):
        return self.on, self.off, self.frame, self.vel

    def numpy(self) -> "ModelOutputs":
        def conv(x):
            if hasattr(x, "detach"):
                x = x.detach().cpu().numpy()
            x = np.asarray(x, dtype=np.float64)
            return x[0] if x.ndim == 3 else x
        return ModelOutputs(*(conv(p) for p in self.planes()))


@dataclass
class RollTargets:
    g_on: np.ndarray
    g_off: np.ndarray
    b_fr: np.ndarray
    v: np.ndarray
    b_on: np.ndarray
    sharpness: int = SHARPNESS
    frame_period: float = FRAME_PERIOD

    PLANES = ("g_on", "g_off", "b_fr", "v", "b_on")

    @property
    def shape(self):
        return self.g_on.shape

    def as_outputs(self) -> ModelOutputs:
        return ModelOutputs(self.g_on, self.g_off, self.b_fr, self.v)


# ---------------------------------------------------------------------------
# encoding

def _triangles(times, grid: FrameGrid, J: int):
    """Max-combined triangles for one lane, plus the index of the winning event per frame."""
    values = np.zeros(grid.n_frames)
    owner = np.full(grid.n_frames, -1)
    width = J * grid.frame_period
    for i, t in enumerate(times):
        near = int(round(t / grid.frame_period))
        idx = np.arange(near - J - 1, near + J + 2)
        idx = idx[(idx >= 0) & (idx < grid.n_frames)]
        g = 1.0 - np.abs(grid.center(idx) - t) / width
        # |center - t| == J * period must map to exactly zero despite rounding
        keep = g > 1e-9
        idx, g = idx[keep], g[keep]
        win = g > values[idx]
        values[idx[win]] = g[win]
        owner[idx[win]] = i
    return values, owner


def encode_regression(events, grid: FrameGrid, J: int = SHARPNESS) -> np.ndarray:
    """T x K regression plane from per-lane lists of event times."""
    if J < 1:
        raise ValueError("J must be >= 1")
    out = np.zeros((grid.n_frames, len(events)))
    for k, times in enumerate(events):
        out[:, k] = _triangles(times, grid, J)[0]
    return out


def encode_targets(seq, grid: FrameGrid, J: int = SHARPNESS) -> RollTargets:
    notes = list(seq)
    shape = (grid.n_frames, N_KEYS)
    g_on, g_off, b_fr, v = (np.zeros(shape) for _ in range(4))
    centers = grid.centers()
    tol = 1e-9
    lanes = [[] for _ in range(N_KEYS)]
    for n in notes:
        if n.onset < 0 or n.onset >= grid.span or n.offset > grid.span + tol:
            raise ValueError(f"{n} lies outside the {grid.span:.3f} s frame grid")
        lanes[n.pitch - MIN_PITCH].append(n)
    for k, lane in enumerate(lanes):
        if not lane:
            continue
        g_on[:, k], owner = _triangles([n.onset for n in lane], grid, J)
        g_off[:, k] = _triangles([n.offset for n in lane], grid, J)[0]
        for n in lane:
            lo = np.searchsorted(centers, n.onset, side="left")
            hi = np.searchsorted(centers, n.offset, side="left")
            b_fr[lo:hi, k] = 1.0
        hit = owner >= 0
        v[hit, k] = np.array([lane[i].velocity for i in owner[hit]]) / 127.0
    b_on = (g_on > 0).astype(np.float64)
    return RollTargets(g_on, g_off, b_fr, v, b_on, J, grid.frame_period)


# ---------------------------------------------------------------------------
# decoding

def decode_precise_time(a: float, b: float, c: float, center: float, period: float) -> float:
    """Invert a triangle peak sampled at (center - period, center, center + period).

    Exact when the three samples lie on one triangle of the encoder (J >= 2).
    """
    denom = b - min(a, c)
    if denom < 1e-9:
        return center
    shift = period * (c - a) / (2.0 * denom)
    return center + min(max(shift, -period / 2), period / 2)


def _peaks(x: np.ndarray, thr: float) -> np.ndarray:
    """Local maxima above ``thr``; on a plateau the earliest frame wins."""
    left = np.concatenate(([-np.inf], x[:-1]))
    right = np.concatenate((x[1:], [-np.inf]))
    return (x > thr) & (x > left) & (x >= right)


def _precise(x: np.ndarray, t: int, grid: FrameGrid) -> float:
    b = x[t]
    a = x[t - 1] if t > 0 else None
    c = x[t + 1] if t + 1 < len(x) else None
    if a is None:
        a = c if c is not None else b
    if c is None:
        c = a
    return decode_precise_time(a, b, c, grid.center(t), grid.frame_period)


def extract_notes(outputs: ModelOutputs, thr: DecodeThresholds = DecodeThresholds(),
                  grid: FrameGrid | None = None) -> NoteSequence:
    out = outputs.numpy()
    shapes = {p.shape for p in out.planes()}
    if len(shapes) != 1:
        raise ValueError(f"output planes disagree in shape: {sorted(shapes)}")
    (shape,) = shapes
    if len(shape) != 2:
        raise ValueError(f"expected T x K planes, got shape {shape}")
    n_frames, n_keys = shape
    if grid is None:
        grid = FrameGrid(n_frames)
    elif grid.n_frames != n_frames:
        raise ValueError(f"grid has {grid.n_frames} frames, outputs have {n_frames}")
    last = grid.center(n_frames - 1)

    notes = []
    for k in range(n_keys):
        on, off, fr, vel = out.on[:, k], out.off[:, k], out.frame[:, k], out.vel[:, k]
        onset_frames = np.flatnonzero(_peaks(on, thr.onset_thr))
        if not len(onset_frames):
            continue
        offset_peaks = _peaks(off, thr.offset_thr)
        onset_times = [_precise(on, t, grid) for t in onset_frames]
        for i, t0 in enumerate(onset_frames):
            if not vel[t0] > thr.velocity_thr:
                continue
            start = onset_times[i]
            nxt = onset_frames[i + 1] if i + 1 < len(onset_frames) else None
            end = last
            for t in range(t0, n_frames):
                cands = []
                if offset_peaks[t]:
                    cands.append(_precise(off, t, grid))
                if t > t0 and fr[t] < thr.frame_thr:
                    cands.append(grid.center(t))
                if nxt is not None and t == nxt:
                    cands.append(onset_times[i + 1])
                cands = [c for c in cands if c > start]
                if cands:
                    end = min(cands)
                    break
            if end <= start:
                continue
            velocity = int(min(127, max(1, round(vel[t0] * 127))))
            notes.append(NoteEvent(k + MIN_PITCH, start, end, velocity))
    return NoteSequence(notes)


def merge_close_notes(seq, max_gap: float) -> NoteSequence:
    """Join same-pitch notes separated by less than ``max_gap`` seconds."""
    by_pitch = {}
    for n in sorted(seq, key=lambda n: (n.pitch, n.onset)):
        lane = by_pitch.setdefault(n.pitch, [])
        if lane and 0 <= n.onset - lane[-1].offset < max_gap:
            prev = lane.pop()
            n = NoteEvent(n.pitch, prev.onset, max(prev.offset, n.offset), prev.velocity)
        lane.append(n)
    return NoteSequence([n for lane in by_pitch.values() for n in lane])


# ---------------------------------------------------------------------------
# ROLL files: magic, u32 T, u32 K, f64 frame period, u8 J, u8 plane count,
# then per plane a tag byte followed by T*K little-endian f32 values.

_ROLL_HEADER = struct.Struct("<4sIIdBB")
_TAGS = {"g_on": b"N", "g_off": b"F", "b_fr": b"R", "v": b"V", "b_on": b"M"}


def save_roll(path, targets: RollTargets):
    t, k = targets.shape
    with open(path, "wb") as fh:
        fh.write(_ROLL_HEADER.pack(b"ROLL", t, k, targets.frame_period, targets.sharpness,
                                   len(RollTargets.PLANES)))
        for name in RollTargets.PLANES:
            fh.write(_TAGS[name])
            fh.write(np.ascontiguousarray(getattr(targets, name), dtype="<f4").tobytes())


def load_roll(path) -> RollTargets:
    data = Path(path).read_bytes()
    if len(data) < _ROLL_HEADER.size:
        raise ValueError("roll file too short")
    magic, t, k, period, J, count = _ROLL_HEADER.unpack_from(data)
    if magic != b"ROLL":
        raise ValueError(f"bad roll magic {magic!r}")
    by_tag = {tag: name for name, tag in _TAGS.items()}
    planes = {}
    pos = _ROLL_HEADER.size
    size = 4 * t * k
    for _ in range(count):
        if pos + 1 + size > len(data):
            raise ValueError("roll file truncated")
        name = by_tag.get(data[pos:pos + 1])
        if name is None:
            raise ValueError(f"unknown plane tag {data[pos:pos + 1]!r}")
        planes[name] = np.frombuffer(data, "<f4", t * k, pos + 1).reshape(t, k).astype(np.float64)
        pos += 1 + size
    missing = set(RollTargets.PLANES) - set(planes)
    if missing:
        raise ValueError(f"roll file lacks planes {sorted(missing)}")
    return RollTargets(**planes, sharpness=J, frame_period=period)
