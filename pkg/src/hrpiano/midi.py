"""Standard MIDI File reading and writing, reduced to piano note events."""
from __future__ import annotations

import bisect
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

MIN_PITCH = 21
MAX_PITCH = 108
N_KEYS = MAX_PITCH - MIN_PITCH + 1

DEFAULT_TEMPO = 500000  # us per quarter
WRITE_TPQ = 480
_MAX_VLQ = 0x0FFFFFFF


class MidiError(ValueError):
    """Any failure to interpret a byte stream as a Standard MIDI File."""


class MidiHeaderError(MidiError):
    pass


class MidiTruncatedError(MidiError):
    pass


class RunningStatusError(MidiError):
    pass


@dataclass(frozen=True, order=True)
class NoteEvent:
    onset: float
    pitch: int
    offset: float
    velocity: int

    def __init__(self, pitch: int, onset: float, offset: float, velocity: int):
        # positional order follows (pitch, onset, offset, velocity); sort order is (onset, pitch)
        object.__setattr__(self, "onset", float(onset))
        object.__setattr__(self, "pitch", int(pitch))
        object.__setattr__(self, "offset", float(offset))
        object.__setattr__(self, "velocity", int(velocity))
        if not MIN_PITCH <= self.pitch <= MAX_PITCH:
            raise ValueError(f"pitch {self.pitch} outside {MIN_PITCH}-{MAX_PITCH}")
        if self.onset < 0 or not self.offset > self.onset:
            raise ValueError(f"bad note times ({self.onset}, {self.offset})")
        if not 0 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} outside 0-127")

    @property
    def duration(self) -> float:
        return self.offset - self.onset

    def __repr__(self):
        return f"NoteEvent({self.pitch}, {self.onset:.6f}, {self.offset:.6f}, {self.velocity})"


@dataclass
class NoteSequence:
    notes: list = field(default_factory=list)
    ticks_per_quarter: int = WRITE_TPQ
    tempo_map: list = field(default_factory=lambda: [(0, DEFAULT_TEMPO)])
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.notes = sorted(self.notes, key=lambda n: (n.onset, n.pitch))

    def __len__(self):
        return len(self.notes)

    def __iter__(self):
        return iter(self.notes)

    @property
    def end_time(self) -> float:
        return max((n.offset for n in self.notes), default=0.0)


# ---------------------------------------------------------------------------
# parsing

class _Reader:
    def __init__(self, data: bytes, pos: int = 0, end: int | None = None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def byte(self) -> int:
        if self.pos >= self.end:
            raise MidiTruncatedError("unexpected end of track data")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise MidiTruncatedError("unexpected end of track data")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def vlq(self) -> int:
        value = 0
        for _ in range(4):
            b = self.byte()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise MidiError("variable-length quantity longer than 4 bytes")


class _TempoMap:
    def __init__(self, changes, ticks_per_quarter=None, ticks_per_second=None):
        self.tps = ticks_per_second
        self.tpq = ticks_per_quarter
        merged = {}
        for tick, tempo in sorted(changes):
            merged[tick] = tempo
        if 0 not in merged:
            merged[0] = DEFAULT_TEMPO
        self.ticks = sorted(merged)
        self.tempos = [merged[t] for t in self.ticks]
        self.starts = [0.0]
        for i in range(1, len(self.ticks) if self.tpq else 0):
            dt = self.ticks[i] - self.ticks[i - 1]
            self.starts.append(self.starts[-1] + dt * self.tempos[i - 1] / (1e6 * self.tpq))

    def seconds(self, tick: int) -> float:
        if self.tps is not None:
            return tick / self.tps
        i = bisect.bisect_right(self.ticks, tick) - 1
        return self.starts[i] + (tick - self.ticks[i]) * self.tempos[i] / (1e6 * self.tpq)

    def as_list(self):
        return list(zip(self.ticks, self.tempos))


def _parse_track(data: bytes, start: int, end: int, index: int):
    """Yield (tick, kind, channel, pitch, velocity) note records and tempo changes."""
    rd = _Reader(data, start, end)
    tick = 0
    status = None
    notes, tempos = [], []
    while rd.pos < rd.end:
        tick += rd.vlq()
        b = rd.byte()
        if b & 0x80:
            if b < 0xF0:
                status = b
            data1 = None
        else:
            if status is None:
                raise RunningStatusError(f"track {index}: data byte 0x{b:02x} with no running status")
            data1 = b
        if b == 0xFF:
            mtype = rd.byte()
            body = rd.take(rd.vlq())
            if mtype == 0x51:
                if len(body) != 3:
                    raise MidiError(f"track {index}: tempo meta event of length {len(body)}")
                tempos.append((tick, int.from_bytes(body, "big")))
            elif mtype == 0x2F:
                break
            continue
        if b in (0xF0, 0xF7):
            rd.take(rd.vlq())
            continue
        if b & 0x80 and b >= 0xF0:
            raise MidiError(f"track {index}: unsupported system message 0x{b:02x}")
        kind = status & 0xF0
        channel = status & 0x0F
        if data1 is None:
            data1 = rd.byte()
        if kind in (0xC0, 0xD0):
            continue
        data2 = rd.byte()
        if data1 > 0x7F or data2 > 0x7F:
            raise MidiError(f"track {index}: data byte out of range")
        if kind == 0x90 and data2 > 0:
            notes.append((tick, 1, channel, data1, data2))
        elif kind in (0x80, 0x90):
            notes.append((tick, 0, channel, data1, 0))
        # CC64 (sustain) and other controllers are ignored
    return notes, tempos, tick


def parse_midi(data: bytes) -> NoteSequence:
    if isinstance(data, (str, Path)):
        data = Path(data).read_bytes()
    data = bytes(data)
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiHeaderError("missing MThd header")
    (hlen,) = struct.unpack_from(">I", data, 4)
    if hlen < 6 or 8 + hlen > len(data):
        raise MidiHeaderError(f"bad header length {hlen}")
    fmt, ntracks, division = struct.unpack_from(">HHH", data, 8)
    if fmt not in (0, 1):
        raise MidiHeaderError(f"unsupported SMF format {fmt}")
    tpq = tps = None
    if division & 0x8000:
        fps = 256 - (division >> 8)
        tpf = division & 0xFF
        if fps not in (24, 25, 29, 30) or tpf == 0:
            raise MidiHeaderError(f"bad SMPTE division 0x{division:04x}")
        tps = (29.97 if fps == 29 else fps) * tpf
    else:
        if division == 0:
            raise MidiHeaderError("zero ticks per quarter")
        tpq = division

    pos = 8 + hlen
    tracks = []
    all_tempos = []
    warnings = []
    for i in range(ntracks):
        if pos + 8 > len(data):
            raise MidiTruncatedError(f"missing track {i} of {ntracks}")
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from(">I", data, pos + 4)
        if cid != b"MTrk":
            raise MidiHeaderError(f"expected MTrk chunk, found {cid!r}")
        if pos + 8 + size > len(data):
            raise MidiTruncatedError(f"track {i} declares {size} bytes past end of file")
        notes, tempos, end_tick = _parse_track(data, pos + 8, pos + 8 + size, i)
        tracks.append((notes, end_tick))
        all_tempos.extend(tempos)
        pos += 8 + size

    tmap = _TempoMap(all_tempos, ticks_per_quarter=tpq, ticks_per_second=tps)
    result = []
    for ti, (records, end_tick) in enumerate(tracks):
        open_notes = {}
        closed = []
        for tick, is_on, channel, pitch, vel in records:
            key = (channel, pitch)
            if key in open_notes:
                on_tick, on_vel = open_notes.pop(key)
                closed.append((pitch, on_tick, tick, on_vel))
            if is_on:
                open_notes[key] = (tick, vel)
        for (channel, pitch), (on_tick, on_vel) in open_notes.items():
            warnings.append(f"track {ti}: unterminated note {pitch} (channel {channel}) closed at track end")
            closed.append((pitch, on_tick, end_tick, on_vel))
        for pitch, on_tick, off_tick, vel in closed:
            if not MIN_PITCH <= pitch <= MAX_PITCH:
                warnings.append(f"track {ti}: pitch {pitch} outside piano range dropped")
                continue
            on, off = tmap.seconds(on_tick), tmap.seconds(off_tick)
            if off <= on:
                continue
            result.append(NoteEvent(pitch, on, off, vel))
    if warnings:
        log.debug("%d MIDI warnings, first: %s", len(warnings), warnings[0])
    return NoteSequence(result, tpq or WRITE_TPQ, tmap.as_list(), warnings)


def read_midi(path) -> NoteSequence:
    return parse_midi(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# writing

def _vlq(value: int) -> bytes:
    if not 0 <= value <= _MAX_VLQ:
        raise ValueError(f"delta time {value} does not fit a MIDI variable-length quantity")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def midi_bytes(seq: NoteSequence) -> bytes:
    """Format-0 SMF at 480 ticks per quarter and 120 bpm."""
    ticks_per_second = WRITE_TPQ * 1e6 / DEFAULT_TEMPO
    events = []
    for n in seq.notes:
        on = int(round(n.onset * ticks_per_second))
        off = max(on + 1, int(round(n.offset * ticks_per_second)))
        vel = n.velocity
        if vel == 0:
            log.warning("velocity 0 written as 1 for note %s", n)
            vel = 1
        # offs sort before ons at equal ticks so back-to-back repeats stay distinct
        events.append((off, 0, n.pitch, 0x80, 0))
        events.append((on, 1, n.pitch, 0x90, vel))
    events.sort()
    body = bytearray(b"\x00\xff\x51\x03" + DEFAULT_TEMPO.to_bytes(3, "big"))
    last = 0
    for tick, _, pitch, status, vel in events:
        body += _vlq(tick - last) + bytes((status, pitch, vel))
        last = tick
    body += b"\x00\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, WRITE_TPQ)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def write_midi(seq: NoteSequence, path):
    Path(path).write_bytes(midi_bytes(seq))
