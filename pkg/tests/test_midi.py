import io
import struct

import mido

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrpiano.midi import (MidiError, MidiHeaderError, MidiTruncatedError, NoteEvent, NoteSequence,
                          RunningStatusError, _vlq, midi_bytes, parse_midi, read_midi, write_midi)


def smf(tracks, fmt=1, division=480):
    out = b"MThd" + struct.pack(">IHHH", 6, fmt, len(tracks), division)
    for body in tracks:
        out += b"MTrk" + struct.pack(">I", len(body)) + body
    return out


EOT = b"\x00\xff\x2f\x00"


@st.composite
def note_sequences(draw, max_notes=12):
    n = draw(st.integers(0, max_notes))
    notes = []
    for _ in range(n):
        pitch = draw(st.integers(21, 108))
        on = draw(st.floats(0, 30, allow_nan=False))
        dur = draw(st.floats(0.01, 5, allow_nan=False))
        vel = draw(st.integers(1, 127))
        notes.append(NoteEvent(pitch, on, on + dur, vel))
    # same-pitch notes may not overlap in a MIDI stream
    notes.sort(key=lambda x: (x.pitch, x.onset))
    kept = []
    for x in notes:
        if kept and kept[-1].pitch == x.pitch and x.onset < kept[-1].offset + 0.01:
            continue
        kept.append(x)
    return NoteSequence(kept)


def test_vlq_encoding():
    assert _vlq(0) == b"\x00"
    assert _vlq(0x7F) == b"\x7f"
    assert _vlq(0x80) == b"\x81\x00"
    assert _vlq(0x0FFFFFFF) == b"\xff\xff\xff\x7f"
    with pytest.raises(ValueError):
        _vlq(0x10000000)


def test_simple_parse():
    # one quarter note of middle C at 120 bpm -> 0.5 s
    body = b"\x00\x90\x3c\x64" + b"\x83\x60\x80\x3c\x40" + EOT
    seq = parse_midi(smf([body]))
    assert [(n.pitch, n.onset, n.offset, n.velocity) for n in seq] == [(60, 0.0, 0.5, 100)]


def test_tempo_change_and_running_status():
    tempo = b"\x00\xff\x51\x03\x0f\x42\x40"  # 1 s per quarter
    # running status: second note-on and the zero-velocity offs omit the status byte
    body = tempo + b"\x00\x90\x3c\x64" + b"\x00\x40\x50" + b"\x83\x60\x3c\x00" + b"\x00\x40\x00" + EOT
    seq = parse_midi(smf([body]))
    assert [(n.pitch, n.offset) for n in seq] == [(60, 1.0), (64, 1.0)]
    assert seq.tempo_map == [(0, 1000000)]


def test_format1_tempo_track_applies_to_other_tracks():
    tempo_track = b"\x00\xff\x51\x03\x07\xa1\x20" + b"\x83\x60\xff\x51\x03\x0f\x42\x40" + EOT
    notes = b"\x00\x90\x45\x40" + b"\x87\x40\x80\x45\x00" + EOT
    (n,) = parse_midi(smf([tempo_track, notes]))
    # first quarter at 0.5 s, second at 1.0 s
    assert n.offset == pytest.approx(1.5)


def test_smpte_division():
    body = b"\x00\x90\x3c\x64" + b"\x81\x48\x80\x3c\x40" + EOT  # 200 ticks
    division = ((256 - 25) << 8) | 40  # 25 fps x 40 ticks = 1000 ticks/s
    (n,) = parse_midi(smf([body], division=division))
    assert n.offset == pytest.approx(0.2)


def test_sustain_ignored_and_out_of_range_dropped():
    body = (b"\x00\xb0\x40\x7f" + b"\x00\x90\x10\x40" + b"\x00\x90\x3c\x40"
            + b"\x60\x80\x10\x00" + b"\x00\x80\x3c\x00" + EOT)
    seq = parse_midi(smf([body]))
    assert [n.pitch for n in seq] == [60]
    assert any("outside piano range" in w for w in seq.warnings)


def test_unterminated_note_closed_at_track_end():
    body = b"\x00\x90\x3c\x64" + b"\x83\x60\xff\x2f\x00"
    (n,) = parse_midi(smf([body]))
    assert n.offset == pytest.approx(0.5)


def test_retrigger_closes_open_note():
    body = b"\x00\x90\x3c\x64" + b"\x60\x90\x3c\x50" + b"\x60\x80\x3c\x00" + EOT
    seq = parse_midi(smf([body]))
    assert [(n.onset, n.velocity) for n in seq] == [(0.0, 100), (pytest.approx(0.1), 80)]


@pytest.mark.parametrize("data, err", [
    (b"MThx" + b"\0" * 20, MidiHeaderError),
    (smf([b"\x00\x90\x3c"]), MidiTruncatedError),
    (smf([b"\x00\x3c\x40" + EOT]), RunningStatusError),
    (smf([EOT], fmt=2), MidiHeaderError),
])
def test_malformed(data, err):
    with pytest.raises(err):
        parse_midi(data)


def test_fuzz_raises_only_midi_errors(rng):
    base = midi_bytes(NoteSequence([NoteEvent(60, 0, 1, 90), NoteEvent(64, 0.5, 2, 40)]))
    for _ in range(2000):
        data = bytearray(base)
        for i in rng.integers(0, len(data), size=rng.integers(1, 6)):
            data[i] = rng.integers(0, 256)
        data = bytes(data[: rng.integers(0, len(data) + 1)])
        try:
            parse_midi(data)
        except MidiError:
            pass


@settings(max_examples=200)
@given(note_sequences())
def test_roundtrip(seq):
    back = parse_midi(midi_bytes(seq))
    assert len(back) == len(seq)
    for a, b in zip(sorted(seq, key=lambda n: (n.pitch, n.onset)), sorted(back, key=lambda n: (n.pitch, n.onset))):
        assert (a.pitch, a.velocity) == (b.pitch, b.velocity)
        assert abs(a.onset - b.onset) <= 1.05e-3
        assert abs(a.offset - b.offset) <= 1.05e-3


def test_file_roundtrip(tmp_path):
    seq = NoteSequence([NoteEvent(21, 0.25, 0.75, 1), NoteEvent(108, 1.0, 3.0, 127)])
    write_midi(seq, tmp_path / "x.mid")
    assert [(n.pitch, n.velocity) for n in read_midi(tmp_path / "x.mid")] == [(21, 1), (108, 127)]


def test_note_validation():
    with pytest.raises(ValueError):
        NoteEvent(20, 0, 1, 64)
    with pytest.raises(ValueError):
        NoteEvent(60, 1, 1, 64)
    with pytest.raises(ValueError):
        NoteEvent(60, 0, 1, 128)


def test_sequence_sorted_by_onset_then_pitch():
    seq = NoteSequence([NoteEvent(64, 1, 2, 1), NoteEvent(60, 1, 2, 1), NoteEvent(70, 0, 2, 1)])
    assert [n.pitch for n in seq] == [70, 60, 64]
    assert seq.end_time == 2


# --- mido as an independent reader / writer ------------------------------------

def mido_notes(data):
    """(pitch, onset, offset, velocity) as mido's tempo-aware playback sees them."""
    now, open_, out = 0.0, {}, []
    for msg in mido.MidiFile(file=io.BytesIO(data)):
        now += msg.time
        if msg.type == "note_on" and msg.velocity > 0:
            open_[msg.note] = (now, msg.velocity)
        elif msg.type in ("note_on", "note_off") and msg.note in open_:
            on, vel = open_.pop(msg.note)
            out.append((msg.note, on, now, vel))
    return sorted(out)


@settings(max_examples=100)
@given(note_sequences())
def test_mido_reads_what_we_write(seq):
    theirs = mido_notes(midi_bytes(seq))
    ours = sorted((n.pitch, n.onset, n.offset, n.velocity) for n in seq)
    assert len(theirs) == len(ours)
    for a, b in zip(ours, theirs):
        assert (a[0], a[3]) == (b[0], b[3])
        assert abs(a[1] - b[1]) <= 1.05e-3 and abs(a[2] - b[2]) <= 1.05e-3


@settings(max_examples=100)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([96, 480, 960]))
def test_we_read_what_mido_writes(seed, tpb):
    rng = np.random.default_rng(seed)
    mid = mido.MidiFile(type=1, ticks_per_beat=tpb)
    tempo = mido.MidiTrack()
    last = 0
    for tick in sorted(rng.integers(0, 20 * tpb, 4)):
        tempo.append(mido.MetaMessage("set_tempo", tempo=int(rng.integers(250_000, 1_500_000)), time=int(tick) - last))
        last = int(tick)
    events = []
    for pitch in rng.choice(np.arange(21, 109), 6, replace=False):
        on = int(rng.integers(0, 20 * tpb))
        events.append((on, 1, int(pitch), int(rng.integers(1, 128))))
        events.append((on + int(rng.integers(1, 4 * tpb)), 0, int(pitch), 0))
    notes = mido.MidiTrack()
    last = 0
    for tick, kind, pitch, vel in sorted(events):
        notes.append(mido.Message("note_on" if kind else "note_off", note=pitch, velocity=vel, time=tick - last))
        last = tick
    mid.tracks += [tempo, notes]
    buf = io.BytesIO()
    mid.save(file=buf)
    data = buf.getvalue()
    ours = sorted((n.pitch, n.onset, n.offset, n.velocity) for n in parse_midi(data))
    theirs = mido_notes(data)
    assert len(ours) == len(theirs) == 6
    for a, b in zip(ours, theirs):
        assert (a[0], a[3]) == (b[0], b[3])
        assert abs(a[1] - b[1]) < 1e-9 and abs(a[2] - b[2]) < 1e-9
