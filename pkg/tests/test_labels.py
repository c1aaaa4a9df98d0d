import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrpiano.labels import (DecodeThresholds, FrameGrid, ModelOutputs, decode_precise_time, encode_regression,
                            encode_targets, extract_notes, load_roll, merge_close_notes, save_roll)
from hrpiano.midi import NoteEvent, NoteSequence

D = 0.02
GRID = FrameGrid(200, D)


def test_triangle_on_frame_centre():
    g = encode_regression([[1.0]], FrameGrid(100, D), 5)[:, 0]
    assert g[50] == pytest.approx(1.0)
    assert g[49] == pytest.approx(0.8) and g[51] == pytest.approx(0.8)
    assert g[48] == pytest.approx(0.6) and g[52] == pytest.approx(0.6)
    assert g[45] == 0.0 and g[55] == 0.0
    assert np.count_nonzero(g) == 9


def test_triangle_between_frames():
    g = encode_regression([[1.005]], FrameGrid(100, D), 5)[:, 0]
    assert g[49] == pytest.approx(0.75)
    assert g[50] == pytest.approx(0.95)
    assert g[51] == pytest.approx(0.85)


def test_precise_time_inverts_triangle():
    assert decode_precise_time(0.75, 0.95, 0.85, 1.0, D) == pytest.approx(1.005)
    assert decode_precise_time(0.8, 1.0, 0.8, 1.0, D) == pytest.approx(1.0)
    # flat top cannot be inverted, falls back to the frame centre
    assert decode_precise_time(0.5, 0.5, 0.5, 1.0, D) == 1.0


@settings(max_examples=200)
@given(st.floats(0.3, 3.5), st.integers(2, 8))
def test_triangle_invariants(t, J):
    g = encode_regression([[t]], GRID, J)[:, 0]
    assert np.all((g >= 0) & (g <= 1))
    # support is at most 2J frames wide, all within J * period of the event
    nz = np.flatnonzero(g)
    assert len(nz) <= 2 * J
    assert np.all(np.abs(nz * D - t) < J * D + 1e-12)
    # decoding the peak recovers the time exactly
    p = int(np.argmax(g))
    assert decode_precise_time(g[p - 1], g[p], g[p + 1], p * D, D) == pytest.approx(t, abs=1e-9)


def test_overlapping_triangles_take_max():
    g = encode_regression([[1.0, 1.06]], GRID, 5)[:, 0]
    alone = encode_regression([[1.0]], GRID, 5)[:, 0]
    other = encode_regression([[1.06]], GRID, 5)[:, 0]
    np.testing.assert_allclose(g, np.maximum(alone, other))


def test_encode_targets_planes():
    seq = NoteSequence([NoteEvent(60, 0.5, 1.0, 127), NoteEvent(21, 0.1, 0.2, 64)])
    tg = encode_targets(seq, GRID)
    k = 60 - 21
    # onset-inclusive, offset-exclusive
    assert tg.b_fr[25, k] == 1 and tg.b_fr[49, k] == 1 and tg.b_fr[50, k] == 0 and tg.b_fr[24, k] == 0
    assert tg.v[25, k] == 1.0 and tg.v[0, k] == 0
    np.testing.assert_array_equal(tg.b_on, tg.g_on > 0)
    assert tg.v[5, 0] == pytest.approx(64 / 127)
    with pytest.raises(ValueError):
        encode_targets(NoteSequence([NoteEvent(60, 3.9, 4.5, 1)]), GRID)


def outputs_from(tg):
    return tg.as_outputs()


@st.composite
def lane(draw):
    # onsets at least 3 frames apart, durations at least 3 frames, clear of the grid edges
    n = draw(st.integers(1, 6))
    gaps = draw(st.lists(st.floats(3 * D, 0.4), min_size=n, max_size=n))
    notes, t = [], 0.2
    for gap in gaps:
        t += gap
        dur = draw(st.floats(3 * D, 0.5))
        vel = draw(st.integers(1, 127))
        notes.append((t, t + dur, vel))
    pitch = draw(st.integers(21, 108))
    # a note ends no later than the next starts
    out = []
    for i, (on, off, vel) in enumerate(notes):
        if i + 1 < len(notes):
            off = min(off, notes[i + 1][0])
        if off - on >= 3 * D:
            out.append(NoteEvent(pitch, on, off, vel))
    return out


@settings(max_examples=200)
@given(lane())
def test_codec_roundtrip(notes):
    grid = FrameGrid.covering(max(n.offset for n in notes) + 0.3, D)
    tg = encode_targets(NoteSequence(notes), grid, 5)
    got = list(extract_notes(outputs_from(tg), DecodeThresholds(), grid))
    assert len(got) == len(notes)
    for a, b in zip(notes, got):
        assert b.pitch == a.pitch and b.velocity == a.velocity
        assert abs(b.onset - a.onset) < 1e-9
        assert abs(b.offset - a.offset) < 1e-9


def test_extract_uses_frame_drop_without_offset_peak():
    T = 100
    on = np.zeros((T, 88)); off = np.zeros((T, 88)); fr = np.zeros((T, 88)); vel = np.zeros((T, 88))
    on[9:12, 40] = [0.8, 1.0, 0.8]
    fr[10:30, 40] = 1
    vel[10, 40] = 0.5
    (n,) = extract_notes(ModelOutputs(on, off, fr, vel))
    assert n.onset == pytest.approx(0.2) and n.offset == pytest.approx(0.6)
    assert n.velocity == 64


def test_velocity_threshold_and_empty():
    T = 50
    z = np.zeros((T, 88))
    assert len(extract_notes(ModelOutputs(z, z, z, z))) == 0
    on = z.copy(); on[9:12, 0] = [0.8, 1.0, 0.8]
    fr = z.copy(); fr[10:20, 0] = 1
    assert len(extract_notes(ModelOutputs(on, z, fr, z))) == 0


def test_plateau_earliest_frame_wins():
    T = 60
    z = np.zeros((T, 88))
    on = z.copy(); on[10:12, 3] = 0.9
    fr = z.copy(); fr[10:30, 3] = 1
    vel = z.copy(); vel[:, 3] = 0.5
    # one note, from the first plateau frame; the flat top inverts to the midpoint
    (n,) = extract_notes(ModelOutputs(on, z, fr, vel))
    assert n.onset == pytest.approx(10.5 * D)


def test_extract_shape_errors():
    a = np.zeros((10, 88))
    with pytest.raises(ValueError):
        extract_notes(ModelOutputs(a, a, a, np.zeros((11, 88))))
    with pytest.raises(ValueError):
        extract_notes(ModelOutputs(a, a, a, a), grid=FrameGrid(9))


def test_merge_close_notes():
    seq = NoteSequence([NoteEvent(60, 0, 1.0, 50), NoteEvent(60, 1.02, 2, 90), NoteEvent(60, 3, 4, 10)])
    merged = list(merge_close_notes(seq, 0.04))
    assert [(n.onset, n.offset, n.velocity) for n in merged] == [(0, 2, 50), (3, 4, 10)]


def test_roll_file_roundtrip(tmp_path):
    tg = encode_targets(NoteSequence([NoteEvent(60, 0.5, 1.0, 100)]), GRID)
    save_roll(tmp_path / "t.roll", tg)
    back = load_roll(tmp_path / "t.roll")
    assert back.sharpness == 5 and back.frame_period == D
    for name in tg.PLANES:
        np.testing.assert_allclose(getattr(back, name), getattr(tg, name), atol=1e-7)
    (tmp_path / "bad.roll").write_bytes((tmp_path / "t.roll").read_bytes()[:100])
    with pytest.raises(ValueError):
        load_roll(tmp_path / "bad.roll")


def test_grid_covering():
    assert FrameGrid.covering(1.0, D).n_frames == 51
    assert FrameGrid.covering(1.0, D).span >= 1.0
