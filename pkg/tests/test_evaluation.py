import itertools

import mir_eval

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrpiano.evaluation import (MatchTolerances, aggregate, evaluate, format_table, match_full, match_onset,
                                match_onset_offset, max_matching, offset_candidates, onset_candidates, prf,
                                report_lines, velocity_scale)
from hrpiano.midi import NoteEvent, NoteSequence

TOL = MatchTolerances()


def seq(*notes):
    return NoteSequence([NoteEvent(*n) for n in notes])


def brute_force(hits):
    """Largest set of one-to-one pairs by trying every assignment of refs to ests."""
    n_ref, n_est = hits.shape
    best = 0
    options = [[None] + [j for j in range(n_est) if hits[i, j]] for i in range(n_ref)]
    for choice in itertools.product(*options):
        used = [j for j in choice if j is not None]
        if len(used) == len(set(used)):
            best = max(best, len(used))
    return best


def full_hits(ref, est, tol=TOL):
    hits = onset_candidates(ref, est, tol) & offset_candidates(ref, est, tol)
    if not hits.size:
        return hits
    rv, ev, _ = velocity_scale(ref, est, match_onset_offset(ref, est, tol))
    return hits & (np.abs(rv[:, None] - ev[None, :]) <= tol.velocity_tol + 1e-9)


@st.composite
def notes(draw, max_notes=8):
    """Up to ``max_notes`` notes on three pitches; same-pitch notes never overlap."""
    out = []
    for _ in range(draw(st.integers(0, max_notes))):
        pitch = draw(st.integers(60, 62))
        on = draw(st.floats(0, 1))
        off = on + draw(st.floats(0.05, 0.5))
        if any(n.pitch == pitch and on < n.offset and n.onset < off for n in out):
            continue
        out.append(NoteEvent(pitch, on, off, draw(st.integers(1, 127))))
    return NoteSequence(out)


@st.composite
def small_pair(draw):
    return draw(notes()), draw(notes())


@settings(max_examples=300)
@given(small_pair())
def test_matching_is_maximum(pair):
    ref, est = pair
    on = onset_candidates(ref, est)
    both = on & offset_candidates(ref, est)
    assert len(match_onset(ref, est)) == brute_force(on)
    assert len(match_onset_offset(ref, est)) == brute_force(both)
    assert len(match_full(ref, est)) == brute_force(full_hits(ref, est))
    r = evaluate(ref, est)
    assert r.f1("onset") >= r.f1("onset_offset") >= r.f1("full")


@settings(max_examples=100)
@given(small_pair())
def test_self_evaluation_is_perfect(pair):
    ref, _ = pair
    r = evaluate(ref, ref)
    for regime in ("onset", "onset_offset", "full"):
        assert (r[regime].precision, r[regime].recall, r[regime].f1) == (1.0, 1.0, 1.0)


@settings(max_examples=100)
@given(small_pair(), st.floats(0, 0.05))
def test_shifted_onsets_stay_matched(pair, eps):
    ref, _ = pair
    shifted = NoteSequence([NoteEvent(n.pitch, n.onset + eps, n.offset + eps, n.velocity) for n in ref])
    assert evaluate(ref, shifted).f1("onset") == 1.0


def test_max_matching_prefers_augmenting_path():
    # greedy would pair ref0-est0 and strand ref1
    hits = np.array([[1, 1], [1, 0]], dtype=bool)
    assert len(max_matching(hits)) == 2


def test_onset_boundary():
    ref = seq((60, 1.0, 2.0, 80))
    assert len(match_onset(ref, seq((60, 1.049, 2.0, 80)))) == 1
    assert len(match_onset(ref, seq((60, 1.051, 2.0, 80)))) == 0
    assert len(match_onset(ref, seq((60, 0.951, 2.0, 80)))) == 1
    assert len(match_onset(ref, seq((60, 1.0, 2.0, 80)))) == 1
    assert len(match_onset(ref, seq((61, 1.0, 2.0, 80)))) == 0


def test_offset_tolerances():
    ref = seq((60, 1.0, 2.0, 80))
    assert len(match_onset_offset(ref, seq((60, 1.0, 2.19, 80)))) == 1
    assert len(match_onset_offset(ref, seq((60, 1.0, 2.21, 80)))) == 0
    short = seq((60, 1.0, 1.1, 80))
    assert len(match_onset_offset(short, seq((60, 1.0, 1.14, 80)))) == 1
    assert len(match_onset_offset(short, seq((60, 1.0, 1.16, 80)))) == 0


def test_regime_separation():
    ref = seq((60, 0, 1, 80), (62, 2, 3, 80))
    est = seq((60, 0, 1.4, 80), (62, 2, 3.4, 80))
    r = evaluate(ref, est)
    assert r.f1("onset") == 1.0 and r.f1("onset_offset") == 0.0


def test_velocity_scaling():
    ref = seq((60, 0, 1, 100), (62, 2, 3, 50), (64, 4, 5, 80))
    half = seq((60, 0, 1, 50), (62, 2, 3, 25), (64, 4, 5, 40))
    r = evaluate(ref, half)
    assert r.f1("full") == 1.0
    assert velocity_scale(ref, half, match_onset_offset(ref, half))[2] == pytest.approx(2 / 100)
    wild = seq((60, 0, 1, 100), (62, 2, 3, 50), (64, 4, 5, 5))
    pairs = match_full(ref, wild)
    assert [p[0] for p in pairs] == [0, 1]


def test_zero_velocity_reference_skips_regime():
    r = evaluate(seq((60, 0, 1, 0)), seq((60, 0, 1, 10)))
    assert "full" not in r.scores and r.notes


def test_prf_cases():
    assert prf(range(10), 10, 10) == (1, 1, 1)
    p, r, f = prf(range(8), 9, 10)
    assert (round(p, 3), round(r, 3), round(f, 3)) == (0.8, 0.889, 0.842)
    assert prf([], 3, 4) == (0, 0, 0)
    assert prf([], 0, 0) == (1, 1, 1)
    assert prf([], 3, 0)[0] == 0


def test_two_vs_one():
    r = evaluate(seq((60, 0, 1, 80), (64, 2, 3, 80)), seq((60, 0, 1, 80)))
    assert (r["onset"].precision, r["onset"].recall) == (1.0, 0.5)
    assert r.f1("onset") == pytest.approx(2 / 3)


def test_both_empty():
    r = evaluate(NoteSequence(), NoteSequence())
    assert all(r.f1(k) == 1.0 for k in ("onset", "onset_offset", "full"))
    assert "both empty" in r.notes


def test_aggregation_modes():
    a = evaluate(seq((60, 0, 1, 80)), seq((60, 0, 1, 80)))
    b = evaluate(seq((60, 0, 1, 80), (62, 0, 1, 80), (64, 0, 1, 80)), NoteSequence())
    mean = aggregate([a, b])
    pooled = aggregate([a, b], pooled=True)
    assert mean["onset"] == (0.5, 0.5, 0.5)
    assert pooled["onset"][:2] == (1.0, 0.25)
    # order does not matter
    assert aggregate([b, a]) == mean


def test_report_formats():
    a = evaluate(seq((60, 0, 1, 80)), seq((60, 0, 1, 80)))
    table = format_table([("x.mid", a), ("y.mid", a)])
    assert "Onset & Offset" in table and "mean" in table
    lines = report_lines([("x.mid", a)])
    assert len(lines) == 3 + 3
    assert '"regime": "onset"' in lines[0]


@st.composite
def grid_notes(draw, max_notes=8):
    """Times on a 7 ms grid, away from the rounding mir_eval applies to distances."""
    out = []
    for _ in range(draw(st.integers(1, max_notes))):
        on = 0.007 * draw(st.integers(0, 150))
        out.append(NoteEvent(draw(st.integers(60, 62)), on, on + 0.007 * draw(st.integers(5, 80)), 80))
    return NoteSequence(out)


def mir_eval_arrays(seq):
    iv = np.array([[n.onset, n.offset] for n in seq])
    hz = np.array([440.0 * 2 ** ((n.pitch - 69) / 12) for n in seq])
    return iv, hz


@settings(max_examples=300)
@given(grid_notes(), grid_notes())
def test_agrees_with_mir_eval(ref, est):
    ri, rp = mir_eval_arrays(ref)
    ei, ep = mir_eval_arrays(est)
    r = evaluate(ref, est)
    for regime, ratio in (("onset", None), ("onset_offset", 0.2)):
        p, rc, f, _ = mir_eval.transcription.precision_recall_f1_overlap(ri, rp, ei, ep, offset_ratio=ratio)
        assert (r[regime].precision, r[regime].recall, r[regime].f1) == pytest.approx((p, rc, f), abs=1e-12)
