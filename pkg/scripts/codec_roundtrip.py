"""Encode random single-pitch note sets into targets and decode them back; report the worst error."""
import argparse
import time

import numpy as np

from hrpiano.labels import DecodeThresholds, FrameGrid, encode_targets, extract_notes
from hrpiano.midi import NoteEvent, NoteSequence


def random_lane(rng, frame=0.02):
    pitch = int(rng.integers(21, 109))
    n = int(rng.integers(1, 7))
    onsets = 0.2 + np.cumsum(rng.uniform(3 * frame, 0.4, n))
    notes = []
    for i, on in enumerate(onsets):
        off = on + rng.uniform(3 * frame, 0.5)
        if i + 1 < n:
            off = min(off, onsets[i + 1])
        notes.append(NoteEvent(pitch, on, off, int(rng.integers(1, 128))))
    return notes


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=1000)
    ap.add_argument("--J", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    worst_t, bad_vel, missing = 0.0, 0, 0
    start = time.perf_counter()
    for _ in range(args.trials):
        notes = random_lane(rng)
        grid = FrameGrid.covering(notes[-1].offset + 0.3)
        got = list(extract_notes(encode_targets(NoteSequence(notes), grid, args.J).as_outputs(),
                                 DecodeThresholds(), grid))
        if len(got) != len(notes):
            missing += 1
            continue
        for a, b in zip(notes, got):
            worst_t = max(worst_t, abs(a.onset - b.onset), abs(a.offset - b.offset))
            bad_vel += a.velocity != b.velocity
    elapsed = time.perf_counter() - start
    print(f"trials {args.trials}  count mismatches {missing}  velocity mismatches {bad_vel}")
    print(f"max time error {worst_t:.3e} s  ({elapsed:.2f} s)")


if __name__ == "__main__":
    main()
