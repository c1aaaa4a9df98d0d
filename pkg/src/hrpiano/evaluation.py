"""Note-level precision / recall / F1 in the onset, onset+offset and onset+offset+velocity regimes."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

REGIMES = ("onset", "onset_offset", "full")
REGIME_TITLES = {"onset": "Onset", "onset_offset": "Onset & Offset", "full": "Onset, Offset & Velocity"}

# distances are compared with a small slack so that e.g. 0.05 s computed as
# 1.05 - 1.0 = 0.05000000000000004 still counts as inside a 50 ms window
_SLACK = 1e-9


@dataclass(frozen=True)
class MatchTolerances:
    onset_tol: float = 0.05
    offset_ratio: float = 0.2
    offset_min_tol: float = 0.05
    velocity_tol: float = 0.1

    def __post_init__(self):
        for name in ("onset_tol", "offset_ratio", "offset_min_tol", "velocity_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def _arrays(seq):
    notes = list(seq)
    pitch = np.array([n.pitch for n in notes], dtype=int)
    on = np.array([n.onset for n in notes], dtype=float)
    off = np.array([n.offset for n in notes], dtype=float)
    vel = np.array([n.velocity for n in notes], dtype=float)
    return pitch, on, off, vel


def max_matching(hits: np.ndarray) -> list:
    """Maximum-cardinality bipartite matching on a boolean n_ref x n_est matrix.

    Kuhn's augmenting-path search; returns sorted (ref, est) index pairs.
    """
    n_ref, n_est = hits.shape
    adj = [np.flatnonzero(hits[i]).tolist() for i in range(n_ref)]
    owner = [-1] * n_est

    def augment(i, seen):
        for j in adj[i]:
            if seen[j]:
                continue
            seen[j] = True
            if owner[j] < 0 or augment(owner[j], seen):
                owner[j] = i
                return True
        return False

    for i in range(n_ref):
        if adj[i]:
            augment(i, [False] * n_est)
    return sorted((i, j) for j, i in enumerate(owner) if i >= 0)


def _match_blocks(hits: np.ndarray, ref_pitch, est_pitch) -> list:
    # candidates never cross pitches, so each pitch is an independent (small) problem
    pairs = []
    for p in np.intersect1d(ref_pitch, est_pitch):
        ri, ei = np.flatnonzero(ref_pitch == p), np.flatnonzero(est_pitch == p)
        for a, b in max_matching(hits[np.ix_(ri, ei)]):
            pairs.append((int(ri[a]), int(ei[b])))
    return sorted(pairs)


def onset_candidates(ref, est, tol: MatchTolerances = MatchTolerances()) -> np.ndarray:
    rp, ron, _, _ = _arrays(ref)
    ep, eon, _, _ = _arrays(est)
    same = rp[:, None] == ep[None, :]
    return same & (np.abs(ron[:, None] - eon[None, :]) <= tol.onset_tol + _SLACK)


def offset_candidates(ref, est, tol: MatchTolerances = MatchTolerances()) -> np.ndarray:
    _, ron, roff, _ = _arrays(ref)
    _, _, eoff, _ = _arrays(est)
    window = np.maximum(tol.offset_min_tol, tol.offset_ratio * (roff - ron))
    return np.abs(roff[:, None] - eoff[None, :]) <= window[:, None] + _SLACK


def velocity_scale(ref, est, pairs):
    """Ref velocities divided by their maximum, and est velocities times the
    least-squares factor that maps them onto those over the matched ``pairs``.

    Returns None when the ref velocities are all zero.
    """
    _, _, _, rv = _arrays(ref)
    _, _, _, ev = _arrays(est)
    top = rv.max(initial=0.0)
    if top <= 0:
        return None
    rv = rv / top
    ri = np.array([i for i, _ in pairs], dtype=int)
    ei = np.array([j for _, j in pairs], dtype=int)
    denom = float(np.sum(ev[ei] ** 2))
    factor = float(np.sum(ev[ei] * rv[ri]) / denom) if denom > 0 else 0.0
    return rv, ev * factor, factor


def match_onset(ref, est, tol: MatchTolerances = MatchTolerances()) -> list:
    rp, ep = _arrays(ref)[0], _arrays(est)[0]
    return _match_blocks(onset_candidates(ref, est, tol), rp, ep)


def match_onset_offset(ref, est, tol: MatchTolerances = MatchTolerances()) -> list:
    rp, ep = _arrays(ref)[0], _arrays(est)[0]
    hits = onset_candidates(ref, est, tol) & offset_candidates(ref, est, tol)
    return _match_blocks(hits, rp, ep)


def match_full(ref, est, tol: MatchTolerances = MatchTolerances()):
    """Onset+offset candidates that also agree in rescaled velocity.

    The velocity factor is fitted on the onset+offset matching, then every
    candidate is re-checked and matched again. Returns None when the ref
    velocities cannot be normalised.
    """
    rp, ep = _arrays(ref)[0], _arrays(est)[0]
    if len(rp) == 0 or len(ep) == 0:
        return []
    hits = onset_candidates(ref, est, tol) & offset_candidates(ref, est, tol)
    scaled = velocity_scale(ref, est, _match_blocks(hits, rp, ep))
    if scaled is None:
        return None
    rv, ev, _ = scaled
    hits = hits & (np.abs(rv[:, None] - ev[None, :]) <= tol.velocity_tol + _SLACK)
    return _match_blocks(hits, rp, ep)


def prf(pairing, n_ref: int, n_est: int):
    matched = len(pairing)
    if n_ref == 0 and n_est == 0:
        return 1.0, 1.0, 1.0
    p = matched / n_est if n_est else 0.0
    r = matched / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


@dataclass
class RegimeScore:
    precision: float
    recall: float
    f1: float
    pairs: list = field(default_factory=list)


@dataclass
class EvalReport:
    scores: dict  # regime name -> RegimeScore (full may be missing)
    n_ref: int
    n_est: int
    notes: list = field(default_factory=list)

    def __getitem__(self, regime) -> RegimeScore:
        return self.scores[regime]

    def f1(self, regime) -> float:
        return self.scores[regime].f1


def evaluate(ref, est, tol: MatchTolerances = MatchTolerances()) -> EvalReport:
    n_ref, n_est = len(list(ref)), len(list(est))
    notes = []
    if n_ref == 0 and n_est == 0:
        notes.append("both empty")
    scores = {}
    for regime, fn in (("onset", match_onset), ("onset_offset", match_onset_offset), ("full", match_full)):
        pairs = fn(ref, est, tol)
        if pairs is None:
            notes.append("reference velocities all zero; velocity regime skipped")
            continue
        scores[regime] = RegimeScore(*prf(pairs, n_ref, n_est), pairs)
    return EvalReport(scores, n_ref, n_est, notes)


def aggregate(reports, pooled: bool = False) -> dict:
    """Dataset scores per regime: mean over pieces, or pooled over all notes."""
    reports = list(reports)
    out = {}
    for regime in REGIMES:
        have = [r for r in reports if regime in r.scores]
        if not have:
            continue
        if pooled:
            matched = sum(len(r[regime].pairs) for r in have)
            n_ref = sum(r.n_ref for r in have)
            n_est = sum(r.n_est for r in have)
            out[regime] = prf(range(matched), n_ref, n_est)
        else:
            out[regime] = tuple(float(np.mean([getattr(r[regime], k) for r in have]))
                                for k in ("precision", "recall", "f1"))
    return out


def format_table(named_reports, pooled: bool = False) -> str:
    """Plain-text table of P / R / F1 (percent) per file and regime, plus the dataset line."""
    head = f"{'file':30s}" + "".join(f" | {REGIME_TITLES[r]:^26s}" for r in REGIMES)
    sub = f"{'':30s}" + " | {:>8s}{:>9s}{:>9s}".format("P", "R", "F1") * len(REGIMES)
    lines = [head, sub, "-" * len(head)]

    def row(name, triples):
        cells = []
        for r in REGIMES:
            t = triples.get(r)
            cells.append(" | " + ("{:8.1f}{:9.1f}{:9.1f}".format(*(100 * x for x in t)) if t else f"{'n/a':>26s}"))
        return f"{name[:30]:30s}" + "".join(cells)

    reports = []
    for name, rep in named_reports:
        reports.append(rep)
        triples = {r: (s.precision, s.recall, s.f1) for r, s in rep.scores.items()}
        line = row(name, triples)
        if rep.notes:
            line += "  (" + "; ".join(rep.notes) + ")"
        lines.append(line)
    if len(reports) > 1:
        lines.append("-" * len(head))
        lines.append(row("pooled" if pooled else "mean", aggregate(reports, pooled)))
    return "\n".join(lines)


def report_lines(named_reports, pooled: bool = False) -> list:
    """One JSON object per (file, regime) plus one per regime for the dataset."""
    lines, reports = [], []
    for name, rep in named_reports:
        reports.append(rep)
        for regime, s in rep.scores.items():
            lines.append(json.dumps({"file": name, "regime": regime, "precision": s.precision,
                                     "recall": s.recall, "f1": s.f1, "n_ref": rep.n_ref,
                                     "n_est": rep.n_est, "notes": rep.notes}))
    for regime, (p, r, f) in aggregate(reports, pooled).items():
        lines.append(json.dumps({"file": "*", "aggregate": "pooled" if pooled else "mean",
                                 "regime": regime, "precision": p, "recall": r, "f1": f}))
    return lines
