"""Losses, Adam, plateau scheduling, segmentation, synthetic audio and the training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .frontend import SAMPLE_RATE, AudioClip, CqtConfig, cqt, resample
from .labels import FrameGrid, ModelOutputs, RollTargets, encode_targets
from .midi import NoteEvent, NoteSequence
from .nn import NumericalError, backward, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

CLAMP = 1e-7
SEGMENT_SECONDS = 20.0


# ---------------------------------------------------------------------------
# losses

def bce(y, y_hat):
    """Elementwise binary cross-entropy with soft targets; predictions clamped 1e-7 from 0 and 1."""
    if torch.is_tensor(y_hat) or torch.is_tensor(y):
        y_hat = torch.as_tensor(y_hat).clamp(CLAMP, 1 - CLAMP)
        y = torch.as_tensor(y, dtype=y_hat.dtype)
        return -y * torch.log(y_hat) - (1 - y) * torch.log(1 - y_hat)
    y_hat = np.clip(y_hat, CLAMP, 1 - CLAMP)
    return -y * np.log(y_hat) - (1 - y) * np.log(1 - y_hat)


@dataclass
class LossBreakdown:
    on: torch.Tensor
    off: torch.Tensor
    fr: torch.Tensor
    vel: torch.Tensor
    total: torch.Tensor

    def item(self) -> dict:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def _target(plane, like):
    return torch.as_tensor(plane, dtype=like.dtype).reshape(like.shape)


def total_loss(outputs: ModelOutputs, targets, reduction: str = "mean") -> LossBreakdown:
    """Onset, offset, frame and onset-masked velocity BCE, summed over frames and keys.

    ``targets`` is a RollTargets or a dict of tensors with the same plane names.
    ``reduction='mean'`` divides every term by the number of target cells.
    """
    get = targets.get if isinstance(targets, dict) else lambda k: getattr(targets, k)
    on, off, fr, vel = outputs.planes()
    shapes = {tuple(p.shape) for p in (on, off, fr, vel)}
    if len(shapes) != 1:
        raise ValueError(f"output planes disagree in shape: {sorted(shapes)}")
    if tuple(np.shape(get("g_on"))) != tuple(on.shape) and np.size(get("g_on")) != on.numel():
        raise ValueError(f"targets {np.shape(get('g_on'))} do not match outputs {tuple(on.shape)}")
    l_on = bce(_target(get("g_on"), on), on).sum()
    l_off = bce(_target(get("g_off"), off), off).sum()
    l_fr = bce(_target(get("b_fr"), fr), fr).sum()
    l_vel = (_target(get("b_on"), vel) * bce(_target(get("v"), vel), vel)).sum()
    if reduction == "mean":
        n = on.numel()
        l_on, l_off, l_fr, l_vel = l_on / n, l_off / n, l_fr / n, l_vel / n
    elif reduction != "sum":
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    return LossBreakdown(l_on, l_off, l_fr, l_vel, l_on + l_off + l_fr + l_vel)


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class OptimState:
    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: OptimState, named_params) -> None:
    """One bias-corrected Adam update, in place. Parameters without a gradient are skipped."""
    named_params = [(n, p) for n, p in named_params if p.grad is not None]
    for name, p in named_params:
        if not torch.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient for {name}; step aborted")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for name, p in named_params:
            g = p.grad
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / c1)


@dataclass
class PlateauSchedule:
    """Reduce-on-plateau with torch's defaults: mode min, factor 0.1, patience 10,
    relative threshold 1e-4, no cooldown, no floor."""
    lr: float = 6e-4
    factor: float = 0.1
    patience: int = 10
    threshold: float = 1e-4
    min_lr: float = 0.0
    eps: float = 1e-8
    best: float = math.inf
    bad_evals: int = 0

    def step(self, value: float) -> float:
        if value < self.best * (1 - self.threshold):
            self.best = value
            self.bad_evals = 0
        else:
            self.bad_evals += 1
        if self.bad_evals > self.patience:
            new = max(self.lr * self.factor, self.min_lr)
            if self.lr - new > self.eps:
                self.lr = new
            self.bad_evals = 0
        return self.lr


def plateau_schedule(history, lr: float = 6e-4) -> float:
    if not len(history):
        raise ValueError("empty validation history")
    sched = PlateauSchedule(lr)
    for value in history:
        sched.step(value)
    return sched.lr


# ---------------------------------------------------------------------------
# data

def segment(clip: AudioClip, seq, length: float = SEGMENT_SECONDS):
    """Consecutive windows of ``length`` seconds, the last one zero-padded.

    A note crossing a window edge is clipped into every window it touches,
    with times re-based to the window start.
    """
    n = int(round(length * clip.sample_rate))
    count = max(1, -(-len(clip) // n))
    notes = list(seq)
    out = []
    for i in range(count):
        chunk = clip.samples[i * n:(i + 1) * n]
        chunk = np.pad(chunk, (0, n - len(chunk)))
        start, stop = i * length, (i + 1) * length
        local = [NoteEvent(x.pitch, max(x.onset, start) - start, min(x.offset, stop) - start, x.velocity)
                 for x in notes if x.onset < stop and x.offset > start
                 and min(x.offset, stop) - max(x.onset, start) > 0]
        out.append((AudioClip(chunk, clip.sample_rate), NoteSequence(local)))
    return out


@dataclass
class SynthSpec:
    notes: NoteSequence
    partials: int = 8
    decay: float = 3.0

    def __post_init__(self):
        if self.partials < 1:
            raise ValueError("need at least one partial")
        if self.decay < 0:
            raise ValueError("decay must be >= 0")


def midi_to_hz(pitch) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12)


def synthesize(spec: SynthSpec, sample_rate: int = SAMPLE_RATE, duration: float | None = None,
               normalize: bool = True) -> AudioClip:
    """Additive harmonic tones with exponential decay, gated at each note's offset."""
    notes = list(spec.notes)
    if duration is None:
        duration = max((n.offset for n in notes), default=0.0)
    y = np.zeros(int(round(duration * sample_rate)))
    nyquist = sample_rate / 2
    for n in notes:
        a = int(round(n.onset * sample_rate))
        b = min(len(y), int(round(n.offset * sample_rate)))
        if b <= a:
            continue
        t = np.arange(b - a) / sample_rate
        f0 = midi_to_hz(n.pitch)
        tone = np.zeros(b - a)
        for h in range(1, spec.partials + 1):
            if h * f0 >= nyquist:
                break
            tone += np.sin(2 * np.pi * h * f0 * t) / h
        y[a:b] += n.velocity / 127 * np.exp(-spec.decay * t) * tone
    if normalize:
        peak = np.max(np.abs(y), initial=0.0)
        if peak > 0:
            y *= 0.9 / peak
    return AudioClip(y, sample_rate)


def random_notes(rng: np.random.Generator, count: int, duration: float = SEGMENT_SECONDS,
                 pitch_range=(36, 96), min_len: float = 0.3, max_len: float = 1.5):
    """Random notes inside ``duration``; same-pitch notes never overlap."""
    notes = []
    while len(notes) < count:
        pitch = int(rng.integers(*pitch_range))
        on = float(rng.uniform(0.5, duration - max_len - 0.5))
        off = on + float(rng.uniform(min_len, max_len))
        if any(n.pitch == pitch and on < n.offset + 0.1 and n.onset < off + 0.1 for n in notes):
            continue
        notes.append(NoteEvent(pitch, on, off, int(rng.integers(30, 128))))
    return NoteSequence(notes)


@dataclass
class Example:
    spec: np.ndarray  # T x F log-CQT
    targets: RollTargets
    name: str = ""


def make_examples(clip: AudioClip, seq, cqt_cfg: CqtConfig = CqtConfig(), J: int = 5,
                  name: str = "") -> list:
    if clip.sample_rate != cqt_cfg.sample_rate:
        clip = resample(clip, cqt_cfg.sample_rate)
    out = []
    for i, (piece, notes) in enumerate(segment(clip, seq)):
        s = cqt(piece, cqt_cfg)
        grid = FrameGrid(s.n_frames, s.frame_period)
        out.append(Example(s.values, encode_targets(notes, grid, J), f"{name}#{i}"))
    return out


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    lr: float = 6e-4
    batch_size: int = 2
    seed: int = 0
    reduction: str = "mean"
    J: int = 5
    max_steps: int = 1000
    checkpoint_every: int = 0
    val_every: int = 50
    crop_frames: int = 0  # 0 trains on whole segments
    onset_crops: float = 0.0  # share of crops placed around a random onset

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**values)


def _batch(examples, cfg: TrainConfig, step: int):
    rng = np.random.default_rng([cfg.seed, step])
    picks = rng.integers(len(examples), size=cfg.batch_size)
    xs, offsets = [], []
    planes = {k: [] for k in RollTargets.PLANES}
    for i in picks:
        ex = examples[i]
        n = ex.spec.shape[0]
        crop = n if cfg.crop_frames <= 0 else min(cfg.crop_frames, n)
        start = int(rng.integers(0, n - crop + 1))
        frames = np.flatnonzero(ex.targets.b_on.any(axis=1)) if cfg.onset_crops > 0 and crop < n else ()
        if len(frames) and rng.random() < cfg.onset_crops:
            # the onset lands anywhere inside the crop
            centre = int(rng.choice(frames))
            start = int(np.clip(centre - rng.integers(0, crop), 0, n - crop))
        xs.append(ex.spec[start:start + crop])
        offsets.append(start)
        for k in planes:
            planes[k].append(getattr(ex.targets, k)[start:start + crop])
    # uneven segment lengths are trimmed to the shortest
    t = min(len(x) for x in xs)
    x = torch.from_numpy(np.stack([a[:t] for a in xs]).astype(np.float32))[:, None]
    tgt = {k: torch.from_numpy(np.stack([a[:t] for a in v]).astype(np.float32)) for k, v in planes.items()}
    return x, tgt, torch.tensor(offsets)


def run_model(model, x, offsets=None) -> ModelOutputs:
    if offsets is not None and getattr(model, "accepts_offsets", False):
        return model(x, offsets=offsets)
    return model(x)


def evaluate_loss(model, examples, reduction="mean") -> float:
    with torch.no_grad():
        losses = []
        for ex in examples:
            x = torch.from_numpy(ex.spec.astype(np.float32))[None, None]
            tgt = {k: torch.from_numpy(getattr(ex.targets, k).astype(np.float32))[None]
                   for k in RollTargets.PLANES}
            losses.append(float(total_loss(model(x), tgt, reduction).total))
    return float(np.mean(losses))


@dataclass
class TrainResult:
    history: list  # (step, total loss, lr)
    optim: OptimState
    schedule: PlateauSchedule


def _state_records(optim: OptimState):
    rec = {}
    for name, m in optim.m.items():
        rec[f"@adam/m/{name}"] = m
        rec[f"@adam/v/{name}"] = optim.v[name]
    return rec


def save_training_state(path, model, optim: OptimState, sched: PlateauSchedule, cfg: TrainConfig):
    path = Path(path)
    save_checkpoint(path, model, _state_records(optim))
    meta = {"step": optim.step, "lr": optim.lr, "beta1": optim.beta1, "beta2": optim.beta2,
            "eps": optim.eps, "schedule": asdict(sched), "train_config": asdict(cfg)}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def load_training_state(path, model):
    path = Path(path)
    extra = load_checkpoint(path, model)
    meta_path = path.with_suffix(".json")
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} missing; cannot resume optimizer state")
    meta = json.loads(meta_path.read_text())
    optim = OptimState(meta["lr"], meta["beta1"], meta["beta2"], meta["eps"], meta["step"])
    params = dict(model.named_parameters())
    for key, value in extra.items():
        if key.startswith("@adam/"):
            _, kind, name = key.split("/", 2)
            getattr(optim, kind)[name] = torch.from_numpy(value).to(params[name].dtype)
    sched = meta["schedule"]
    sched["best"] = float(sched["best"])
    return optim, PlateauSchedule(**sched)


def train(model, examples, cfg: TrainConfig, out_dir=None, resume=None, log_fn=None) -> TrainResult:
    """Adam on random batches of ``examples`` with a plateau-scheduled learning rate.

    Batch selection depends only on (seed, step), so a run resumed from a
    checkpoint retraces the uninterrupted trajectory.
    """
    if not examples:
        raise ValueError("no training examples")
    torch.manual_seed(cfg.seed)
    if resume is not None:
        optim, sched = load_training_state(resume, model)
    else:
        optim, sched = OptimState(lr=cfg.lr), PlateauSchedule(lr=cfg.lr)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.tsv", "a")
    named = list(model.named_parameters())
    history = []
    try:
        while optim.step < cfg.max_steps:
            step = optim.step
            x, tgt, offsets = _batch(examples, cfg, step)
            model.zero_grad(set_to_none=True)
            losses = total_loss(run_model(model, x, offsets), tgt, cfg.reduction)
            backward(losses.total, named)
            adam_step(optim, named)
            total = float(losses.total.detach())
            history.append((optim.step, total, optim.lr))
            if log_file is not None:
                parts = losses.item()
                log_file.write(f"{optim.step}\t{optim.lr:.3e}\t" +
                               "\t".join(f"{k}={v:.6f}" for k, v in parts.items()) + "\n")
            if log_fn is not None:
                log_fn(optim.step, losses)
            if cfg.val_every and optim.step % cfg.val_every == 0:
                optim.lr = sched.step(evaluate_loss(model, examples, cfg.reduction))
            if out_dir is not None and cfg.checkpoint_every and optim.step % cfg.checkpoint_every == 0:
                save_training_state(out_dir / f"step{optim.step:06d}.amtw", model, optim, sched, cfg)
                save_training_state(out_dir / "last.amtw", model, optim, sched, cfg)
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        save_training_state(out_dir / "last.amtw", model, optim, sched, cfg)
    return TrainResult(history, optim, sched)
