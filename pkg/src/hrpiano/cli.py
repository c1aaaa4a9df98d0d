"""Command-line entry point: transcribe, train, eval, encode, cqt, pianoroll.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical error.
Set AMT_LOG=DEBUG|INFO|WARNING to control log verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .evaluation import MatchTolerances, evaluate, format_table, report_lines
from .frontend import CqtConfig, WavError, cqt, load_wav, save_spectrogram, to_model_rate
from .labels import DecodeThresholds, FrameGrid, encode_targets, save_roll
from .midi import MIN_PITCH, N_KEYS, MidiError, NoteSequence, read_midi, write_midi
from .nn import CheckpointError, NumericalError

log = logging.getLogger("hrpiano")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
PX_PER_SECOND = 100
MIN_CANVAS_WIDTH = 100
MODEL_CONFIG_NAME = "model.cfg"
AUDIO_SUFFIXES = (".wav",)
MIDI_SUFFIXES = (".mid", ".midi")


class DataError(Exception):
    """Bad or missing input data; reported with exit code 3."""


def _require(path, what="file") -> Path:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _thresholds(args) -> DecodeThresholds:
    return DecodeThresholds(args.onset_thr, args.offset_thr, args.frame_thr, args.vel_thr)


def _model_config(args, checkpoint: Path | None = None):
    from .models import HRplusConfig, load_model_config

    if args.config:
        return load_model_config(_require(args.config, "model config"))
    if checkpoint is not None and (checkpoint.parent / MODEL_CONFIG_NAME).exists():
        return load_model_config(checkpoint.parent / MODEL_CONFIG_NAME)
    return HRplusConfig()


# ---------------------------------------------------------------------------
# commands

def cmd_transcribe(args) -> int:
    import torch

    from .inference import transcribe
    from .models import build_model
    from .nn import load_checkpoint

    audio = _require(args.audio, "audio")
    ckpt = _require(args.checkpoint, "checkpoint")
    torch.manual_seed(args.seed)
    model = build_model(_model_config(args, ckpt))
    load_checkpoint(ckpt, model)
    notes = transcribe(model, load_wav(audio), _thresholds(args), window=args.window)
    out = Path(args.out) if args.out else audio.with_suffix(".mid")
    write_midi(notes, out)
    print(f"{len(notes)} notes -> {out}")
    return EXIT_OK


def _pairs(dataset: Path):
    if not dataset.is_dir():
        raise DataError(f"dataset directory not found: {dataset}")
    audio = {p.stem: p for p in dataset.iterdir() if p.suffix.lower() in AUDIO_SUFFIXES}
    midi = {p.stem: p for p in dataset.iterdir() if p.suffix.lower() in MIDI_SUFFIXES}
    if not audio and not midi:
        raise DataError(f"no (wav, midi) pairs in {dataset}")
    unpaired = sorted(set(audio) ^ set(midi))
    if unpaired:
        raise DataError(f"unpaired files in {dataset}: {', '.join(unpaired)}")
    return [(audio[k], midi[k], k) for k in sorted(audio)]


def cmd_train(args) -> int:
    import torch

    from .models import build_model, model_config_text, read_key_values
    from .training import TrainConfig, make_examples, train

    pairs = _pairs(Path(args.dataset))
    values = read_key_values(_require(args.train_config, "training config")) if args.train_config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    if args.max_steps is not None:
        values["max_steps"] = args.max_steps
    cfg = TrainConfig.from_dict(values)
    model_cfg = _model_config(args)
    out = Path(args.out or "runs/train")
    out.mkdir(parents=True, exist_ok=True)
    (out / MODEL_CONFIG_NAME).write_text(model_config_text(model_cfg))

    examples = []
    for wav, mid, name in pairs:
        examples += make_examples(to_model_rate(load_wav(wav)), read_midi(mid), J=cfg.J, name=name)
    torch.manual_seed(cfg.seed)
    model = build_model(model_cfg)
    resume = _require(args.checkpoint, "checkpoint") if args.checkpoint else None

    def report(step, losses):
        if step % 10 == 0:
            log.info("step %d total %.6f", step, float(losses.total.detach()))

    result = train(model, examples, cfg, out_dir=out, resume=resume, log_fn=report)
    last = result.history[-1] if result.history else (result.optim.step, float("nan"), result.optim.lr)
    print(f"step {last[0]} loss {last[1]:.6f} lr {last[2]:.2e} -> {out / 'last.amtw'}")
    return EXIT_OK


def _eval_pairs(ref: Path, est: Path):
    if ref.is_dir() != est.is_dir():
        raise DataError("ref and est must both be files or both be directories")
    if not ref.is_dir():
        return [(ref.name, ref, est)]
    refs = {p.stem: p for p in sorted(ref.iterdir()) if p.suffix.lower() in MIDI_SUFFIXES}
    ests = {p.stem: p for p in sorted(est.iterdir()) if p.suffix.lower() in MIDI_SUFFIXES}
    if not refs:
        raise DataError(f"no MIDI files in {ref}")
    return [(k, refs[k], ests.get(k, est / f"{k}.mid")) for k in refs]


def cmd_eval(args) -> int:
    pairs = _eval_pairs(_require(args.ref, "reference"), _require(args.est, "estimate"))
    reports, failed = [], []
    for name, ref_path, est_path in pairs:
        try:
            reports.append((name, evaluate(read_midi(ref_path), read_midi(est_path), MatchTolerances())))
        except (MidiError, OSError) as exc:
            failed.append(name)
            print(f"{name}: cannot evaluate ({exc})", file=sys.stderr)
    print(format_table(reports, pooled=args.pooled))
    if args.out:
        Path(args.out).write_text("\n".join(report_lines(reports, pooled=args.pooled)) + "\n")
    return EXIT_DATA if failed else EXIT_OK


def cmd_encode(args) -> int:
    seq = read_midi(_require(args.midi, "MIDI"))
    cfg = CqtConfig()
    grid = FrameGrid(args.frames, cfg.frame_period) if args.frames else \
        FrameGrid.covering(seq.end_time, cfg.frame_period)
    targets = encode_targets(seq, grid, args.sharpness)
    out = Path(args.out) if args.out else Path(args.midi).with_suffix(".roll")
    save_roll(out, targets)
    print(f"{grid.n_frames} x {N_KEYS} targets -> {out}")
    return EXIT_OK


def cmd_cqt(args) -> int:
    audio = _require(args.audio, "audio")
    spec = cqt(to_model_rate(load_wav(audio)))
    out = Path(args.out) if args.out else audio.with_suffix(".cqts")
    save_spectrogram(out, spec)
    print(f"{spec.values.shape[0]} x {spec.values.shape[1]} spectrogram -> {out}")
    return EXIT_OK


def render_pianoroll(seq: NoteSequence) -> np.ndarray:
    """H x W x 3 uint8 image: row = pitch - 21, 100 px per second, grey level = velocity."""
    notes = sorted(seq, key=lambda n: n.onset)
    width = max(MIN_CANVAS_WIDTH, int(np.ceil(max((n.offset for n in notes), default=0) * PX_PER_SECOND)))
    img = np.zeros((N_KEYS, width, 3), dtype=np.uint8)
    for n in notes:  # painter's order: later onsets overwrite earlier ones
        x0 = int(round(n.onset * PX_PER_SECOND))
        x1 = max(x0 + 1, int(round(n.offset * PX_PER_SECOND)))
        img[n.pitch - MIN_PITCH, x0:x1] = int(round(255 * n.velocity / 127))
    return img


def write_ppm(path, img: np.ndarray):
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def cmd_pianoroll(args) -> int:
    seq = read_midi(_require(args.midi, "MIDI"))
    out = Path(args.out) if args.out else Path(args.midi).with_suffix(".ppm")
    img = render_pianoroll(seq)
    try:
        write_ppm(out, img)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from exc
    print(f"{img.shape[1]} x {img.shape[0]} piano roll -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hrpiano", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    d = DecodeThresholds()

    def common(p, out_help):
        p.add_argument("--out", help=out_help)
        p.add_argument("--seed", type=int, default=None if p.prog.endswith("train") else 0)

    p = sub.add_parser("transcribe", help="audio -> MIDI")
    p.add_argument("audio")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="model config (key = value); defaults to model.cfg next to the checkpoint")
    p.add_argument("--onset-thr", type=float, default=d.onset_thr)
    p.add_argument("--offset-thr", type=float, default=d.offset_thr)
    p.add_argument("--frame-thr", type=float, default=d.frame_thr)
    p.add_argument("--vel-thr", type=float, default=d.velocity_thr)
    p.add_argument("--window", type=int, default=0,
                   help="run the model on chunks of this many frames (0: whole 20 s segments)")
    common(p, "output MIDI path")
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("train", help="train on a directory of paired wav/midi files")
    p.add_argument("dataset")
    p.add_argument("--config", help="model config")
    p.add_argument("--train-config", help="training config (lr, batch_size, seed, reduction, J, ...)")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--max-steps", type=int)
    common(p, "run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="note-level P/R/F1 of est against ref (files or directories)")
    p.add_argument("ref")
    p.add_argument("est")
    p.add_argument("--pooled", action="store_true", help="pool notes across files instead of averaging per piece")
    common(p, "write JSON lines here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("encode", help="MIDI -> ROLL training targets")
    p.add_argument("midi")
    p.add_argument("--frames", type=int)
    p.add_argument("--sharpness", type=int, default=5)
    common(p, "output ROLL path")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("cqt", help="audio -> CQTS log-magnitude spectrogram")
    p.add_argument("audio")
    common(p, "output CQTS path")
    p.set_defaults(func=cmd_cqt)

    p = sub.add_parser("pianoroll", help="MIDI -> PPM piano-roll image")
    p.add_argument("midi")
    common(p, "output PPM path")
    p.set_defaults(func=cmd_pianoroll)
    return parser


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("AMT_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "onset_thr"):
        try:
            _thresholds(args)
        except ValueError as exc:
            parser.error(str(exc))
    try:
        return args.func(args)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except (DataError, WavError, MidiError, CheckpointError, FileNotFoundError, ValueError) as exc:
        return _fail(EXIT_DATA, "data", exc)


if __name__ == "__main__":
    sys.exit(main())
