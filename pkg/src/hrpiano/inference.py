"""Audio -> note events: segment, CQT, forward, stitch, decode."""
from __future__ import annotations

import numpy as np
import torch

from .frontend import AudioClip, CqtConfig, cqt, resample
from .labels import DecodeThresholds, FrameGrid, ModelOutputs, extract_notes, merge_close_notes
from .midi import NoteSequence
from .models import forward_checked
from .training import SEGMENT_SECONDS, segment


def predict_planes(model, clip: AudioClip, cqt_cfg: CqtConfig = CqtConfig(),
                   length: float = SEGMENT_SECONDS, window: int = 0) -> ModelOutputs:
    """Model outputs for a whole clip; 20 s segments are concatenated without overlap.

    With ``window`` > 0 the model sees each segment's spectrogram in consecutive
    chunks of that many frames (models trained on crops of that length behave
    best on inputs of the same length). The CQT itself is always taken over the
    whole segment. Padding frames past the end of the audio are dropped.
    """
    if clip.sample_rate != cqt_cfg.sample_rate:
        clip = resample(clip, cqt_cfg.sample_rate)
    n_frames = -(-len(clip) // cqt_cfg.hop)
    pieces = []
    model.eval()
    with torch.no_grad():
        for piece, _ in segment(clip, NoteSequence(), length):
            x = torch.from_numpy(cqt(piece, cqt_cfg).values.astype(np.float32))
            step = window if window > 0 else len(x)
            for s in range(0, len(x), step):
                pieces.append(forward_checked(model, x[s:s + step], offsets=s).numpy())
    planes = [np.concatenate(p)[:n_frames] for p in zip(*(o.planes() for o in pieces))]
    return ModelOutputs(*planes)


def transcribe(model, clip: AudioClip, thresholds: DecodeThresholds = DecodeThresholds(),
               cqt_cfg: CqtConfig = CqtConfig(), window: int = 0) -> NoteSequence:
    out = predict_planes(model, clip, cqt_cfg, window=window)
    grid = FrameGrid(out.on.shape[0], cqt_cfg.frame_period)
    notes = extract_notes(out, thresholds, grid)
    # notes cut at a segment boundary are re-joined
    return merge_close_notes(notes, 2 * cqt_cfg.frame_period)
