"""Desk-scale overfit setups: one synthetic 20 s clip, small models, a couple of thousand steps."""
from __future__ import annotations

import numpy as np

from .models import HRplusConfig, HybridConfig, toy_block
from .training import SynthSpec, TrainConfig, random_notes, synthesize

OVERFIT_MODELS = {
    "hrplus": HRplusConfig(block=toy_block(4, kernel=3), gru_hidden=64, cond_hidden=128),
    "hybrid": HybridConfig(block=toy_block(4, kernel=3), gru_hidden=32, d_model=32, heads=2, ffn=64,
                           decoder_blocks=2),
}

# short crops keep the biGRU recurrences cheap; centring most crops on onsets
# gives every batch some of the (very sparse) onset targets. Transcribe with
# ``window=crop_frames`` so the model sees inputs of the length it trained on.
OVERFIT_TRAINING = {
    "hrplus": TrainConfig(lr=3e-3, batch_size=4, crop_frames=64, onset_crops=0.75, max_steps=1000, val_every=0),
    "hybrid": TrainConfig(lr=3e-3, batch_size=2, crop_frames=128, onset_crops=1.0, max_steps=1000, val_every=0),
}


def overfit_clip(seed: int = 0, notes: int = 10, seconds: float = 20.0):
    """Random notes and their synthetic rendering."""
    seq = random_notes(np.random.default_rng(seed), notes, duration=seconds)
    return seq, synthesize(SynthSpec(seq), duration=seconds)
