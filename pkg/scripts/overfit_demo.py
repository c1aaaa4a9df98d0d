"""Overfit a small model to one synthetic clip, then transcribe the clip and score it.

    python scripts/overfit_demo.py --model hybrid --steps 1000 --out runs/demo
"""
import argparse
import logging
import time
from dataclasses import replace
from pathlib import Path

import torch

from hrpiano.evaluation import evaluate, format_table
from hrpiano.frontend import write_wav
from hrpiano.inference import transcribe
from hrpiano.midi import write_midi
from hrpiano.models import build_model, count_model_params, model_config_text
from hrpiano.nn import save_checkpoint
from hrpiano.recipes import OVERFIT_MODELS, OVERFIT_TRAINING, overfit_clip
from hrpiano.training import make_examples, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--model", choices=sorted(OVERFIT_MODELS), default="hybrid")
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--clip-seed", type=int, default=0)
    ap.add_argument("--every", type=int, default=100, help="log interval in steps")
    ap.add_argument("--out", type=Path, default=None, help="write clip, reference, estimate and checkpoint here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)

    model_cfg = OVERFIT_MODELS[args.model]
    train_cfg = replace(OVERFIT_TRAINING[args.model], seed=args.seed)
    if args.steps:
        train_cfg = replace(train_cfg, max_steps=args.steps)
    seq, clip = overfit_clip(args.clip_seed)
    torch.manual_seed(args.seed)
    model = build_model(model_cfg)
    print(f"{args.model}: {count_model_params(model_cfg):,} parameters, {train_cfg.max_steps} steps")

    start = time.perf_counter()

    def log(step, losses):
        if step % args.every == 0:
            print(f"step {step:5d}  loss {losses.item()['total']:.5f}  {time.perf_counter() - start:6.0f} s")

    train(model, make_examples(clip, seq), train_cfg, log_fn=log)
    # same chunk length at inference as the training crops
    est = transcribe(model, clip, window=train_cfg.crop_frames)
    print(format_table([("clip", evaluate(seq, est))]))
    print("whole-segment inference for comparison:")
    print(format_table([("clip", evaluate(seq, transcribe(model, clip)))]))

    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        write_wav(args.out / "clip.wav", clip)
        write_midi(seq, args.out / "clip.mid")
        write_midi(est, args.out / "estimate.mid")
        save_checkpoint(args.out / "model.amtw", model)
        (args.out / "model.cfg").write_text(model_config_text(model_cfg))


if __name__ == "__main__":
    main()
