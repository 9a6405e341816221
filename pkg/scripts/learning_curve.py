"""Held-out PSNR every N stage-1 iterations on the reference capture.

    python scripts/learning_curve.py --iters 6000 --every 500 --set fg_fraction=0.8
"""
import argparse
import os
import time

import numpy as np

from headavatar.experiments import REFERENCE_DATA, REFERENCE_SEED, ensure_dataset
from headavatar.faceproxy import load_dataset
from headavatar.model import TrainConfig
from headavatar.train import evaluate, mean_image_baseline, train_stage1


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", default="runs/reference_data")
    ap.add_argument("--iters", type=int, default=6000)
    ap.add_argument("--every", type=int, default=500)
    ap.add_argument("--set", action="append", default=[], help="TrainConfig override key=value")
    ap.add_argument("--out", default="runs/curve.tsv")
    args = ap.parse_args()

    data = load_dataset(ensure_dataset(REFERENCE_DATA, REFERENCE_SEED, args.data))
    text = "\n".join(s.replace("=", " = ", 1) for s in args.set)
    cfg = TrainConfig.from_text(text, log_every=0)
    base = mean_image_baseline(data)
    print(f"mean-image baseline {base:.3f} dB")
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    fh = open(args.out, "w")
    fh.write("iteration\tseconds\ttest_psnr\ttest_iou\ttrain_rgb_mse\n")
    t0 = time.time()

    def cb(state, parts):
        if state.iteration % args.every:
            return
        r = evaluate(state.model, data, "test", with_baseline=False)
        mse = np.mean([h["rgb"] for h in state.history[-args.every:]])
        row = f"{state.iteration}\t{time.time() - t0:.0f}\t{r.mean_psnr:.4f}\t{r.mean_iou:.4f}\t{mse:.6f}"
        print(row, f"({r.mean_psnr - base:+.2f} dB)", flush=True)
        fh.write(row + "\n")
        fh.flush()

    train_stage1(data, cfg, args.iters, callback=cb)


if __name__ == "__main__":
    main()
