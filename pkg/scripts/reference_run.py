"""Train the default configuration on the reference capture and report held-out metrics.

    python scripts/reference_run.py --out runs/reference
"""
import argparse
import os

from headavatar.experiments import reference_run
from headavatar.train import save_checkpoint


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/reference")
    ap.add_argument("--iters", type=int, default=None, help="defaults to stage1_iters")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    state, res, baseline = reference_run(os.path.join(args.out, "data"), args.iters)
    save_checkpoint(state, os.path.join(args.out, "stage1.havc"))
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(f"iterations = {state.iteration}\nminutes = {res.seconds / 60:.1f}\n"
                 f"test_psnr = {res.psnr:.4f}\ntest_iou = {res.iou:.4f}\nbaseline_psnr = {baseline:.4f}\n"
                 f"margin_db = {res.psnr - baseline:.4f}\n")
    print(open(os.path.join(args.out, "summary.txt")).read(), end="")


if __name__ == "__main__":
    main()
