"""Run the ablation protocols behind acceptance criteria 6-8 and write a TSV of per-seed results.

    python scripts/ablations.py --which condition pose stability --iters 1500
"""
import argparse
import os

from headavatar import experiments as ex
from headavatar.faceproxy import load_dataset

PROTOCOLS = {
    "condition": (ex.EXPR_SHIFT_DATA, 10, {"renderings": {}, "vector_plane": {"condition_mode": "vector_plane"},
                                           "vector_plane_exprmod": {"condition_mode": "vector_plane_exprmod"},
                                           "expr_mlp": {"condition_mode": "expr_mlp"}}),
    "pose": (ex.POSE_SHIFT_DATA, 30, {"zero": {}, "posed": {"rendering_pose": "posed"}}),
    "stability": (ex.NOISY_DATA, 20, {"modulate": {}, "decoder_input": {"embedding_condition": "decoder_input"}}),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--which", nargs="+", default=list(PROTOCOLS), choices=list(PROTOCOLS))
    ap.add_argument("--iters", type=int, default=ex.ABLATION_ITERS)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(ex.ABLATION_SEEDS))
    ap.add_argument("--out", default="runs/ablations")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    tsv = open(os.path.join(args.out, "results.tsv"), "a")
    for name in args.which:
        synth_cfg, data_seed, arms = PROTOCOLS[name]
        data = load_dataset(ex.ensure_dataset(synth_cfg, data_seed, os.path.join(args.out, f"data_{name}")))
        results = ex.ablation_arms(data, arms, args.seeds, args.iters, log=lambda m: print(m, flush=True))
        rows = ex.interpolated_sequence(data) if name == "stability" else None
        for (label, seed), (state, res) in sorted(results.items()):
            extra = f"{ex.mask_stability(state, data, rows):.6e}" if rows is not None else ""
            tsv.write(f"{name}\t{label}\t{seed}\t{args.iters}\t{res.psnr:.4f}\t{res.iou:.4f}\t{extra}\n")
            tsv.flush()


if __name__ == "__main__":
    main()
