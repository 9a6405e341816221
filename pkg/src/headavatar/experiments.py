"""Reference runs and ablation protocols shared by the acceptance suite and scripts/."""
from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .faceproxy import SynthConfig, load_dataset, synth_dataset
from .model import TrainConfig, frame_condition
from .train import evaluate, iou_stability, mean_image_baseline, render_image, train_stage1

# 64x64, 200 train / 20 held-out, one camera
REFERENCE_DATA = SynthConfig()
REFERENCE_SEED = 0

# Ablation captures are smaller (32x32, 100 frames) so that 3 seeds x several arms stay affordable.
# held-out expressions lie outside the training range
EXPR_SHIFT_DATA = SynthConfig(n_frames=100, n_test=12, image_size=32, expr_range=0.45,
                              test_expr_range=0.9, test_expr_min=0.6)
# held-out frames pair expressions with poses beyond the training range
POSE_SHIFT_DATA = SynthConfig(n_frames=100, n_test=12, image_size=32, test_rot_scale=1.4)
# tracking noise on the expression parameters fed to the model
NOISY_DATA = SynthConfig(n_frames=100, n_test=4, image_size=32, noise_delta=0.08)

ABLATION_SEEDS = (0, 1, 2)
ABLATION_ITERS = 1500
ABLATION_TRAIN = dict(ray_batch=256, n_coarse=24, n_fine=8, plane_res=32, lr_half_life=750, log_every=0)


def ensure_dataset(cfg: SynthConfig, seed: int, root) -> str:
    """Synthesize into ``root`` unless a finished capture is already there."""
    if not os.path.exists(os.path.join(root, "split.txt")):
        synth_dataset(cfg, seed, root)
    return root


@dataclass
class RunResult:
    label: str
    seed: int
    psnr: float
    iou: float
    seconds: float
    extra: dict = dataclasses.field(default_factory=dict)


def run_stage1(data, cfg: TrainConfig, iters, label="", split="test"):
    t0 = time.perf_counter()
    state = train_stage1(data, cfg, iters)
    report = evaluate(state.model, data, split, with_baseline=False)
    return state, RunResult(label, cfg.seed, report.mean_psnr, report.mean_iou, time.perf_counter() - t0)


def reference_run(root, iters=None, cfg: TrainConfig | None = None):
    """Criterion-5 protocol: default config on the reference capture; returns (state, result, baseline)."""
    data = load_dataset(ensure_dataset(REFERENCE_DATA, REFERENCE_SEED, root))
    cfg = cfg or TrainConfig(log_every=0)
    state, res = run_stage1(data, cfg, cfg.stage1_iters if iters is None else iters, "reference")
    return state, res, mean_image_baseline(data)


def ablation_arms(data, arms: dict, seeds=ABLATION_SEEDS, iters=ABLATION_ITERS, log=None):
    """Train every (arm, seed) pair; ``arms`` maps a label to TrainConfig overrides."""
    results = {}
    for label, over in arms.items():
        for seed in seeds:
            cfg = TrainConfig(**{**ABLATION_TRAIN, **over, "seed": seed})
            state, res = run_stage1(data, cfg, iters, label)
            results[(label, seed)] = (state, res)
            if log is not None:
                log(f"{label} seed {seed}: psnr {res.psnr:.3f} iou {res.iou:.4f} ({res.seconds:.0f}s)")
    return results


def interpolated_sequence(data, n_steps=16, a=0, b=1):
    """Expressions interpolated between two training frames, at the first frame's pose."""
    ra, rb = data.records[a], data.records[b]
    pose = ra.pose_clean
    return [((1 - s) * ra.delta + s * rb.delta, pose) for s in np.linspace(0.0, 1.0, n_steps)]


def mask_stability(state, data, rows, camera=0):
    """Variance of consecutive-frame mask IoU when animating ``rows`` with the mean embedding."""
    masks = []
    for delta, pose in rows:
        cond = frame_condition(state.cfg, data.model, delta, pose)
        _, mask, _ = render_image(state.model, cond, data.cameras[camera])
        masks.append(mask)
    var, _ = iou_stability(masks)
    return var


def equal_embedding_planes_check(state, data, frames=(0, 1, 2)):
    """Set all embedding rows equal; planes of identical conditions must then coincide exactly."""
    model = state.model
    saved = model.embeddings.table.data.copy()
    try:
        model.embeddings.table.data[:] = saved[0]
        rec = data.records[frames[0]]
        cond = frame_condition(state.cfg, data.model, rec.delta, rec.pose_clean)
        with dc.no_grad():
            planes = [model.planes(cond, model.embedding(k)) for k in frames]
        return all(np.array_equal(p.front.data, planes[0].front.data) and
                   np.array_equal(p.side.data, planes[0].side.data) for p in planes[1:])
    finally:
        model.embeddings.table.data[:] = saved
