"""Two-stage training, checkpoints, evaluation metrics and reenactment."""
from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import diffcore as dc
from .diffcore import Adam, Tensor
from .faceproxy import Dataset, write_png
from .model import AvatarModel, FrameCondition, TrainConfig, frame_condition
from .motionwarp import gen_weight_volume
from .translate import adv_losses, l1_loss, perceptual_lite
from .planegen import embedding_penalty
from .volrender import gen_rays, render_frame, render_rays

log = logging.getLogger(__name__)

CKPT_MAGIC = b"HAVC1"
CKPT_VERSION = 1
PSNR_CAP = 99.0
BCE_EPS = 1e-6


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------
def bce(alpha, target):
    """Mean binary cross entropy; alpha is squeezed into [eps, 1 - eps] affinely to keep logs finite."""
    a = dc.as_tensor(alpha) * (1.0 - 2 * BCE_EPS) + BCE_EPS
    t = np.asarray(target, dtype=np.float64)
    return -dc.mean(dc.log(a) * t + dc.log(1.0 - a) * (1.0 - t))


def nerf_loss(rgb, alpha, rgb_gt, mask_gt, cfg: TrainConfig):
    """lambda_rgb * MSE(rgb) + lambda_mask * BCE(mask); returns (total, parts)."""
    diff = dc.as_tensor(rgb) - np.asarray(rgb_gt, dtype=np.float64)
    l_rgb = dc.mean(diff * diff)
    l_mask = bce(alpha, mask_gt)
    total = l_rgb * cfg.lambda_rgb + l_mask * cfg.lambda_mask
    return total, {"rgb": float(l_rgb.data), "mask": float(l_mask.data)}


def psnr(pred, target):
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def mask_iou(pred, target, threshold=0.5):
    p = np.asarray(pred) > threshold
    t = np.asarray(target) > threshold
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def iou_stability(masks):
    """Variance of the IoU between consecutive masks of an animated sequence."""
    ious = [mask_iou(a, b) for a, b in zip(masks[:-1], masks[1:])]
    return float(np.var(ious)), ious


# ---------------------------------------------------------------------------
# trainer state
# ---------------------------------------------------------------------------
@dataclass
class TrainState:
    cfg: TrainConfig
    model: AvatarModel
    opt_g: Adam
    opt_d: Adam | None
    iteration: int = 0
    stage: int = 1
    rng: np.random.Generator = None
    history: list = field(default_factory=list)

    def param_names(self):
        return {id(p): n for n, p in self.model.named_parameters()}


def _optimizers(model: AvatarModel, cfg: TrainConfig):
    groups = [([p for _, p in model.nerf_parameters()], cfg.lr_rest)]
    if model.translator is not None:
        groups.append(([p for _, p in model.translator_parameters()], cfg.lr_translator))
    opt_g = Adam(groups)
    opt_d = Adam([([p for _, p in model.disc_parameters()], cfg.lr_rest)]) if model.disc is not None else None
    return opt_g, opt_d


def new_state(cfg: TrainConfig, n_train: int, n_expr: int) -> TrainState:
    model = AvatarModel(cfg, n_train, n_expr)
    opt_g, opt_d = _optimizers(model, cfg)
    return TrainState(cfg, model, opt_g, opt_d, rng=np.random.default_rng(cfg.seed + 1))


class TrainData:
    """Training frames with precomputed conditions and full-resolution rays per camera."""

    def __init__(self, data: Dataset, cfg: TrainConfig, split="train"):
        self.data = data
        self.cfg = cfg
        self.frames = data.split(split)
        self.conditions = []
        for t in self.frames:
            rec = data.records[t]
            d, p = (rec.delta_noisy, rec.pose_noisy) if cfg.use_noisy_params else (rec.delta, rec.pose_clean)
            self.conditions.append(frame_condition(cfg, data.model, d, p))
        self.rays = [gen_rays(cam) for cam in data.cameras]
        self.fg = None
        if cfg.fg_fraction > 0:
            # pixel ids near the silhouette or inside it, per (frame, camera)
            self.fg = [[np.flatnonzero(ndimage.binary_dilation(data.masks[t, c] > 0.5, iterations=cfg.fg_dilate))
                        for c in range(len(data.cameras))] for t in self.frames]

    def __len__(self):
        return len(self.frames)


def _iteration_seed(cfg, it):
    return (cfg.seed * 1_000_003 + it) & 0x7FFFFFFF


def _check_finite(loss, state, info):
    if not np.isfinite(loss.data).all():
        dump = {"iteration": state.iteration, "stage": state.stage, **info}
        raise TrainingDiverged(f"non-finite loss at iteration {state.iteration}: {json.dumps(dump)}")


def _sample_pixels(rng, n_pix, batch, fg_fraction=0.0, fg=None):
    """Sorted distinct pixel ids: ``fg_fraction`` of the batch from ``fg``, the rest uniform."""
    batch = min(batch, n_pix)
    if fg is None or fg_fraction <= 0 or len(fg) == 0:
        return np.sort(rng.choice(n_pix, size=batch, replace=False))
    n_fg = min(int(round(fg_fraction * batch)), len(fg))
    chosen = rng.choice(fg, size=n_fg, replace=False)
    rest = np.setdiff1d(np.arange(n_pix), chosen, assume_unique=True)
    return np.sort(np.concatenate([chosen, rng.choice(rest, size=batch - n_fg, replace=False)]))


def lr_scale(cfg: TrainConfig, iteration):
    """Stage-1 lr multiplier; stage 2 always runs at the base rates."""
    if cfg.lr_half_life <= 0:
        return 1.0
    return 0.5 ** (iteration / cfg.lr_half_life)


def stage1_step(state: TrainState, td: TrainData):
    """One ray-batch step of the radiance-field loss; returns the loss parts."""
    cfg, model = state.cfg, state.model
    k = int(state.rng.integers(len(td)))
    cam = int(state.rng.integers(len(td.rays)))
    rays_all = td.rays[cam]
    n_pix = len(rays_all)
    pix = _sample_pixels(state.rng, n_pix, cfg.ray_batch, cfg.fg_fraction,
                         td.fg[k][cam] if td.fg is not None else None)
    rays = rays_all.subset(pix)
    gamma = model.embedding(k)
    field_fn = model.posed_field(td.conditions[k], gamma)
    out = render_rays(field_fn, rays, cfg.sampler, _iteration_seed(cfg, state.iteration), cfg.background,
                      model.rgb_fn)
    t = td.frames[k]
    rgb_gt = td.data.images[t, cam].reshape(-1, 3)[pix]
    mask_gt = td.data.masks[t, cam].reshape(-1)[pix]
    loss, parts = nerf_loss(out.rgb, out.mask, rgb_gt, mask_gt, cfg)
    if cfg.lambda_emb > 0:
        pen = embedding_penalty(model.embeddings, cfg.embedding_penalty)
        loss = loss + pen * cfg.lambda_emb
        parts["emb"] = float(pen.data)
    parts["total"] = float(loss.data)
    _check_finite(loss, state, {"frame": int(t), "camera": cam, "pixels": pix[:16].tolist(), **parts})
    params = [p for _, p in model.nerf_parameters()]
    grads = dc.backward(loss, params)
    state.opt_g.step(grads, lr_scale(cfg, state.iteration))
    state.iteration += 1
    return parts


def _downsample_to(img, res):
    """(H, W, C) image -> (C, res, res) by box averaging."""
    h = img.shape[0]
    f = h // res
    x = img.reshape(res, f, res, f, -1).mean(axis=(1, 3))
    return np.moveaxis(x, -1, 0)


def stage2_step(state: TrainState, td: TrainData):
    """Joint step: full low-res feature map -> translator -> image losses, then a discriminator step.

    With ``translator=off`` this is exactly a stage-1 step.
    """
    cfg, model = state.cfg, state.model
    if cfg.translator == "off":
        return stage1_step(state, td)
    k = int(state.rng.integers(len(td)))
    cam = int(state.rng.integers(len(td.rays)))
    t = td.frames[k]
    camera = td.data.cameras[cam]
    res = camera.width // cfg.upsample
    gamma = model.embedding(k)
    field_fn = model.posed_field(td.conditions[k], gamma)
    sampler = cfg.sampler
    sampler.seed = _iteration_seed(cfg, state.iteration)
    separate = cfg.translator == "separate"
    if separate:
        with dc.no_grad():
            out = render_frame(field_fn, camera, sampler, res, cfg.background, model.rgb_fn)
    else:
        out = render_frame(field_fn, camera, sampler, res, cfg.background, model.rgb_fn)
    img_gt = np.moveaxis(td.data.images[t, cam], -1, 0)
    fake = model.translator(out.feature.detach() if separate else out.feature)
    l_g, _, _ = adv_losses(model.disc, img_gt, fake, 0.0)
    l_recon = l1_loss(fake, img_gt)
    l_percep = perceptual_lite(fake, img_gt)
    loss = l_recon * cfg.lambda_recon + l_percep * cfg.lambda_percep + l_g * cfg.lambda_adv
    parts = {"recon": float(l_recon.data), "percep": float(l_percep.data), "adv_g": float(l_g.data)}
    if not separate:
        # keep the low-resolution radiance field supervised as in stage 1
        rgb_lo = dc.transpose(out.rgb, (1, 2, 0)).reshape(-1, 3)
        mask_lo = out.mask.reshape(-1)
        l_nerf, nparts = nerf_loss(rgb_lo, mask_lo, _downsample_to(td.data.images[t, cam], res)
                                   .transpose(1, 2, 0).reshape(-1, 3),
                                   _downsample_to(td.data.masks[t, cam][..., None], res).reshape(-1) > 0.5,
                                   cfg)
        loss = loss + l_nerf
        parts.update(nparts)
        if cfg.lambda_emb > 0:
            loss = loss + embedding_penalty(model.embeddings, cfg.embedding_penalty) * cfg.lambda_emb
    parts["total"] = float(loss.data)
    _check_finite(loss, state, {"frame": int(t), "camera": cam, **parts})
    params = [p for _, p in model.translator_parameters()]
    if not separate:
        params = [p for _, p in model.nerf_parameters()] + params
    state.opt_g.step(dc.backward(loss, params))
    # discriminator
    _, l_d, dparts = adv_losses(model.disc, img_gt, Tensor(fake.data), cfg.lambda_r1)
    state.opt_d.step(dc.backward(l_d, [p for _, p in model.disc_parameters()]))
    parts["adv_d"] = float(l_d.data)
    parts["r1"] = float(dparts["r1"].data)
    state.iteration += 1
    return parts


def train(state: TrainState, td: TrainData, iters: int, stage: int = 1, callback=None):
    state.stage = stage
    step = stage1_step if stage == 1 else stage2_step
    for _ in range(iters):
        parts = step(state, td)
        state.history.append(parts)
        if state.cfg.log_every and state.iteration % state.cfg.log_every == 0:
            log.info("stage %d it %d %s", stage, state.iteration,
                     " ".join(f"{k}={v:.5f}" for k, v in parts.items()))
        if callback is not None:
            callback(state, parts)
    return state


def train_stage1(data: Dataset, cfg: TrainConfig, iters=None, callback=None) -> TrainState:
    td = TrainData(data, cfg)
    state = new_state(cfg, len(td), data.model.n_expr)
    return train(state, td, cfg.stage1_iters if iters is None else iters, 1, callback)


def train_stage2(data: Dataset, state: TrainState, iters=None, callback=None) -> TrainState:
    td = TrainData(data, state.cfg)
    return train(state, td, state.cfg.stage2_iters if iters is None else iters, 2, callback)


# ---------------------------------------------------------------------------
# rendering with a trained model
# ---------------------------------------------------------------------------
def render_image(model: AvatarModel, cond: FrameCondition, camera, gamma=None, stage=1, seed=0,
                 chunk=4096):
    """Final RGB (H, W, 3) and mask (H, W) for one frame; ``gamma=None`` uses the mean embedding."""
    cfg = model.cfg
    gamma = model.embedding(None) if gamma is None else gamma
    sampler = cfg.sampler
    sampler.seed = seed
    sampler.jitter = False
    with dc.no_grad():
        w_c = gen_weight_volume(model.wvol)
        planes = model.planes(cond, gamma)
        field_fn = model.posed_field(cond, gamma, w_c, planes)
        use_translator = stage == 2 and model.translator is not None and cfg.translator != "off"
        if use_translator:
            res = camera.width // cfg.upsample
            out = render_frame(field_fn, camera, sampler, res, cfg.background, model.rgb_fn, chunk=chunk)
            rgb = np.moveaxis(model.translator(out.feature).data, 0, -1)
            mask_lo = out.mask.data[0]
            mask = np.kron(mask_lo, np.ones((cfg.upsample, cfg.upsample)))
            return rgb, mask, out
        out = render_frame(field_fn, camera, sampler, None, cfg.background, model.rgb_fn, chunk=chunk)
        return np.moveaxis(out.rgb.data, 0, -1), out.mask.data[0], out


@dataclass
class MetricsReport:
    frames: list
    psnr: list
    iou: list
    percep: list
    baseline_psnr: float | None = None

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr))

    @property
    def mean_iou(self):
        return float(np.mean(self.iou))

    @property
    def mean_percep(self):
        return float(np.mean(self.percep))

    def to_text(self):
        lines = [f"frames = {len(self.frames)}",
                 f"psnr_mean = {self.mean_psnr:.4f}",
                 f"iou_mean = {self.mean_iou:.4f}",
                 f"perceptual_lite_mean = {self.mean_percep:.5f}  # random-feature stand-in, not LPIPS"]
        if self.baseline_psnr is not None:
            lines.append(f"mean_image_baseline_psnr = {self.baseline_psnr:.4f}")
        return "\n".join(lines) + "\n"

    def to_tsv(self):
        rows = ["frame\tpsnr\tiou\tperceptual_lite"]
        rows += [f"{f}\t{p:.6f}\t{i:.6f}\t{q:.6f}" for f, p, i, q in zip(self.frames, self.psnr, self.iou,
                                                                         self.percep)]
        return "\n".join(rows) + "\n"

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.txt"), "w") as fh:
            fh.write(self.to_text())
        with open(os.path.join(out_dir, "metrics.tsv"), "w") as fh:
            fh.write(self.to_tsv())


def mean_image_baseline(data: Dataset, split="test"):
    """PSNR of predicting the mean training image for every held-out frame."""
    train_ids, test_ids = data.split("train"), data.split(split)
    mean_img = data.images[train_ids].mean(axis=0)
    return float(np.mean([psnr(mean_img[c], data.images[t, c])
                          for t in test_ids for c in range(len(data.cameras))]))


def evaluate(model: AvatarModel, data: Dataset, split="test", stage=1, out_dir=None,
             with_baseline=True) -> MetricsReport:
    """Per-frame metrics against ground truth, using clean params and the mean embedding."""
    ids = data.split(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    frames, ps, ious, pc = [], [], [], []
    for t in ids:
        rec = data.records[t]
        cond = frame_condition(model.cfg, data.model, rec.delta, rec.pose_clean)
        for c, cam in enumerate(data.cameras):
            rgb, mask, _ = render_image(model, cond, cam, stage=stage)
            gt = data.images[t, c]
            frames.append(t if len(data.cameras) == 1 else f"{t}/cam{c}")
            ps.append(psnr(rgb, gt))
            ious.append(mask_iou(mask, data.masks[t, c]))
            with dc.no_grad():
                pc.append(float(perceptual_lite(np.moveaxis(rgb, -1, 0), np.moveaxis(gt, -1, 0)).data))
    report = MetricsReport(frames, ps, ious, pc, mean_image_baseline(data, split) if with_baseline else None)
    if out_dir is not None:
        report.write(out_dir)
    return report


def parse_driving(text, n_expr):
    """Rows of n_expr expression values followed by 6 pose values; '#' comments allowed."""
    rows = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        vals = np.array([float(x) for x in line.replace(",", " ").split()])
        if vals.size != n_expr + 6:
            raise ValueError(f"driving line {n}: expected {n_expr} expression + 6 pose values, got {vals.size}")
        rows.append((vals[:n_expr], vals[n_expr:]))
    return rows


def reenact(model: AvatarModel, proxy, rows, camera, out_dir=None, stage=1):
    """Render each (expression, pose) row with the frozen mean embedding; returns (images, masks)."""
    images, masks = [], []
    for i, (delta, pose) in enumerate(rows):
        cond = frame_condition(model.cfg, proxy, delta, pose)
        rgb, mask, _ = render_image(model, cond, camera, stage=stage)
        images.append(rgb)
        masks.append(mask)
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            write_png(os.path.join(out_dir, f"frame{i:04d}.png"), rgb)
    return images, masks


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
_DTYPES = {"f8": np.dtype("<f8"), "f4": np.dtype("<f4"), "i8": np.dtype("<i8"), "u1": np.dtype("u1")}


def _tensor_record(name, arr):
    arr = np.ascontiguousarray(arr)
    tag = {"float64": "f8", "float32": "f4", "int64": "i8", "uint8": "u1"}[arr.dtype.name]
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + tag.encode() + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype(_DTYPES[tag]).tobytes()


def checkpoint_bytes(state: TrainState) -> bytes:
    names = state.param_names()
    arrays = {n: p.data for n, p in state.model.named_parameters()}
    arrays.update({f"opt_g/{k}": v for k, v in state.opt_g.state_arrays(names).items()})
    if state.opt_d is not None:
        arrays.update({f"opt_d/{k}": v for k, v in state.opt_d.state_arrays(names).items()})
    meta = {"iteration": state.iteration, "stage": state.stage, "opt_g_t": state.opt_g.t,
            "opt_d_t": state.opt_d.t if state.opt_d is not None else 0,
            "n_frames": state.model.embeddings.table.shape[0],
            "n_expr": _n_expr(state.model),
            "rng": state.rng.bit_generator.state}
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    cfg_b = state.cfg.to_text().encode()
    meta_b = json.dumps(meta, sort_keys=True).encode()
    out += [struct.pack("<I", len(cfg_b)), cfg_b, struct.pack("<I", len(meta_b)), meta_b]
    out.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        out.append(_tensor_record(name, arrays[name]))
    return b"".join(out)


def _n_expr(model: AvatarModel):
    return model._n_expr


def save_checkpoint(state: TrainState, path):
    data = checkpoint_bytes(state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", buf, 5)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 9
    (n,) = struct.unpack_from("<I", buf, pos)
    cfg = TrainConfig.from_text(buf[pos + 4:pos + 4 + n].decode())
    pos += 4 + n
    (n,) = struct.unpack_from("<I", buf, pos)
    meta = json.loads(buf[pos + 4:pos + 4 + n].decode())
    pos += 4 + n
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + ln].decode()
        pos += 2 + ln
        tag = buf[pos:pos + 2].decode()
        (rank,) = struct.unpack_from("<B", buf, pos + 2)
        pos += 3
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        dt = _DTYPES[tag]
        size = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(buf, dtype=dt, count=size, offset=pos).reshape(shape).copy()
        pos += size * dt.itemsize
    state = new_state(cfg, meta["n_frames"], meta["n_expr"])
    for name, p in state.model.named_parameters():
        if name not in arrays:
            raise ValueError(f"{path}: missing tensor {name}")
        if arrays[name].shape != p.data.shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        p.data = arrays[name]
    names = state.param_names()
    state.opt_g.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("opt_g/")},
                                  names, meta["opt_g_t"])
    if state.opt_d is not None:
        state.opt_d.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("opt_d/")},
                                      names, meta["opt_d_t"])
    state.iteration = meta["iteration"]
    state.stage = meta["stage"]
    state.rng.bit_generator.state = meta["rng"]
    return state
