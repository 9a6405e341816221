"""Avatar assembly: config, per-frame conditioning, and the posed radiance field closure."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .faceproxy import BlendshapeModel, HeadPose
from .motionwarp import TorsoTransform, WeightVolumeGenerator, blend_weight, gen_weight_volume, warp_to_canonical
from .nn import Module
from .orthorender import render_condition_set
from .planegen import (EmbeddingTable, FeaturePlanes, MappingNetwork, PlaneGenerator, VectorPlaneGenerator,
                       map_latent, vector_condition_planes)
from .radiancefield import DecoderMLP, ExprMLPField, PosEncConfig, RGBHead, query_canonical
from .translate import Discriminator, TranslatorNet, UpsampleSR
from .volrender import SamplerConfig

CONDITION_MODES = ("renderings", "vector_plane", "vector_plane_exprmod", "expr_mlp")
RENDERING_POSES = ("zero", "posed")
EMBEDDING_CONDITIONS = ("modulate", "decoder_input")
TRANSLATORS = ("unet", "upsample", "separate", "off")


@dataclass
class TrainConfig:
    # loss weights
    lambda_rgb: float = 1.0
    lambda_mask: float = 0.1
    lambda_recon: float = 1.0
    lambda_percep: float = 0.1
    lambda_adv: float = 0.05
    lambda_r1: float = 1.0
    lambda_emb: float = 1e-3
    embedding_penalty: str = "meansq"
    # optimisation
    lr_translator: float = 1e-3
    lr_rest: float = 5e-4
    lr_half_life: float = 3000.0   # stage-1 iterations per lr halving; 0 keeps it constant
    stage1_iters: int = 6000
    stage2_iters: int = 500
    ray_batch: int = 256
    fg_fraction: float = 0.0       # share of each ray batch drawn near the foreground
    fg_dilate: int = 2
    # sampler
    n_coarse: int = 24
    n_fine: int = 8
    jitter: bool = True
    background: float = 0.5
    # architecture
    plane_res: int = 64
    plane_channels: int = 16
    enc_channels: tuple = (16, 32, 64)
    emb_dim: int = 16
    w_dim: int = 64
    decoder_hidden: int = 64
    decoder_depth: int = 2
    feat_dim: int = 8
    pe_bands: int = 6
    wvol_bias: float = 0.0
    upsample: int = 2
    # ablation switches
    condition_mode: str = "renderings"
    rendering_pose: str = "zero"
    texture_channel: bool = True
    embedding_condition: str = "modulate"
    translator: str = "unet"
    # data
    use_noisy_params: bool = True
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        self.enc_channels = tuple(int(c) for c in self.enc_channels)
        checks = [("condition_mode", CONDITION_MODES), ("rendering_pose", RENDERING_POSES),
                  ("embedding_condition", EMBEDDING_CONDITIONS), ("translator", TRANSLATORS)]
        for key, allowed in checks:
            if getattr(self, key) not in allowed:
                raise ValueError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        for f in dataclasses.fields(self):
            if f.name.startswith("lambda_") and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")
        if self.lr_half_life < 0:
            raise ValueError("lr_half_life must be >= 0")
        if not 0.0 <= self.fg_fraction <= 1.0:
            raise ValueError("fg_fraction must lie in [0, 1]")

    @property
    def sampler(self):
        return SamplerConfig(self.n_coarse, self.n_fine, self.jitter, self.seed)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = " ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "on" if v else "off"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, **overrides):
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"line {n}: unknown config key {key!r}")
            kw[key] = _parse_value(fields[key].default, val)
        kw.update(overrides)
        return cls(**kw)


def _parse_value(default, val):
    if isinstance(default, bool):
        low = val.lower()
        if low in ("on", "true", "1", "yes"):
            return True
        if low in ("off", "false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {val!r}")
    if isinstance(default, int):
        return int(val)
    if isinstance(default, float):
        return float(val)
    if isinstance(default, tuple):
        return tuple(int(x) for x in val.split())
    return val


def load_config(path, **overrides):
    with open(path) as fh:
        return TrainConfig.from_text(fh.read(), **overrides)


@dataclass
class FrameCondition:
    """Everything the avatar needs about one frame besides its embedding."""
    delta: np.ndarray
    pose: HeadPose
    front: np.ndarray | None = None      # (7, R, R)
    side: np.ndarray | None = None       # (14, R, R)


def frame_condition(cfg: TrainConfig, proxy: BlendshapeModel, delta, pose_vec) -> FrameCondition:
    pose = HeadPose.from_vector(pose_vec)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (proxy.n_expr,):
        raise ValueError(f"expression has {delta.size} values, model expects {proxy.n_expr}")
    if cfg.condition_mode != "renderings":
        return FrameCondition(delta, pose)
    mode = "posed" if cfg.rendering_pose == "posed" else "zero_posed"
    rs = render_condition_set(proxy, delta, pose, mode, cfg.texture_channel, cfg.plane_res)
    return FrameCondition(delta, pose, rs.front_stack(), rs.side_stack())


class AvatarModel(Module):
    def __init__(self, cfg: TrainConfig, n_frames: int, n_expr: int):
        self.cfg = cfg
        self._n_expr = n_expr
        rng = np.random.default_rng(cfg.seed)
        self.pe = PosEncConfig(cfg.pe_bands)
        self.embeddings = EmbeddingTable(rng, n_frames, cfg.emb_dim)
        modulate = cfg.embedding_condition == "modulate"
        emb_in = cfg.emb_dim if modulate else 0
        dec_extra = 0 if modulate else cfg.emb_dim
        mode = cfg.condition_mode
        self.mapping = None
        self.front_gen = self.side_gen = None
        self.decoder = None
        self.expr_field = None
        if mode == "expr_mlp":
            self.expr_field = ExprMLPField(rng, n_expr, cfg.emb_dim, self.pe, feat_dim=cfg.feat_dim)
        else:
            expr_in = n_expr if mode == "vector_plane_exprmod" else 0
            self.mapping = MappingNetwork(rng, emb_in + 6 + expr_in, cfg.w_dim)
            if mode == "renderings":
                self.front_gen = PlaneGenerator(rng, 7, cfg.plane_channels, cfg.enc_channels, cfg.w_dim,
                                                cfg.plane_res)
                self.side_gen = PlaneGenerator(rng, 14, cfg.plane_channels, cfg.enc_channels, cfg.w_dim,
                                               cfg.plane_res)
            else:
                self.front_gen = VectorPlaneGenerator(rng, n_expr, cfg.plane_channels, cfg.enc_channels,
                                                      cfg.w_dim, cfg.plane_res, mode)
                self.side_gen = VectorPlaneGenerator(rng, n_expr, cfg.plane_channels, cfg.enc_channels,
                                                     cfg.w_dim, cfg.plane_res, mode)
            self.decoder = DecoderMLP(rng, 2 * cfg.plane_channels + self.pe.dim + dec_extra,
                                      cfg.decoder_hidden, cfg.decoder_depth, cfg.feat_dim)
        self.wvol = WeightVolumeGenerator(rng, final_bias=cfg.wvol_bias)
        self.rgb_head = RGBHead(rng, cfg.feat_dim)
        self.torso = TorsoTransform()
        trng = np.random.default_rng(cfg.seed + 7919)
        self.translator = None
        self.disc = None
        if cfg.translator in ("unet", "separate"):
            self.translator = TranslatorNet(trng, cfg.feat_dim, upsample=cfg.upsample)
        elif cfg.translator == "upsample":
            self.translator = UpsampleSR(trng, cfg.feat_dim, upsample=cfg.upsample)
        if self.translator is not None:
            self.disc = Discriminator(trng)

    # parameter groups ----------------------------------------------------
    def nerf_parameters(self):
        out = []
        for key in ("embeddings", "mapping", "front_gen", "side_gen", "decoder", "expr_field", "wvol",
                    "rgb_head"):
            mod = getattr(self, key)
            if mod is not None:
                out += mod.named_parameters(key + ".")
        return out

    def translator_parameters(self):
        return self.translator.named_parameters("translator.") if self.translator is not None else []

    def disc_parameters(self):
        return self.disc.named_parameters("disc.") if self.disc is not None else []

    def named_parameters(self, prefix=""):
        return self.nerf_parameters() + self.translator_parameters() + self.disc_parameters()

    # conditioning --------------------------------------------------------
    def embedding(self, frame_id=None):
        """Training row ``frame_id`` or, with None, the frozen mean row used at test time."""
        return self.embeddings.mean_row() if frame_id is None else self.embeddings.row(frame_id)

    def planes(self, cond: FrameCondition, gamma) -> FeaturePlanes | None:
        cfg = self.cfg
        if cfg.condition_mode == "expr_mlp":
            return None
        # with decoder_input conditioning the mapping sees the pose (and expression) only
        g = gamma if cfg.embedding_condition == "modulate" else None
        if cfg.condition_mode == "renderings":
            w = map_latent(self.mapping, g, cond.pose.as_vector())
            return FeaturePlanes(self.front_gen(cond.front, w), self.side_gen(cond.side, w))
        return vector_condition_planes(self.front_gen, self.side_gen, self.mapping, cond.delta,
                                       cond.pose.as_vector(), g)

    def canonical_field(self, cond: FrameCondition, gamma, planes=None):
        """x_c (N,3) -> (sigma (N,), feature (N, C_c)) in canonical space."""
        if self.cfg.condition_mode == "expr_mlp":
            return lambda x_c: self.expr_field(x_c, cond.delta, gamma)
        planes = planes if planes is not None else self.planes(cond, gamma)
        extra = None if self.cfg.embedding_condition == "modulate" else gamma
        return lambda x_c: query_canonical(x_c, planes, self.decoder, self.pe, extra)

    def posed_field(self, cond: FrameCondition, gamma, w_c=None, planes=None):
        """Observed-space field: inverse-skinning warp followed by the canonical query."""
        w_c = w_c if w_c is not None else gen_weight_volume(self.wvol)
        canonical = self.canonical_field(cond, gamma, planes)
        torso = self.torso

        def field(x):
            w_p = blend_weight(x, cond.pose, w_c)
            return canonical(warp_to_canonical(x, cond.pose, w_p, torso))

        return field

    def rgb_fn(self, feat):
        return self.rgb_head(feat)
