"""Command-line entry point: synth, train, render, reenact, extract-mesh, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from . import diffcore as dc
from .faceproxy import SynthConfig, load_dataset, parse_kv_text, synth_dataset, write_png
from .gradcheck import run_suite
from .model import TrainConfig, frame_condition, load_config
from .motionwarp import gen_weight_volume, save_weight_volume
from .radiancefield import extract_mesh, write_obj
from .train import (TrainData, evaluate, load_checkpoint, new_state, parse_driving, reenact, render_image,
                    save_checkpoint, train)
from .volrender import save_feature_map

log = logging.getLogger("headavatar")

STAGE1_CKPT = "stage1.havc"
STAGE2_CKPT = "stage2.havc"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def synth_config_from_file(path, **overrides):
    fields = {f.name: f for f in dataclasses.fields(SynthConfig)}
    kw = {}
    if path:
        with open(path) as fh:
            for key, vals in parse_kv_text(fh.read()).items():
                if key not in fields:
                    raise UsageError(f"unknown synth config key {key!r}")
                default = fields[key].default
                if isinstance(default, tuple):
                    kw[key] = tuple(float(v) for v in vals)
                elif isinstance(default, int):
                    kw[key] = int(vals[0])
                else:
                    kw[key] = float(vals[0])
    kw.update(overrides)
    return SynthConfig(**kw)


def _train_config(args):
    over = {} if args.seed is None else {"seed": args.seed}
    try:
        return load_config(args.config, **over) if args.config else TrainConfig(**over)
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc


def _ckpt_path(args, default_name):
    return args.checkpoint or os.path.join(args.out, default_name)


def _load_state(path):
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def cmd_synth(args):
    cfg = synth_config_from_file(args.config)
    seed = 0 if args.seed is None else args.seed
    records = synth_dataset(cfg, seed, args.out)
    print(f"wrote {len(records)} frames to {args.out}")


def cmd_train(args):
    data = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    if args.stage == 1:
        cfg = _train_config(args)
        td = TrainData(data, cfg)
        state = new_state(cfg, len(td), data.model.n_expr)
        iters = cfg.stage1_iters if args.iters is None else args.iters
        train(state, td, iters, 1)
        path = os.path.join(args.out, STAGE1_CKPT)
    else:
        src = _ckpt_path(args, STAGE1_CKPT)
        if not os.path.exists(src):
            raise UsageError(f"stage 2 needs a stage-1 checkpoint; {src} does not exist")
        state = load_checkpoint(src)
        td = TrainData(data, state.cfg)
        iters = state.cfg.stage2_iters if args.iters is None else args.iters
        train(state, td, iters, 2)
        path = os.path.join(args.out, STAGE2_CKPT)
    save_checkpoint(state, path)
    with open(os.path.join(args.out, f"losses_stage{args.stage}.tsv"), "w") as fh:
        keys = sorted({k for h in state.history for k in h})
        fh.write("iteration\t" + "\t".join(keys) + "\n")
        for i, h in enumerate(state.history):
            fh.write(f"{i}\t" + "\t".join(f"{h.get(k, float('nan')):.8g}" for k in keys) + "\n")
    print(f"saved {path}")


def cmd_render(args):
    state = _load_state(args.checkpoint)
    data = load_dataset(args.data)
    rec = data.records[args.frame]
    cond = frame_condition(state.cfg, data.model, rec.delta, rec.pose_clean)
    os.makedirs(args.out, exist_ok=True)
    cam = data.cameras[args.camera]
    rgb, mask, out = render_image(state.model, cond, cam, stage=state.stage)
    write_png(os.path.join(args.out, f"frame{args.frame}_rgb.png"), rgb)
    write_png(os.path.join(args.out, f"frame{args.frame}_mask.png"), mask)
    save_feature_map(os.path.join(args.out, f"frame{args.frame}_feature.fmap"), out.feature)
    with dc.no_grad():
        save_weight_volume(os.path.join(args.out, "weights.wvol"), gen_weight_volume(state.model.wvol))
    print(f"rendered frame {args.frame} to {args.out}")


def cmd_reenact(args):
    state = _load_state(args.checkpoint)
    data = load_dataset(args.data)
    with open(args.driving) as fh:
        try:
            rows = parse_driving(fh.read(), data.model.n_expr)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    images, _ = reenact(state.model, data.model, rows, data.cameras[args.camera], args.out, state.stage)
    print(f"wrote {len(images)} frames to {args.out}")


def cmd_extract_mesh(args):
    state = _load_state(args.checkpoint)
    data = load_dataset(args.data)
    rec = data.records[args.frame]
    model = state.model
    cond = frame_condition(state.cfg, data.model, rec.delta, rec.pose_clean)
    gamma = model.embedding(None)
    with dc.no_grad():
        canonical = model.canonical_field(cond, gamma)

        def density(pts):
            return canonical(pts)[0].data

        verts, faces = extract_mesh(density, args.resolution, args.iso)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"frame{args.frame}.obj")
    write_obj(path, verts, faces)
    print(f"{len(verts)} vertices, {len(faces)} faces -> {path}")


def cmd_eval(args):
    state = _load_state(args.checkpoint)
    data = load_dataset(args.data)
    report = evaluate(state.model, data, args.split, state.stage, args.out)
    sys.stdout.write(report.to_text())


def cmd_gradcheck(args):
    if args.config:
        kv = parse_kv_text(open(args.config).read())
        tol = float(kv.get("tol", [1e-4])[0])
        eps = float(kv.get("eps", [1e-5])[0])
    else:
        tol, eps = 1e-4, 1e-5
    ok, _, dt = run_suite(tol=tol, eps=eps, seed=0 if args.seed is None else args.seed)
    print(f"{'all passed' if ok else 'FAILURES'} in {dt:.1f}s")
    return 0 if ok else 2


def build_parser():
    p = _Parser(prog="headavatar", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_default="out"):
        sp.add_argument("--config", default=None, help="line-based 'key = value' file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=out_default)

    s = sub.add_parser("synth", help="generate a synthetic capture")
    common(s, "data")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="run stage 1 or 2")
    common(s)
    s.add_argument("--stage", type=int, choices=(1, 2), default=1)
    s.add_argument("--data", default="data")
    s.add_argument("--checkpoint", default=None, help="stage-1 checkpoint for --stage 2")
    s.add_argument("--iters", type=int, default=None)
    s.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("render", cmd_render, "render one dataset frame"),
                               ("extract-mesh", cmd_extract_mesh, "marching-cubes mesh of a frame"),
                               ("eval", cmd_eval, "metrics on a split"),
                               ("reenact", cmd_reenact, "drive the avatar with a params file")):
        s = sub.add_parser(name, help=helptext)
        common(s)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", default="data")
        s.set_defaults(fn=fn)
        if name in ("render", "extract-mesh"):
            s.add_argument("--frame", type=int, default=0)
        if name in ("render", "reenact"):
            s.add_argument("--camera", type=int, default=0)
        if name == "extract-mesh":
            s.add_argument("--resolution", type=int, default=64)
            s.add_argument("--iso", type=float, default=10.0)
        if name == "eval":
            s.add_argument("--split", default="test")
        if name == "reenact":
            s.add_argument("--driving", required=True)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    common(s)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        rc = args.fn(args)
        return 0 if rc is None else rc
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
