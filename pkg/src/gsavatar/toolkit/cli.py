"""Command line interface: ``gsavatar {synth,train,render,animate,select-pose,eval}``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("gsavatar")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path, cls):
    from .io import read_json

    d = read_json(path) if path else {}
    if not isinstance(d, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cls.from_dict(d)


def _dataset_for(header, override):
    from .io import DataError, read_dataset

    root = override or header.get("data_dir")
    if not root:
        raise DataError("checkpoint does not record its dataset; pass --data")
    return read_dataset(root)


def cmd_synth(args) -> int:
    from .synth import SynthConfig, synthesize

    cfg = _load_config(args.config, SynthConfig)
    ds, _ = synthesize(cfg, args.out)
    log.info("wrote %d views of %d frames to %s", len(ds.views), len(ds.poses), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    from ..train import TrainConfig, train_loop
    from .io import read_dataset

    cfg = _load_config(args.config, TrainConfig)
    if args.sparse_every is not None:
        cfg.sparse_every = args.sparse_every
    if args.no_daa:
        cfg.daa = False
    if args.no_contrastive:
        cfg.contrastive = False
    if args.topn is not None:
        cfg.top_n = args.topn
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.steps = args.steps
    cfg.__post_init__()
    ds = read_dataset(args.data)
    log_path = args.log or str(args.out) + ".metrics.jsonl"
    train_loop(ds, cfg, args.out, log_path)
    log.info("checkpoint written to %s", args.out)
    return EXIT_OK


def _render_and_write(state, rig, pose, cam, frame, background, out):
    from ..train import render_pose
    from .io import write_png

    color, _ = render_pose(state, rig, pose, cam, frame=frame, background=background)
    write_png(out, color)


def cmd_render(args) -> int:
    from ..train import load_state
    from .io import DataError

    state, rig, cfg, header = load_state(args.ckpt)
    ds = _dataset_for(header, args.data)
    if not 0 <= args.frame < len(ds.poses):
        raise DataError(f"frame {args.frame} not in dataset (0..{len(ds.poses) - 1})")
    if not 0 <= args.camera < len(ds.cameras):
        raise DataError(f"camera {args.camera} not in dataset (0..{len(ds.cameras) - 1})")
    _render_and_write(state, rig, ds.poses[args.frame], ds.cameras[args.camera], args.frame, cfg.background,
                      args.out)
    return EXIT_OK


def cmd_animate(args) -> int:
    from ..train import load_state
    from .io import read_poses

    state, rig, cfg, _ = load_state(args.ckpt)
    out = Path(args.out)
    for frame_id, pose, cam in read_poses(args.poses):
        # novel poses carry no learned per-frame correction
        _render_and_write(state, rig, pose, cam, None, cfg.background, out / f"frame_{frame_id:04d}.png")
    return EXIT_OK


def cmd_select_pose(args) -> int:
    from ..daa import PoseIndex, select_similar
    from ..train import train_frames
    from .io import DataError, read_dataset

    ds = read_dataset(args.data)
    frames = train_frames(len(ds.poses), args.sparse_every)
    if args.frame not in frames:
        raise DataError(f"frame {args.frame} is not among the indexed frames")
    idx = PoseIndex(frames, [ds.poses[f] for f in frames], args.root_weight)
    partner = select_similar(idx, args.frame, args.topn)
    ranked = idx.ranked(args.frame)
    print(json.dumps({"frame": args.frame, "topn": args.topn, "partner": partner,
                      "distance": dict(ranked)[partner],
                      "ranked": [{"frame": f, "distance": d} for f, d in ranked]}))
    return EXIT_OK


def evaluate(state, rig, ds, split: str, background=(0.0, 0.0, 0.0)) -> dict:
    """Mean PSNR/SSIM of 8-bit renders against the stored images of ``split``."""
    from ..train import render_pose
    from .io import DataError, to_uint8
    from .metrics import psnr, ssim

    views = ds.split_views(split)
    if not views:
        raise DataError(f"no views with split {split!r}")
    bg = np.asarray(background, dtype=np.float64)
    ps, ss = [], []
    for v in views:
        color, _ = render_pose(state, rig, ds.poses[v.frame_id], ds.cameras[v.camera_id], frame=v.frame_id,
                               background=bg)
        gt = ds.image(v)[..., :3] + (1.0 - ds.mask(v))[..., None] * bg
        pred = to_uint8(color) / 255.0
        gt = to_uint8(gt) / 255.0
        ps.append(psnr(pred, gt))
        ss.append(ssim(pred, gt))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "views": len(views)}


def cmd_eval(args) -> int:
    from ..train import load_state

    state, rig, cfg, header = load_state(args.ckpt)
    ds = _dataset_for(header, args.data)
    print(json.dumps(evaluate(state, rig, ds, args.split, cfg.background)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gsavatar", description="Skeletal 3D Gaussian avatars on synthetic rigs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train an avatar")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--sparse-every", type=int)
    s.add_argument("--no-daa", action="store_true")
    s.add_argument("--no-contrastive", action="store_true")
    s.add_argument("--topn", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--log", help="metrics JSON-lines path (default: OUT.metrics.jsonl)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render a dataset frame from a dataset camera")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--frame", type=int, required=True)
    s.add_argument("--camera", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("animate", help="render novel poses from poses.json")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--poses", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_animate)

    s = sub.add_parser("select-pose", help="most similar other frame (JSON to stdout)")
    s.add_argument("--data", required=True)
    s.add_argument("--frame", type=int, required=True)
    s.add_argument("--topn", type=int, default=1)
    s.add_argument("--sparse-every", type=int, default=1)
    s.add_argument("--root-weight", type=float, default=1.0)
    s.set_defaults(func=cmd_select_pose)

    s = sub.add_parser("eval", help="PSNR/SSIM on a split (JSON to stdout)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data")
    s.add_argument("--split", default="test")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    from ..train import NumericalError
    from .io import DataError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"gsavatar: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError, KeyError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
