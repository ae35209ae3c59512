"""Command-line entry point.

Commands: ``synth``, ``sweep``, ``track``, ``eval``, ``refine-pose``.
Pipeline flags mirror :class:`PipelineConfig` fields (``--d-min``,
``--fusion-mode``, ...).  ``--config FILE`` loads a JSON object of the same
fields; flags given on the command line override it.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import typing
from pathlib import Path

import numpy as np

from . import io, pipeline, synthetic
from .errors import ConfigError, DataError, DPVError, NumericalFailureError
from .evaluation import aggregate
from .geometry import exp_se3, log_se3

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _field_type(default, annotation):
    text = str(annotation)
    if isinstance(default, bool) or text.startswith("bool"):
        return bool
    if "int" in text and "float" not in text:
        return int
    if "float" in text:
        return float
    return str


def _add_config_flags(parser):
    parser.add_argument("--config", help="JSON file with pipeline settings")
    hints = typing.get_type_hints(pipeline.PipelineConfig)
    group = parser.add_argument_group("pipeline settings")
    for f in dataclasses.fields(pipeline.PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = _field_type(f.default, hints[f.name])
        if kind is bool:
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS)
        else:
            group.add_argument(flag, dest=f.name, type=kind, default=argparse.SUPPRESS, metavar=kind.__name__.upper())


def _config_from_args(args) -> pipeline.PipelineConfig:
    names = set(pipeline.PipelineConfig.field_names())
    overrides = {k: v for k, v in vars(args).items() if k in names}
    if args.config:
        return pipeline.PipelineConfig.from_file(args.config, overrides)
    return pipeline.PipelineConfig.from_dict(overrides)


def _print_metrics(metrics, **extra):
    print(metrics.to_text())
    print(metrics.to_record(**extra))


def cmd_synth(args) -> int:
    builder = synthetic.SCENES[args.scene]
    kwargs = dict(
        n_frames=args.frames, width=args.width, height=args.height, seed=args.seed, noise_sigma=args.noise
    )
    if args.step is not None:
        kwargs["step"] = args.step
    scene = builder(**kwargs)
    pipeline.write_synthetic_dataset(scene, args.out)
    print(f"wrote {args.frames} frames to {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _config_from_args(args)
    manifest = io.load_sequence(args.dataset)
    ref = args.frame if args.frame is not None else 2 * config.delta_t
    dpv, depth, conf = pipeline.run_window(manifest, ref, config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / f"dpv_{ref:06d}.npy", dpv.values)
    io.write_depth(depth, out / f"depth_{ref:06d}.png")
    io.write_confidence(conf, out / f"confidence_{ref:06d}.png")
    gt = manifest.ground_truth(ref)
    if gt is not None:
        _print_metrics(pipeline.evaluate_depth(depth, gt, config), frame=ref)
    return EXIT_OK


def cmd_track(args) -> int:
    config = _config_from_args(args)
    manifest = io.load_sequence(args.dataset)
    result = pipeline.run_stream(manifest, config)
    print(f"processed {len(result.frames)} frames, skipped {len(result.skipped)}")
    if result.summary is not None:
        _print_metrics(result.summary, frames=len(result.frames))
    return EXIT_OK


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    names = sorted(p.name for p in pred_dir.glob("*.png"))
    if not names:
        raise DataError(f"no predictions in {pred_dir}")
    config = pipeline.PipelineConfig(
        eval_min_depth=args.min_depth, eval_max_depth=args.max_depth, scale_normalize=not args.no_scale_normalize
    )
    per_frame = []
    for name in names:
        gt_path = gt_dir / name
        if not gt_path.is_file():
            raise DataError(f"missing ground truth {gt_path}")
        m = pipeline.evaluate_depth(io.read_depth(pred_dir / name), io.read_depth(gt_path), config)
        per_frame.append(m)
        if args.per_frame:
            print(m.to_record(frame=name))
    _print_metrics(aggregate(per_frame), frames=len(per_frame), min_depth=args.min_depth, max_depth=str(args.max_depth))
    return EXIT_OK


def cmd_refine_pose(args) -> int:
    config = _config_from_args(args)
    manifest = io.load_sequence(args.dataset)
    ref = args.frame if args.frame is not None else 2 * config.delta_t
    window = pipeline.make_window(manifest, ref, config.delta_t)
    if args.depth:
        depth = io.read_depth(args.depth)
    else:
        depth = manifest.ground_truth(ref)
        if depth is None:
            raise DataError("no depth given and the sequence has no ground truth")
    if args.perturb_deg or args.perturb_frac:
        rng = np.random.default_rng(config.seed)
        perturbed = []
        for pose in window.relative_poses:
            axis = rng.normal(size=3)
            direction = rng.normal(size=3)
            xi = np.concatenate([
                axis / np.linalg.norm(axis) * math.radians(args.perturb_deg),
                direction / np.linalg.norm(direction) * args.perturb_frac * np.linalg.norm(pose.translation),
            ])
            perturbed.append(exp_se3(xi) @ pose)
        window = window.with_poses(perturbed)
    conf = (depth > 0).astype(np.float64)
    res = pipeline.refine_window_poses(window, depth, conf, config)
    record = {
        "frame": ref,
        "initial_energy": res.initial_energy,
        "final_energy": res.final_energy,
        "iterations": res.iterations,
        "rank_deficient": res.rank_deficient,
        "poses": [
            {"offset": o, "twist": log_se3(p).tolist(), "translation": p.translation.tolist(), "quaternion_xyzw": p.as_quaternion().tolist()}
            for o, p in zip(window.offsets, res.poses)
        ],
    }
    print(json.dumps(pipeline.json_safe(record), sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpvstream", description="Streaming multi-view depth with probability volumes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic sequence to disk")
    p.add_argument("out")
    p.add_argument("--scene", choices=sorted(synthetic.SCENES), default="plane")
    p.add_argument("--frames", type=int, default=25)
    p.add_argument("--step", type=float, default=None, help="camera translation per frame (m)")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep", help="single-window volume, depth and confidence")
    p.add_argument("dataset")
    p.add_argument("--frame", type=int, default=None, help="reference frame index")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("track", help="run the fused stream over a sequence")
    p.add_argument("dataset")
    _add_config_flags(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score a directory of depth PNGs against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--min-depth", type=float, default=0.0)
    p.add_argument("--max-depth", type=float, default=math.inf)
    p.add_argument("--no-scale-normalize", action="store_true")
    p.add_argument("--per-frame", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("refine-pose", help="photometric refinement of one window's poses")
    p.add_argument("dataset")
    p.add_argument("--frame", type=int, default=None)
    p.add_argument("--depth", help="reference depth PNG (default: ground truth)")
    p.add_argument("--perturb-deg", type=float, default=0.0)
    p.add_argument("--perturb-frac", type=float, default=0.0)
    _add_config_flags(p)
    p.set_defaults(func=cmd_refine_pose)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailureError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DPVError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
