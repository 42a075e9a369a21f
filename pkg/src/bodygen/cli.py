"""Command-line surface.

Exit codes: 0 success, 1 usage error, 2 data error (missing/malformed
inputs), 3 numeric failure (NaN outputs, gradcheck above threshold).
All randomized commands take --seed and are bit-reproducible; pipeline
sampling defaults to deterministic midpoint mode unless --jitter is given.
"""

import argparse
import csv
import json
import math
import os
import sys
import time

import numpy as np
import torch

from . import __version__
from .body import Pose, Shape, load_body_json, make_toy_body, save_body_json
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataFormatError, NumericsError
from .fields import build_generator, load_or_build_template
from .formats import write_obj, write_pfm, write_png
from .geometry import Camera, canonical_part_boxes, frontal_camera, pose_boxes, boxes_to_mesh
from .render import RenderConfig, render, render_gradcheck
from .sampling import (
    DatasetMeta,
    PoseSampler,
    SamplerConfig,
    annotate_head_bins,
    bin_target_mass,
    load_dataset_jsonl,
    sample_batch,
    sample_latent,
    save_dataset_jsonl,
)
from .training import Discriminator, TrainConfig, Trainer, make_synthetic_dataset

USAGE_ERROR, DATA_ERROR, NUMERIC_ERROR = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _load_json(path, what):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read {what} {path}: {exc}") from exc


def _load_pose(path, num_joints):
    if path is None:
        return Pose.rest(num_joints)
    data = _load_json(path, "pose")
    try:
        pose = Pose(
            np.asarray(data["axis_angle"], dtype=np.float64),
            np.asarray(data.get("translation", [0.0, 0.0, 0.0]), dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed pose file {path}: {exc}") from exc
    if len(pose.axis_angle) != num_joints:
        raise DataFormatError(
            f"pose has {len(pose.axis_angle)} joints, body has {num_joints}"
        )
    return pose


def _load_shape(path, width):
    if path is None:
        return Shape.neutral(width)
    data = _load_json(path, "shape")
    try:
        shape = Shape(np.asarray(data["coefficients"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed shape file {path}: {exc}") from exc
    if len(shape.coefficients) != width:
        raise DataFormatError(
            f"shape has {len(shape.coefficients)} coefficients, body expects {width}"
        )
    return shape


def _load_camera(path, model, width, height):
    if path is None:
        return frontal_camera(model, width, height)
    data = _load_json(path, "camera")
    try:
        return Camera(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            rotation=np.asarray(data["R"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(data["t"], dtype=np.float64),
            width=width,
            height=height,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed camera file {path}: {exc}") from exc


def _cache_dir():
    root = os.environ.get(
        "XDG_CACHE_HOME", os.path.join(os.path.expanduser("~"), ".cache")
    )
    return os.path.join(root, "bodygen")


def _template_for(model, resolution=64):
    return load_or_build_template(model, resolution, cache_dir=_cache_dir())


def _load_generator(checkpoint_path, model, template_resolution=64):
    template = _template_for(model, template_resolution)
    nets = load_checkpoint(checkpoint_path, template=template)
    if "generator" not in nets:
        raise DataFormatError(f"{checkpoint_path} holds no generator")
    return nets["generator"]


def _render_once(net, model, args, z, rng):
    cfg = RenderConfig(
        samples_per_ray=args.samples,
        deterministic_midpoint=not args.jitter,
    )
    pose = _load_pose(args.pose, model.num_joints)
    shape = _load_shape(args.shape, model.shape_basis.shape[1])
    cam = _load_camera(args.camera, model, args.width, args.height)
    return render(net, model, shape, pose, cam, z, cfg, rng=rng if args.jitter else None)


def cmd_render(args):
    model = load_body_json(args.body)
    net = _load_generator(args.checkpoint, model, args.template_res)
    rng = np.random.default_rng(args.seed)
    z = sample_latent(rng, net.latent_dim)
    out = _render_once(net, model, args, z, rng)
    write_png(args.out, out.rgb)
    if args.depth_out:
        write_pfm(args.depth_out, out.depth)
    if args.opacity_out:
        write_pfm(args.opacity_out, out.opacity)
    print(f"query_count {out.query_count}")
    print(f"wall_time_s {out.wall_time:.3f}")
    return 0


def cmd_interpolate(args):
    if args.steps < 2:
        raise DataFormatError("need at least 2 interpolation steps")
    model = load_body_json(args.body)
    net = _load_generator(args.checkpoint, model, args.template_res)
    z1 = sample_latent(np.random.default_rng(args.z1_seed), net.latent_dim)
    z2 = sample_latent(np.random.default_rng(args.z2_seed), net.latent_dim)
    os.makedirs(args.out_dir, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for i in range(args.steps):
        t = i / (args.steps - 1)
        z = (1.0 - t) * z1 + t * z2
        out = _render_once(net, model, args, z, rng)
        write_png(os.path.join(args.out_dir, f"frame_{i:04d}.png"), out.rgb)
    print(f"wrote {args.steps} frames to {args.out_dir}")
    return 0


def cmd_make_body(args):
    model = make_toy_body(args.parts, args.verts_per_part, args.seed)
    save_body_json(model, args.out)
    print(
        f"wrote body with {len(model.vertices)} vertices, "
        f"{model.num_parts} parts to {args.out}"
    )
    return 0


def cmd_inspect_boxes(args):
    model = load_body_json(args.body)
    pose = _load_pose(args.pose, model.num_joints)
    shape = _load_shape(args.shape, model.shape_basis.shape[1])
    from .body import deform

    boxes = canonical_part_boxes(model, args.margin)
    posed_boxes = pose_boxes(boxes, deform(model, shape, pose), model)
    verts, faces = boxes_to_mesh(posed_boxes)
    write_obj(args.out, verts, faces)
    print(f"wrote {boxes.num_parts} boxes ({len(verts)} vertices) to {args.out}")
    return 0


def cmd_sample_poses(args):
    meta = load_dataset_jsonl(args.meta)
    k = meta.records[0].theta.shape[0]
    if args.body:
        model = load_body_json(args.body)
    elif k == 24:
        model = make_toy_body(16, 8, 0)  # only the joint tree is used
    else:
        raise DataFormatError(
            f"records have {k} joints; pass --body for a matching skeleton"
        )
    cfg = SamplerConfig(
        bins=args.bins,
        sigma_theta=math.radians(args.sigma_deg),
        mode=args.mode,
    )
    annotate_head_bins(meta, model, cfg)
    from .sampling import pose_guided_weights

    weights = pose_guided_weights(meta, cfg)
    counts = np.bincount(meta.bin, minlength=cfg.bins)
    target = np.zeros(cfg.bins)
    np.add.at(target, meta.bin, weights)
    empirical = np.zeros(cfg.bins)
    if args.draws > 0:
        rng = np.random.default_rng(args.seed)
        drawn = sample_batch(weights, args.draws, rng)
        hist = np.bincount(meta.bin[drawn], minlength=cfg.bins)
        empirical = hist / args.draws
    with open(args.out_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_index", "theta_m_degrees", "target_mass", "empirical_mass"])
        for m in range(cfg.bins):
            writer.writerow(
                [m, "%.6f" % (360.0 * m / cfg.bins), "%.9g" % target[m], "%.9g" % empirical[m]]
            )
    print(f"wrote {cfg.bins} bins to {args.out_csv} ({int(counts.sum())} records)")
    return 0


def cmd_gradcheck(args):
    model = load_body_json(args.body)
    if args.checkpoint:
        net = _load_generator(args.checkpoint, model)
    else:
        net = build_generator(
            model, hidden=args.hidden, with_template=False, seed=args.seed
        )
        net.template = _template_for(model, 48)
    if args.dtype == "float64":
        net = net.double()
        fd_step = 1e-6
    else:
        fd_step = 1e-2
    cam = frontal_camera(model, args.width, args.height)
    err, report = render_gradcheck(
        net,
        model,
        Shape.neutral(model.shape_basis.shape[1]),
        Pose.rest(model.num_joints),
        cam,
        sample_latent(np.random.default_rng(args.seed), net.latent_dim),
        RenderConfig(samples_per_ray=args.samples, deterministic_midpoint=True),
        pixel_count=args.pixels,
        fd_step=fd_step,
        seed=args.seed,
    )
    print(f"max_rel_error {err:.3e}")
    if args.verbose:
        for name in sorted(report, key=report.get, reverse=True):
            print(f"  {report[name]:.3e}  {name}")
    if err > args.threshold:
        print(f"FAIL: above threshold {args.threshold:g}", file=sys.stderr)
        return NUMERIC_ERROR
    return 0


def cmd_train_toy(args):
    os.makedirs(args.out_dir, exist_ok=True)
    model = load_body_json(args.body)
    sampler_cfg = SamplerConfig(mode=args.sample_mode)
    if args.meta:
        meta = load_dataset_jsonl(args.meta)
        from .formats import read_png

        base = os.path.dirname(os.path.abspath(args.meta))
        images = []
        for rec in meta.records:
            if rec.image is None:
                raise DataFormatError(f"record {rec.id} has no image path")
            images.append(read_png(os.path.join(base, rec.image)))
        images = np.stack(images)
        if images.shape[1:3] != (args.height, args.width):
            raise DataFormatError(
                f"images are {images.shape[1:3]}, expected {(args.height, args.width)}"
            )
        records = meta.records
    else:
        records, images = make_synthetic_dataset(
            model, args.synth_count, args.height, args.width, seed=args.seed
        )
        for i, rec in enumerate(records):
            name = f"{rec.id}.png"
            write_png(os.path.join(args.out_dir, name), images[i])
            rec.image = name
        save_dataset_jsonl(records, os.path.join(args.out_dir, "meta.jsonl"))
        meta = DatasetMeta(records=records)
    annotate_head_bins(meta, model, sampler_cfg)
    sampler = PoseSampler(meta, sampler_cfg)
    gen = build_generator(
        model, hidden=args.hidden, with_template=False, seed=args.seed
    )
    gen.template = _template_for(model, 48)
    disc = Discriminator(args.height, args.width, seed=args.seed + 1)
    cfg = TrainConfig(
        iters=args.iters,
        batch=args.batch,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
    )
    trainer = Trainer(
        gen,
        disc,
        model,
        sampler,
        images,
        cfg=cfg,
        render_cfg=RenderConfig(
            samples_per_ray=args.samples, deterministic_midpoint=True
        ),
        log_path=os.path.join(args.out_dir, "train_log.jsonl"),
        checkpoint_dir=args.out_dir,
    )
    start = time.perf_counter()
    history = trainer.run(args.iters)
    if args.iters == 0:
        save_checkpoint(
            os.path.join(args.out_dir, "ckpt_final.bgc"),
            {"generator": gen, "discriminator": disc},
        )
    elapsed = time.perf_counter() - start
    last = history[-1] if history else {}
    print(f"trained {args.iters} iters in {elapsed:.1f}s; final: {last}")
    return 0


def build_parser():
    parser = _Parser(prog="bodygen", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_render_flags(p):
        p.add_argument("--width", type=int, default=256)
        p.add_argument("--height", type=int, default=512)
        p.add_argument("--samples", type=int, default=28)
        p.add_argument("--template-res", type=int, default=96,
                       help="template SDF cache grid resolution")
        p.add_argument("--pose")
        p.add_argument("--shape")
        p.add_argument("--camera")
        p.add_argument("--jitter", action="store_true",
                       help="stratified jitter instead of midpoint sampling")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("render", help="render one frame from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--body", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--depth-out")
    p.add_argument("--opacity-out")
    add_render_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("interpolate", help="render a latent interpolation sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--body", required=True)
    p.add_argument("--z1-seed", type=int, required=True)
    p.add_argument("--z2-seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--out-dir", required=True)
    add_render_flags(p)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("make-body", help="write a procedural toy body JSON")
    p.add_argument("--parts", type=int, default=16)
    p.add_argument("--verts-per-part", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_body)

    p = sub.add_parser("inspect-boxes", help="export posed part boxes as OBJ")
    p.add_argument("--body", required=True)
    p.add_argument("--pose")
    p.add_argument("--shape")
    p.add_argument("--margin", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_boxes)

    p = sub.add_parser("sample-poses", help="pose-guided sampling histogram CSV")
    p.add_argument("--meta", required=True)
    p.add_argument("--body")
    p.add_argument("--mode", choices=["original", "gaussian", "uniform"],
                   default="gaussian")
    p.add_argument("--sigma-deg", type=float, default=15.0)
    p.add_argument("--bins", type=int, default=72)
    p.add_argument("--draws", type=int, default=10000)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample_poses)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--body", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--pixels", type=int, default=16)
    p.add_argument("--threshold", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--samples", type=int, default=12)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="desk-scale adversarial smoke training")
    p.add_argument("--body", required=True)
    p.add_argument("--meta", help="dataset JSONL; omit to synthesize one")
    p.add_argument("--synth-count", type=int, default=4)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--samples", type=int, default=14)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--sample-mode", choices=["original", "gaussian", "uniform"],
                   default="gaussian")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_toy)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    torch.manual_seed(getattr(args, "seed", 0))
    try:
        return args.func(args)
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR


if __name__ == "__main__":
    sys.exit(main())
