"""Command-line surface: corpus generation, gazemap rendering, the two
training stages, redirection inference, evaluation, and the gradient
self-check.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every seeded
command is deterministic.  Set GAZEREDIRECT_LOG=INFO (or DEBUG) for
progress logging.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import RunConfig, config_hash, load_run_config, save_resolved_config
from .evaluation import ModelBundle, evaluate, run_redirection, write_raw_csv, write_report_csv
from .gazemap import GazeAngle, rasterize_gazemap
from .gradcheck import run_suite
from .losses import FeatureExtractor
from .training import (
    models_from_checkpoint,
    resolve_model_config,
    train_coarse,
    train_fine,
    write_trace_csv,
)

log = logging.getLogger("gazeredirect")


def _run_dir_for(cfg: RunConfig, base, explicit):
    if explicit:
        path = Path(explicit)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path(base) / f"{stamp}-{config_hash(cfg)}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _train_test_pairs(cfg: RunConfig):
    """Materialize the train and held-out pair sets described by the config."""
    d = cfg.data
    size = cfg.model.image_size
    if d.kind == "synthetic":
        train_pairs = data_mod.make_pair_dataset(
            d.count, d.seed, styles=tuple(range(d.train_styles)), size=size
        )
        test_pairs = data_mod.make_pair_dataset(
            d.test_count,
            d.seed + 1,
            styles=tuple(range(d.train_styles, d.train_styles + d.test_styles)),
            size=size,
        )
        return train_pairs, test_pairs
    samples = data_mod.load_dataset(d.root, d.labels, expected_size=(size, size))
    pairs = data_mod.pairs_from_samples(samples, max_pairs=d.count, seed=d.seed)
    if not pairs:
        raise ValueError(f"no usable pairs found under {d.root}")
    split = max(1, int(len(pairs) * 0.9))
    return pairs[:split], pairs[split:] or pairs[:1]


def _bundle_from_ckpt_path(path):
    ckpt = data_mod.load_checkpoint(path)
    coarse, gen, disc, model_cfg, train_cfg = models_from_checkpoint(ckpt)
    for model in (coarse, gen, disc):
        if model is not None:
            model.set_requires_grad(False)
    bundle = ModelBundle(
        coarse=coarse,
        generator=gen,
        config=model_cfg,
        include_gazemaps=not train_cfg.no_gazemap,
        compose_residual=not train_cfg.no_residual,
    )
    extractor = FeatureExtractor(
        image_channels=model_cfg.image_channels,
        channels=model_cfg.extractor_channels,
        seed=model_cfg.weight_seed,
    )
    return bundle, extractor, train_cfg


def cmd_gazemap(args):
    gm = rasterize_gazemap(GazeAngle(args.pitch, args.yaw), args.size, args.size)
    data_mod.save_gazemap_png(args.out, gm)
    print(f"wrote gazemap for pitch={args.pitch} yaw={args.yaw} to {args.out}")
    return 0


def cmd_synth(args):
    samples = data_mod.make_sample_dataset(
        args.count, args.seed, styles=tuple(range(args.styles)), size=args.size
    )
    labels = data_mod.save_dataset(samples, args.out_dir)
    print(f"wrote {len(samples)} samples under {args.out_dir} (labels: {labels})")
    return 0


def cmd_train_coarse(args):
    cfg = load_run_config(args.config)
    run_dir = _run_dir_for(cfg, args.run_root, args.run_dir)
    save_resolved_config(run_dir / "resolved_config.json", cfg)
    train_pairs, _ = _train_test_pairs(cfg)
    log.info("coarse training on %d pairs -> %s", len(train_pairs), run_dir)
    _, trace = train_coarse(train_pairs, cfg.model, cfg.train, run_dir=run_dir)
    write_trace_csv(run_dir / "trace_coarse.csv", trace)
    print(f"coarse stage done: final loss_recon={trace[-1]['loss_recon']:.4f}")
    print(f"checkpoint: {run_dir / 'coarse.ckpt'}")
    return 0


def cmd_train_fine(args):
    cfg = load_run_config(args.config)
    run_dir = _run_dir_for(cfg, args.run_root, args.run_dir)
    save_resolved_config(run_dir / "resolved_config.json", cfg)
    ckpt = data_mod.load_checkpoint(args.coarse_ckpt)
    coarse, _, _, _, _ = models_from_checkpoint(ckpt)
    train_pairs, _ = _train_test_pairs(cfg)
    log.info("fine training on %d pairs -> %s", len(train_pairs), run_dir)
    _, _, trace = train_fine(train_pairs, coarse, cfg.model, cfg.train, run_dir=run_dir)
    write_trace_csv(run_dir / "trace_fine.csv", trace)
    print(f"fine stage done: final loss_g={trace[-1]['loss_g']:.4f}")
    print(f"checkpoint: {run_dir / 'fine.ckpt'}")
    return 0


def _lookup_label_row(labels_path, image_path):
    name = Path(image_path).name
    with open(labels_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            if Path(row["path"]).name == name:
                return row
    raise ValueError(f"no labels row in {labels_path} matches image {name}")


def _residual_to_uint8(residual):
    # residual is signed in [-2, 2]; map affinely with 0 -> mid-gray
    return np.clip(np.round((residual + 2.0) * (255.0 / 4.0)), 0, 255).astype(np.uint8)


def cmd_redirect(args):
    bundle, _, _ = _bundle_from_ckpt_path(args.ckpt)
    row = _lookup_label_row(args.labels, args.input)
    source_gaze = GazeAngle(float(row["pitch_deg"]), float(row["yaw_deg"]))
    head_yaw = float(row["head_yaw_deg"])
    image = data_mod.load_image_gray(args.input)
    size = bundle.config.image_size
    if image.shape != (size, size):
        raise ValueError(f"input image is {image.shape}, checkpoint expects {size}x{size}")
    out = run_redirection(
        bundle, image, [source_gaze], [GazeAngle(args.target_pitch, args.target_yaw)], [head_yaw]
    )
    warped = data_mod.unit_to_uint8(np.clip(out["warped"][0, 0], -1, 1))
    refined = data_mod.unit_to_uint8(np.clip(out["refined"][0, 0], -1, 1))
    if out["residual"] is None:
        residual = np.full_like(warped, 127)
    else:
        residual = _residual_to_uint8(out["residual"][0, 0])
    strip = np.concatenate([warped, residual, refined], axis=1)
    from PIL import Image

    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(strip, mode="L").save(args.out)
    print(
        f"redirected {Path(args.input).name} from ({source_gaze.pitch}, {source_gaze.yaw}) "
        f"to ({args.target_pitch}, {args.target_yaw}); strip (coarse|residual|final) -> {args.out}"
    )
    return 0


def cmd_eval(args):
    bundle, extractor, _ = _bundle_from_ckpt_path(args.ckpt)
    size = bundle.config.image_size
    samples = data_mod.load_dataset(args.data, expected_size=(size, size))
    pairs = data_mod.pairs_from_samples(samples, max_pairs=args.max_pairs, seed=args.seed)
    if not pairs:
        raise ValueError(f"no usable pairs found under {args.data}")
    report = evaluate(bundle, pairs, extractor)
    report_path = Path(args.report)
    write_report_csv(report_path, report)
    write_raw_csv(report_path.parent / "eval_raw.csv", report)
    for row in report.groups:
        print(
            f"group {row.group:>3} deg: gaze_err={row.gaze_err:7.3f} "
            f"featdist={row.featdist:8.5f} psnr={row.psnr_db:7.2f} n={row.count}"
        )
    print(f"report: {report_path}")
    return 0


def cmd_gradcheck(args):
    results = run_suite(seeds=range(args.seeds), rtol=args.rtol)
    by_op = {}
    for r in results:
        by_op.setdefault(r.op, []).append(r)
    failed = False
    for op, rs in by_op.items():
        worst = max(r.max_error for r in rs)
        ok = all(r.passed for r in rs)
        failed = failed or not ok
        print(f"{'PASS' if ok else 'FAIL'} {op:<28} seeds={len(rs)} worst_rel_err={worst:.2e}")
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gazeredirect",
        description="Coarse-to-fine gaze redirection with numeric and pictorial conditioning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gazemap", help="rasterize a gazemap PNG (R=eyeball, G=iris)")
    p.add_argument("--pitch", type=float, required=True)
    p.add_argument("--yaw", type=float, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gazemap)

    p = sub.add_parser("synth", help="write a synthetic labelled eye corpus")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--styles", type=int, default=50)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-coarse", help="stage 1: train the warping branch")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", default=None, help="output directory (default: timestamped)")
    p.add_argument("--run-root", default="runs")
    p.set_defaults(func=cmd_train_coarse)

    p = sub.add_parser("train-fine", help="stage 2: adversarial refinement")
    p.add_argument("--config", required=True)
    p.add_argument("--coarse-ckpt", required=True)
    p.add_argument("--run-dir", default=None)
    p.add_argument("--run-root", default="runs")
    p.set_defaults(func=cmd_train_fine)

    p = sub.add_parser("redirect", help="redirect one eye image to a target angle")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--target-pitch", type=float, required=True)
    p.add_argument("--target-yaw", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_redirect)

    p = sub.add_parser("eval", help="grouped redirection metrics over a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory with labels.csv")
    p.add_argument("--report", required=True)
    p.add_argument("--max-pairs", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--rtol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("GAZEREDIRECT_LOG", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
