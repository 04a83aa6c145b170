"""``voxelkp`` command line: generate, train, eval, infer, report.

Exit codes: 0 success, 1 usage/config error, 2 runtime error, 3 NaN loss.
``VOXELKP_THREADS`` caps BLAS worker threads.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .metrics import PoseRecord, group_by_frame, read_records, report, write_records
from .network import decode
from .pose import DEFAULT_SKELETON, PoseEstimate, box_corners_bev
from .scenes import SceneError, SceneSample, generate_scene, load_dataset, load_scene, write_dataset
from .training import NanLossError, build_model, load_training_state, train
from . import autograd as ag

log = logging.getLogger("voxelkp")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_NAN = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- commands -----------------------------------------------------------------

def cmd_generate(cfg: RunConfig, out_dir) -> list[Path]:
    """Write ``cfg.data.num_scenes`` scenes and a manifest; scene i uses seed ``[seed, i]``."""
    d = cfg.data
    scenes = []
    for i in range(d.num_scenes):
        rng = np.random.default_rng([cfg.seed, i, 1])
        n = int(rng.integers(d.min_humans, d.max_humans + 1))
        scenes.append(generate_scene([cfg.seed, i], n, d.clutter_density, d.extent,
                                     ground_points=d.ground_points))
    try:
        return write_dataset(out_dir, scenes)
    except OSError as e:
        raise RuntimeError(f"cannot write dataset to {out_dir}: {e}") from e


def cmd_train(cfg: RunConfig, data_dir, out_dir, resume=None):
    scenes = load_dataset(data_dir)
    return train(cfg, scenes, resume=resume, out_dir=out_dir)


def load_model(cfg: RunConfig, checkpoint):
    if checkpoint is None or not Path(checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    model = build_model(cfg)
    load_training_state(checkpoint, model)
    model.eval()
    return model


def predict_scene(model, sample: SceneSample, cfg: RunConfig) -> list[PoseEstimate]:
    with ag.no_grad():
        h = model([sample.points])
    e = cfg.eval
    return decode(h, e.score_threshold, e.max_detections, e.iou_weight)


def _gt_as_estimates(sample: SceneSample) -> list[PoseEstimate]:
    return [PoseEstimate(1.0, a.center.copy(), a.size.copy(), a.yaw, a.keypoints.copy(),
                         a.visibility.copy()) for a in sample.annotations]


def cmd_eval(cfg: RunConfig, data_dir, out_dir, checkpoint=None, oracle: bool = False):
    """Decode every scene, write records and the per-part table (CSV + text)."""
    scenes = load_dataset(data_dir)
    model = None if oracle else load_model(cfg, checkpoint)
    preds = [_gt_as_estimates(s) if oracle else predict_scene(model, s, cfg) for s in scenes]
    gts = [s.annotations for s in scenes]
    rep = report(preds, gts, DEFAULT_SKELETON, cfg.eval.match_radius)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records(out / "predictions.vkpr",
                  [PoseRecord.from_estimate(f, i, p) for f, ps in enumerate(preds) for i, p in enumerate(ps)])
    write_records(out / "ground_truth.vkpr",
                  [PoseRecord.from_annotation(f, i, a) for f, gs in enumerate(gts) for i, a in enumerate(gs)])
    (out / "report.csv").write_text(rep.to_csv())
    (out / "report.txt").write_text(rep.to_text())
    return rep, preds


def cmd_report(pred_path, gt_path, out_dir, match_radius: float = 0.5):
    """Recompute the per-part table from interchange record files."""
    preds = read_records(pred_path)
    gts = read_records(gt_path)
    frames = sorted({r.frame_id for r in gts} | {r.frame_id for r in preds})
    if not frames:
        raise ValueError("no records")
    p = [[r.to_estimate() for r in fr] for fr in group_by_frame(preds, frames)]
    g = [[r.to_annotation() for r in fr] for fr in group_by_frame(gts, frames)]
    rep = report(p, g, DEFAULT_SKELETON, match_radius)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(rep.to_csv())
    (out / "report.txt").write_text(rep.to_text())
    return rep


def cmd_infer(cfg: RunConfig, checkpoint, scene_path, out_dir, svg: bool = True):
    model = load_model(cfg, checkpoint)
    sample = load_scene(scene_path)
    preds = predict_scene(model, sample, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = [PoseRecord.from_estimate(0, i, p) for i, p in enumerate(preds)]
    write_records(out / "predictions.vkpr", recs)
    write_records(out / "predictions.csv", recs)
    if svg:
        (out / "predictions.svg").write_text(render_svg(sample, preds, cfg.data.extent))
    return preds


def render_svg(sample: SceneSample, preds, extent: float, px_per_m: float = 12.0) -> str:
    """Top-down view: points gray, ground truth green, predictions red."""
    size = 2 * extent * px_per_m

    def xy(p):
        return (p[0] + extent) * px_per_m, (extent - p[1]) * px_per_m

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" height="{size:.0f}" '
             f'viewBox="0 0 {size:.0f} {size:.0f}">',
             f'<rect width="{size:.0f}" height="{size:.0f}" fill="white"/>', '<g fill="#999">']
    for p in sample.points.xyz:
        x, y = xy(p)
        parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="0.6"/>')
    parts.append("</g>")
    for objs, color, cls in ((sample.annotations, "#1a9641", "gt"), (preds, "#d7191c", "pred")):
        parts.append(f'<g class="{cls}" stroke="{color}" fill="none" stroke-width="1">')
        for o in objs:
            corners = box_corners_bev(o.center, o.size, o.yaw)
            pts = " ".join("{:.1f},{:.1f}".format(*xy(c)) for c in corners)
            parts.append(f'<polygon points="{pts}"/>')
            for a, b in DEFAULT_SKELETON.bones:
                (x1, y1), (x2, y2) = xy(o.keypoints[a]), xy(o.keypoints[b])
                parts.append(f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}"/>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --- argument handling -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="voxelkp", description="Sparse LiDAR human keypoint estimation")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory")
        if data:
            sp.add_argument("--data", help="dataset directory (default: config data_dir)")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g, data=False)
    g.add_argument("--num-scenes", type=int, help="override data.num_scenes")

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--steps", type=int, help="override steps")
    t.add_argument("--checkpoint", help="resume from this checkpoint")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(e)
    e.add_argument("--checkpoint", help="model checkpoint")
    e.add_argument("--oracle", action="store_true", help="feed ground truth as predictions")

    i = sub.add_parser("infer", help="predict one scene")
    common(i, data=False)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scene", required=True, help="scene file")
    i.add_argument("--no-svg", action="store_true")

    r = sub.add_parser("report", help="per-part table from interchange record files")
    common(r, data=False)
    r.add_argument("--pred", required=True)
    r.add_argument("--gt", required=True)
    return p


def _limit_threads():
    n = os.environ.get("VOXELKP_THREADS")
    if not n:
        return None
    try:
        k = int(n)
    except ValueError:
        raise UsageError(f"VOXELKP_THREADS must be an integer, got {n!r}")
    if k < 1:
        raise UsageError("VOXELKP_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=k)


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    try:
        args = build_parser().parse_args(argv)
        limiter = _limit_threads()
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if getattr(args, "steps", None) is not None:
            if args.steps < 1:
                raise UsageError("--steps must be >= 1")
            cfg = replace(cfg, steps=args.steps)
    except UsageError as e:
        print(f"voxelkp: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"voxelkp: config error: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        data = getattr(args, "data", None) or cfg.data_dir
        out = args.out or cfg.out_dir
        if args.command == "generate":
            if args.num_scenes is not None:
                cfg = replace(cfg, data=replace(cfg.data, num_scenes=args.num_scenes))
            paths = cmd_generate(cfg, args.out or cfg.data_dir)
            print(f"wrote {len(paths)} scenes to {Path(args.out or cfg.data_dir)}")
        elif args.command == "train":
            res = cmd_train(cfg, data, out, resume=args.checkpoint)
            last = res.rows[-1] if res.rows else {}
            print(f"trained {cfg.steps} steps; final loss {last.get('total', float('nan')):.6f}; "
                  f"checkpoint {res.checkpoint}")
        elif args.command == "eval":
            rep, _ = cmd_eval(cfg, data, out, args.checkpoint, oracle=args.oracle)
            print(rep.to_text(), end="")
        elif args.command == "infer":
            preds = cmd_infer(cfg, args.checkpoint, args.scene, out, svg=not args.no_svg)
            print(f"{len(preds)} detections written to {out}")
        elif args.command == "report":
            rep = cmd_report(args.pred, args.gt, out, cfg.eval.match_radius)
            print(rep.to_text(), end="")
    except NanLossError as e:
        print(f"voxelkp: {e}", file=sys.stderr)
        return EXIT_NAN
    except (OSError, ValueError, RuntimeError, SceneError) as e:
        print(f"voxelkp: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
