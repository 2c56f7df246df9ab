"""
Command-line interface.

    panofocus focus      refine detections with the sub-region re-detection pass
    panofocus forward    encode frames and emit features and multi-label predictions
    panofocus gradcheck  compare reverse-mode gradients with finite differences
    panofocus eval       score predictions against annotations
    panofocus render     draw detections or predictions as SVG overlays
    panofocus pipeline   focus -> forward -> eval in one go

Exit status: 0 on success, 1 on input or validation errors, 2 when an
internal invariant breaks.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from panofocus import __version__
from panofocus.evaluation import evaluate
from panofocus.focuser import (
    AdapterError,
    CommandDetector,
    DetectorAdapter,
    FileDetector,
    NullDetector,
    RegionError,
    focus_frame,
)
from panofocus.geometry import Box, FrameSpec, GeometryError
from panofocus.io import formats
from panofocus.io.config import CONFIG_ENV, ConfigError, RunConfig, load_config
from panofocus.io.images import find_frame_image, image_size, load_image
from panofocus.pipeline import annotation_inputs, detection_inputs, forward_frame, ordered_map
from panofocus.prototyper.gradcheck import GRADCHECK_TOLERANCE, build_desk_problem, gradient_check_all
from panofocus.prototyper.model import init_params, validate_params
from panofocus.render import classify, relative_href, render_svg

log = logging.getLogger("panofocus")


class InputError(Exception):
    """Bad user input; exits with status 1."""


class StageError(InputError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")


INPUT_ERRORS = (InputError, formats.FormatError, ConfigError, AdapterError, RegionError, GeometryError, OSError)

# flag name -> config key
FOCUS_OVERRIDES = {
    "theta": "theta", "beta1": "beta1", "beta2": "beta2", "nms_iou": "nms_iou",
    "min_merge_count": "min_merge_count", "min_region_size": "min_region_size",
}


# configuration & shared helpers --------------------------------------------------


def _config(args, extra: Optional[dict] = None) -> RunConfig:
    path = args.config or os.environ.get(CONFIG_ENV) or None
    overrides = {key: getattr(args, flag, None) for flag, key in FOCUS_OVERRIDES.items()}
    overrides["images_dir"] = getattr(args, "images_dir", None)
    overrides.update(extra or {})
    return load_config(path, overrides)


def _jobs(args) -> int:
    return args.jobs if args.jobs and args.jobs > 0 else (os.cpu_count() or 1)


def _detector(spec: Optional[str]) -> DetectorAdapter:
    if spec is None or spec == "none":
        return NullDetector()
    kind, _, value = spec.partition(":")
    if kind == "file" and value:
        return FileDetector(value)
    if kind == "cmd" and value:
        return CommandDetector(value)
    raise InputError(f"--detector must be file:PATH, cmd:TEMPLATE or none, got {spec!r}")


def _frame_image(cfg: RunConfig, frame_id: str, explicit: Optional[str] = None) -> Optional[Path]:
    if explicit:
        p = Path(explicit)
        if not p.is_absolute() and cfg.images_dir:
            p = Path(cfg.images_dir) / p
        return p if p.is_file() else None
    return find_frame_image(cfg.images_dir, frame_id)


def _frame_spec(cfg: RunConfig, image_path: Optional[Path]) -> FrameSpec:
    if image_path is not None:
        return FrameSpec(*image_size(image_path))
    return FrameSpec(cfg.frame_width, cfg.frame_height)


def _weights(spec: str, cfg: RunConfig) -> dict[str, np.ndarray]:
    if spec.startswith("seed:"):
        try:
            seed = int(spec[5:])
        except ValueError:
            raise InputError(f"bad --weights seed {spec!r}") from None
        return init_params(cfg.prototyper, seed)
    params = formats.load_weights(spec)
    try:
        validate_params(params, cfg.prototyper)
    except ValueError as exc:
        raise InputError(f"{spec}: {exc}") from exc
    return params


def _write(path: Optional[str], text: str) -> None:
    if path is None:
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


# focus ---------------------------------------------------------------------------


def run_focus(cfg: RunConfig, detections_path: str, detector_spec: Optional[str], jobs: int, skip_errors: bool,
              echo=print) -> dict[str, list[Box]]:
    frames = formats.load_detections(detections_path)
    detector = _detector(detector_spec)
    needs_image = isinstance(detector, CommandDetector)

    def one(item):
        fid, boxes = item
        img_path = _frame_image(cfg, fid)
        if needs_image and img_path is None:
            raise InputError(f"frame {fid!r}: no image found in {cfg.images_dir!r}")
        image = load_image(img_path) if (img_path is not None and needs_image) else None
        res = focus_frame(boxes, detector, cfg.focuser, _frame_spec(cfg, img_path),
                          image=image, frame_id=fid, skip_errors=skip_errors)
        return fid, res

    results = ordered_map(one, list(frames.items()), jobs)
    for fid, res in results:
        c = res.counts()
        echo(f"{fid}: original={c['original']} extended={c['extended']} regions={c['regions']} "
             f"fine={c['fine']} fused={c['fused']}")
    return {fid: res.fused for fid, res in results}


def cmd_focus(args) -> int:
    cfg = _config(args)
    fused = run_focus(cfg, args.detections, args.detector, _jobs(args), args.skip_region_errors)
    _write(args.out, formats.dumps_detections(fused))
    return 0


# forward -------------------------------------------------------------------------


def run_forward(cfg: RunConfig, params, frames: list[tuple[str, Optional[Path], list[Box], list[list[int]]]],
                train: bool, jobs: int):
    def one(item):
        k, (fid, img_path, boxes, groups) = item
        if boxes and img_path is None:
            raise InputError(f"frame {fid!r}: no image available for feature extraction")
        image = load_image(img_path) if boxes else np.zeros((1, 1, 3), dtype=np.uint8)
        gumbel = np.random.default_rng([cfg.gumbel_seed, k]) if train else None
        return forward_frame(fid, image, boxes, groups, params, cfg, gumbel)

    return ordered_map(one, list(enumerate(frames)), jobs)


def _forward_outputs(results) -> tuple[str, str]:
    feats = "".join(
        formats.features_record(r.frame_id, r.hierarchy.ind.data, r.hierarchy.gro.data, r.hierarchy.glo.data)
        for r in results
    )
    return feats, formats.dumps_predictions(r.prediction for r in results)


def cmd_forward(args) -> int:
    cfg = _config(args)
    params = _weights(args.weights, cfg)
    frames = []
    if args.annotations:
        for fid, fa in formats.load_annotations(args.annotations, cfg.class_counts).items():
            boxes, groups = annotation_inputs(fa)
            frames.append((fid, _frame_image(cfg, fid, fa.image_path), boxes, groups))
    else:
        for fid, boxes in formats.load_detections(args.detections).items():
            frames.append((fid, _frame_image(cfg, fid), boxes, detection_inputs(boxes, cfg)))
    results = run_forward(cfg, params, frames, args.train_mode, _jobs(args))
    feats, preds = _forward_outputs(results)
    _write(args.out, feats)
    _write(args.out_pred, preds)
    print(f"encoded {len(results)} frame(s)")
    return 0


# gradcheck -----------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    problem = build_desk_problem(seed=args.seed, d=args.dims, q=args.individuals, heads=args.heads)
    if args.weights:
        params = formats.load_weights(args.weights)
        try:
            validate_params(params, problem.cfg)
        except ValueError as exc:
            raise InputError(f"{args.weights}: {exc}") from exc
        problem.params = params
    start = time.perf_counter()
    errors = gradient_check_all(problem.loss, problem.params, epsilon=args.epsilon)
    elapsed = time.perf_counter() - start
    report = problem.report()
    print(f"gradient check: d={args.dims} Q={args.individuals} L={len(problem.groups)} "
          f"epsilon={args.epsilon:g} lambda={report.lam:g} lambda_reg={report.lambda_reg:g}")
    print(f"loss total={report.total:.6f} rec={report.l_rec:.6f} det={report.l_det:.6f}")
    print(f"{'matrix':<24} {'entries':>8} {'max rel err':>12}  status")
    worst = 0.0
    for name in sorted(errors):
        err = errors[name]
        worst = max(worst, err)
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{name:<24} {problem.params[name].size:>8} {err:>12.3e}  {status}")
    print(f"max relative error {worst:.3e} (tolerance {args.tolerance:g}) in {elapsed:.1f}s")
    return 0 if worst < args.tolerance else 1


# eval ----------------------------------------------------------------------------


def cmd_eval(args) -> int:
    cfg = _config(args)
    gts = formats.load_annotations(args.gt, cfg.class_counts)
    preds = formats.load_predictions(args.pred, cfg.class_counts)
    iou = args.iou if args.iou is not None else cfg.iou_thresh
    member = args.member_iou if args.member_iou is not None else cfg.member_iou_thresh
    report = evaluate(preds, gts, iou, member)
    print(report.to_text())
    _write(args.json, report.to_json())
    return 0


# render --------------------------------------------------------------------------


def cmd_render(args) -> int:
    cfg = _config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    original = formats.load_detections(args.original) if args.original else None
    items: list[tuple[str, list[Box], list[str], Optional[list[str]]]] = []
    if args.detections:
        for fid, boxes in formats.load_detections(args.detections).items():
            kinds = classify(boxes, original.get(fid, []) if original is not None else None)
            items.append((fid, boxes, kinds, None))
    else:
        for fid, fp in formats.load_predictions(args.pred, cfg.class_counts).items():
            boxes = [p.box.with_score(p.score) for p in fp.individuals]
            kinds = ["fine"] * len(boxes)
            labels = [",".join(map(str, sorted(p.actions))) for p in fp.individuals]
            for g in fp.groups:
                member_boxes = [fp.individuals[m].box for m in g.members]
                x1 = min(b.x for b in member_boxes)
                y1 = min(b.y for b in member_boxes)
                x2 = max(b.x2 for b in member_boxes)
                y2 = max(b.y2 for b in member_boxes)
                boxes.append(Box.from_corners(x1, y1, x2, y2))
                kinds.append("group")
                labels.append(",".join(map(str, sorted(g.activities))))
            items.append((fid, boxes, kinds, labels))
    for fid, boxes, kinds, labels in items:
        img = _frame_image(cfg, fid)
        frame = _frame_spec(cfg, img)
        svg = render_svg(frame.width, frame.height, boxes, kinds, relative_href(img, out_dir), labels)
        (out_dir / f"{fid}.svg").write_text(svg)
    print(f"wrote {len(items)} SVG file(s) to {out_dir}")
    return 0


# pipeline ------------------------------------------------------------------------


def cmd_pipeline(args) -> int:
    try:
        cfg = _config(args)
        gts = formats.load_annotations(args.gt, cfg.class_counts)
        formats.load_detections(args.detections)
        params = _weights(args.weights, cfg)
        _detector(args.detector)
    except INPUT_ERRORS as exc:
        raise StageError("validate", exc) from exc
    if args.dry_run:
        print("inputs valid; nothing written (--dry-run)")
        return 0

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = _jobs(args)
    try:
        fused = run_focus(cfg, args.detections, args.detector, jobs, args.skip_region_errors)
    except INPUT_ERRORS as exc:
        raise StageError("focus", exc) from exc
    (out_dir / "fused.jsonl").write_text(formats.dumps_detections(fused))

    try:
        frames = [(fid, _frame_image(cfg, fid), boxes, detection_inputs(boxes, cfg)) for fid, boxes in fused.items()]
        results = run_forward(cfg, params, frames, args.train_mode, jobs)
    except INPUT_ERRORS as exc:
        raise StageError("forward", exc) from exc
    feats, preds = _forward_outputs(results)
    (out_dir / "features.jsonl").write_text(feats)
    (out_dir / "predictions.jsonl").write_text(preds)

    try:
        report = evaluate({r.frame_id: r.prediction for r in results}, gts, cfg.iou_thresh, cfg.member_iou_thresh)
    except INPUT_ERRORS as exc:
        raise StageError("eval", exc) from exc
    (out_dir / "report.json").write_text(report.to_json())
    print(report.to_text())
    return 0


# argument parsing ------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"key = value config file (falls back to ${CONFIG_ENV})")
    p.add_argument("--jobs", type=int, default=None, help="worker threads (default: all cores)")


def _add_focus_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--detector", default="none", help="file:PATH, cmd:TEMPLATE or none")
    p.add_argument("--skip-region-errors", action="store_true", help="warn instead of failing on detector errors")
    p.add_argument("--theta", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--nms-iou", dest="nms_iou", type=float)
    p.add_argument("--min-merge-count", dest="min_merge_count", type=int)
    p.add_argument("--min-region-size", dest="min_region_size", type=float)


def _add_mode(p: argparse.ArgumentParser) -> None:
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--eval-mode", dest="train_mode", action="store_false", help="no Gumbel noise (default)")
    mode.add_argument("--train-mode", dest="train_mode", action="store_true", help="seeded Gumbel noise")
    p.set_defaults(train_mode=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panofocus", description=__doc__.split("\n\n")[0].strip())
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("focus", help="refine detections per frame")
    _add_common(p)
    _add_focus_flags(p)
    p.add_argument("--detections", required=True)
    p.add_argument("--images-dir", dest="images_dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_focus)

    p = sub.add_parser("forward", help="encode frames and predict activities")
    _add_common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--annotations")
    src.add_argument("--detections")
    p.add_argument("--images-dir", dest="images_dir")
    p.add_argument("--weights", default="seed:0", help="weights.json or seed:N")
    _add_mode(p)
    p.add_argument("--out", help="features.jsonl")
    p.add_argument("--out-pred", dest="out_pred", help="predictions.jsonl")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, default=8)
    p.add_argument("--individuals", type=int, default=3)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.add_argument("--weights", help="weights.json matching the desk-scale architecture")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="score predictions")
    _add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou", type=float)
    p.add_argument("--member-iou", dest="member_iou", type=float)
    p.add_argument("--json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="SVG overlays")
    _add_common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--detections")
    src.add_argument("--pred")
    p.add_argument("--original", help="original detections; fused boxes not found here are drawn as fine-pass boxes")
    p.add_argument("--images-dir", dest="images_dir")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("pipeline", help="focus, forward and eval end to end")
    _add_common(p)
    _add_focus_flags(p)
    p.add_argument("--detections", required=True)
    p.add_argument("--images-dir", dest="images_dir")
    p.add_argument("--gt", required=True)
    p.add_argument("--weights", default="seed:0")
    _add_mode(p)
    p.add_argument("--out-dir", dest="out_dir", default="panofocus_out")
    p.add_argument("--dry-run", dest="dry_run", action="store_true")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"panofocus {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"panofocus {args.command}: invalid input: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"panofocus {args.command}: internal error: {exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
