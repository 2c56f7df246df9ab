"""
Focuser pipeline
================

Four stages per frame:

1. expand every original detection about its center (width-thresholded ratio),
2. merge overlapping expanded boxes into dense sub-regions,
3. re-detect inside each sub-region crop with a pluggable detector,
4. fuse original and fine detections with class-agnostic NMS.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from panofocus.geometry import Box, FrameSpec, GeometryError, clip_box, iou, union_box
from panofocus.focuser.adapters import AdapterError, DetectorAdapter

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FocuserConfig:
    theta: float = 48.0
    beta1: float = 1.5
    beta2: float = 1.8
    nms_iou: float = 0.5
    min_merge_count: int = 1
    min_region_size: float = 8.0

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"theta must be > 0, got {self.theta}")
        if self.beta1 < 1 or self.beta2 < 1:
            raise ValueError(f"beta1/beta2 must be >= 1, got {self.beta1}/{self.beta2}")
        if not 0 < self.nms_iou < 1:
            raise ValueError(f"nms_iou must lie in (0, 1), got {self.nms_iou}")
        if self.min_merge_count < 1:
            raise ValueError(f"min_merge_count must be >= 1, got {self.min_merge_count}")
        if self.min_region_size < 0:
            raise ValueError(f"min_region_size must be >= 0, got {self.min_region_size}")


@dataclass(frozen=True)
class SubRegion:
    bounds: Box
    source_indices: tuple[int, ...]

    @property
    def merged_count(self) -> int:
        return len(self.source_indices)


class RegionError(RuntimeError):
    """A detector adapter failed on one sub-region."""

    def __init__(self, frame_id: str, region_index: int, region: Box, cause: Exception):
        self.frame_id = frame_id
        self.region_index = region_index
        self.region = region
        self.cause = cause
        super().__init__(
            f"detector failed on frame {frame_id!r} region #{region_index} "
            f"{tuple(round(v, 3) for v in region.coords())}: {cause}"
        )


@dataclass
class FocusResult:
    original: list[Box]
    extended: list[Box]
    regions: list[SubRegion]
    fine: list[Box]
    fused: list[Box]
    skipped_regions: list[int] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        return {
            "original": len(self.original),
            "extended": len(self.extended),
            "regions": len(self.regions),
            "fine": len(self.fine),
            "fused": len(self.fused),
        }


def adaptive_resize(b: Box, cfg: FocuserConfig, frame: Optional[FrameSpec]) -> Box:
    """Scale a box about its center, then clip it to the frame.

    Boxes at least `theta` wide use `beta1`; narrower ones use `beta2`.
    Both width and height are scaled; the score is carried over. Passing
    ``frame=None`` skips the clip.
    """
    beta = cfg.beta1 if b.w >= cfg.theta else cfg.beta2
    cx, cy = b.center
    w, h = b.w * beta, b.h * beta
    expanded = Box(cx - w / 2.0, cy - h / 2.0, w, h, b.score)
    return expanded if frame is None else clip_box(expanded, frame)


def _order_key(b: Box, index: int) -> tuple:
    return (b.area, b.x, b.y, b.w, b.h, index)


def dense_region_merge(extended: Sequence[Box]) -> list[SubRegion]:
    """Greedily grow seeds into dense sub-regions.

    The smallest remaining box (area, then x, y, w, h) seeds a region. The
    seed absorbs the first remaining box, in the same order, whose
    intersection with it has positive area; the scan restarts after every
    merge. A seed that overlaps nothing is emitted and the next seed is
    drawn, until every box is assigned.
    """
    if not extended:
        return []
    order = sorted(range(len(extended)), key=lambda i: _order_key(extended[i], i))
    corners = np.array([extended[i].corners() for i in order], dtype=float)
    alive = np.ones(len(order), dtype=bool)

    regions: list[SubRegion] = []
    for _ in range(len(order)):
        if not alive.any():
            break
        seed = int(np.argmax(alive))
        alive[seed] = False
        x1, y1, x2, y2 = corners[seed]
        members = [order[seed]]
        while True:
            iw = np.minimum(corners[:, 2], x2) - np.maximum(corners[:, 0], x1)
            ih = np.minimum(corners[:, 3], y2) - np.maximum(corners[:, 1], y1)
            hits = np.flatnonzero(alive & (iw > 0) & (ih > 0))
            if hits.size == 0:
                break
            k = int(hits[0])
            alive[k] = False
            members.append(order[k])
            x1 = min(x1, corners[k, 0])
            y1 = min(y1, corners[k, 1])
            x2 = max(x2, corners[k, 2])
            y2 = max(y2, corners[k, 3])
        regions.append(SubRegion(Box.from_corners(x1, y1, x2, y2), tuple(members)))
    if alive.any():
        raise RuntimeError("region merging did not assign every box")
    return regions


def crop_bounds(region: Box, frame: FrameSpec) -> Box:
    """Round a region outward to integer pixels, clipped to the frame."""
    x1 = max(0, math.floor(region.x))
    y1 = max(0, math.floor(region.y))
    x2 = min(int(math.ceil(frame.width)), math.ceil(region.x2))
    y2 = min(int(math.ceil(frame.height)), math.ceil(region.y2))
    return Box.from_corners(float(x1), float(y1), float(x2), float(y2))


def _localize(boxes: Sequence[Box], crop: Box) -> list[Box]:
    # adapters may spill past the crop edge; keep the part inside it
    local_frame = FrameSpec(crop.w, crop.h)
    out = []
    for b in boxes:
        try:
            out.append(clip_box(b, local_frame).translate(crop.x, crop.y))
        except GeometryError:
            log.debug("dropping detection %s outside crop %s", b.coords(), crop.coords())
    return out


def refine_regions(
    regions: Sequence[SubRegion],
    detector: DetectorAdapter,
    frame: FrameSpec,
    cfg: FocuserConfig,
    image: Optional[np.ndarray] = None,
    frame_id: str = "",
    skip_errors: bool = False,
    jobs: int = 1,
    skipped: Optional[list[int]] = None,
) -> list[Box]:
    """Run the detector on each eligible sub-region and map hits to frame coordinates.

    A region is eligible when it merged at least `cfg.min_merge_count`
    boxes and both sides are at least `cfg.min_region_size`. With
    `skip_errors` a failing region is logged and skipped instead of
    raising :class:`RegionError`.
    """
    work: list[tuple[int, Box]] = []
    for idx, region in enumerate(regions):
        if region.merged_count < cfg.min_merge_count:
            continue
        if region.bounds.w < cfg.min_region_size or region.bounds.h < cfg.min_region_size:
            continue
        work.append((idx, crop_bounds(region.bounds, frame)))

    def run(item: tuple[int, Box]) -> list[Box]:
        idx, crop = item
        patch = None
        if image is not None:
            patch = image[int(crop.y) : int(crop.y2), int(crop.x) : int(crop.x2)]
        try:
            local = detector.detect(patch, crop, frame_id=frame_id, region_index=idx)
        except AdapterError as exc:
            err = RegionError(frame_id, idx, crop, exc)
            if not skip_errors:
                raise err from exc
            warnings.warn(str(err), RuntimeWarning, stacklevel=2)
            if skipped is not None:
                skipped.append(idx)
            return []
        return _localize(local, crop)

    if jobs > 1 and getattr(detector, "thread_safe", False) and len(work) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, work))
    else:
        results = [run(item) for item in work]
    return [b for chunk in results for b in chunk]


def fuse_detections(original: Sequence[Box], fine: Sequence[Box], cfg: FocuserConfig) -> list[Box]:
    """Greedy class-agnostic NMS over original + fine, highest score first.

    Equal scores prefer boxes from `original`, then smaller (x, y).
    """
    tagged = []
    for source, boxes in ((0, original), (1, fine)):
        for i, b in enumerate(boxes):
            if b.score is None:
                raise ValueError(f"fusion requires scores; box {b.coords()} has none")
            tagged.append((-b.score, source, b.x, b.y, b.w, b.h, i, b))
    tagged.sort(key=lambda t: t[:7])

    keep: list[Box] = []
    for *_, b in tagged:
        if all(iou(b, k) <= cfg.nms_iou for k in keep):
            keep.append(b)
    return keep


def focus_frame(
    original: Sequence[Box],
    detector: DetectorAdapter,
    cfg: FocuserConfig,
    frame: FrameSpec,
    image: Optional[np.ndarray] = None,
    frame_id: str = "",
    skip_errors: bool = False,
    jobs: int = 1,
) -> FocusResult:
    """Run every stage on one frame, keeping the intermediate sets."""
    for b in original:
        if b.score is None:
            raise ValueError(f"original detection {b.coords()} has no score")
    clipped = [clip_box(b, frame) for b in original]
    extended = [adaptive_resize(b, cfg, frame) for b in clipped]
    regions = dense_region_merge(extended)
    skipped: list[int] = []
    fine = refine_regions(
        regions, detector, frame, cfg,
        image=image, frame_id=frame_id, skip_errors=skip_errors, jobs=jobs, skipped=skipped,
    )
    fused = fuse_detections(clipped, fine, cfg)
    return FocusResult(clipped, extended, regions, fine, fused, skipped)


def run_focuser(
    image: Optional[np.ndarray],
    original: Sequence[Box],
    detector: DetectorAdapter,
    cfg: FocuserConfig,
    frame: FrameSpec,
    frame_id: str = "",
) -> list[Box]:
    return focus_frame(original, detector, cfg, frame, image=image, frame_id=frame_id).fused
