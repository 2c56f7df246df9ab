"""Per-frame orchestration shared by the command-line entry points."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, TypeVar

import numpy as np

from panofocus.evaluation import FrameAnnotation, FramePrediction, Group, PredictedIndividual
from panofocus.featurizer import crop_individual, embed_individual, propose_groups
from panofocus.geometry import Box
from panofocus.io.config import RunConfig
from panofocus.prototyper.autograd import sigmoid
from panofocus.prototyper.model import Hierarchy, forward_bipropagate, recognition_heads

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(fn: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> list[R]:
    """Map `fn` over `items` with up to `jobs` threads; results keep input order."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _fit_crop(crop: np.ndarray, patch: int, max_tokens: int) -> np.ndarray:
    h, w = crop.shape[:2]
    if math.ceil(h / patch) * math.ceil(w / patch) <= max_tokens:
        return crop
    scale = math.sqrt(max_tokens / (math.ceil(h / patch) * math.ceil(w / patch)))
    while True:
        nh, nw = max(1, int(h * scale)), max(1, int(w * scale))
        if math.ceil(nh / patch) * math.ceil(nw / patch) <= max_tokens:
            break
        scale *= 0.95
    rows = (np.arange(nh) * h / nh).astype(int)
    cols = (np.arange(nw) * w / nw).astype(int)
    return crop[rows][:, cols]


def individual_tokens(image: np.ndarray, boxes: Sequence[Box], cfg: RunConfig) -> list[np.ndarray]:
    p = cfg.prototyper
    out = []
    for k, b in enumerate(boxes):
        crop = _fit_crop(crop_individual(image, b), cfg.patch_size, p.m_max)
        out.append(embed_individual(crop, cfg.patch_size, p.d, seed=cfg.weight_seed, index=k).tokens)
    return out


def complete_partition(groups: Iterable[Sequence[int]], q: int) -> list[list[int]]:
    """Add a singleton group for every individual no group claims."""
    groups = [list(g) for g in groups]
    covered = {m for g in groups for m in g}
    return groups + [[i] for i in range(q) if i not in covered]


def annotation_inputs(fa: FrameAnnotation) -> tuple[list[Box], list[list[int]]]:
    index = {ind.identity: k for k, ind in enumerate(fa.individuals)}
    boxes = [ind.box.with_score(1.0) for ind in fa.individuals]
    groups = [[index[m] for m in g.members] for g in fa.groups]
    return boxes, complete_partition(groups, len(boxes))


def detection_inputs(boxes: Sequence[Box], cfg: RunConfig) -> list[list[int]]:
    return [list(g.member_indices) for g in propose_groups(list(boxes), cfg.group_distance)]


@dataclass
class ForwardResult:
    frame_id: str
    hierarchy: Hierarchy
    prediction: FramePrediction


def forward_frame(
    frame_id: str,
    image: np.ndarray,
    boxes: Sequence[Box],
    groups: Sequence[Sequence[int]],
    params,
    cfg: RunConfig,
    gumbel: Optional[np.random.Generator] = None,
) -> ForwardResult:
    """Encode one frame and threshold the sigmoid outputs into label sets."""
    tokens = individual_tokens(image, boxes, cfg)
    hier = forward_bipropagate(tokens, groups, params, cfg.prototyper, gumbel=gumbel)
    heads = recognition_heads(hier, params)
    thr = cfg.decision_threshold

    def labels(row: np.ndarray) -> frozenset[int]:
        return frozenset(int(i) for i in np.flatnonzero(sigmoid(row) > thr))

    individuals = tuple(
        PredictedIndividual(Box(b.x, b.y, b.w, b.h), b.score if b.score is not None else 1.0, labels(row))
        for b, row in zip(boxes, heads.ind.data)
    )
    pred_groups = tuple(Group(tuple(g), labels(row)) for g, row in zip(groups, heads.group.data))
    pred = FramePrediction(frame_id, individuals, pred_groups, labels(heads.glo.data[0]))
    return ForwardResult(frame_id, hier, pred)
