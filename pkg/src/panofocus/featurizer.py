"""
Prototyper inputs without a learned backbone.

Individuals are turned into patch tokens by a fixed, seeded Gaussian
projection (a stand-in for a pretrained video encoder), and groups are
proposed by single-linkage clustering of box centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from panofocus.geometry import Box, FrameSpec, union_box

DEFAULT_GROUP_DISTANCE = 100.0


@dataclass(frozen=True)
class PatchEmbedding:
    tokens: np.ndarray
    patch_size: int
    individual_index: int

    @property
    def num_patches(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class GroupProposal:
    member_indices: tuple[int, ...]
    bounds: Box


def _resize_nearest(img: np.ndarray, height: int, width: int) -> np.ndarray:
    rows = np.minimum((np.arange(height) + 0.5) * img.shape[0] / height, img.shape[0] - 1).astype(int)
    cols = np.minimum((np.arange(width) + 0.5) * img.shape[1] / width, img.shape[1] - 1).astype(int)
    return img[rows][:, cols]


def projection_matrix(in_dim: int, d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((in_dim, d)) / math.sqrt(in_dim)


def embed_individual(crop: np.ndarray, patch_size: int, d: int, seed: int, index: int = 0) -> PatchEmbedding:
    """Split a crop into P x P patches and project each flattened patch to `d` dims.

    The crop is resampled (nearest neighbour) up to the next multiple of
    `patch_size` on each side, so a H x W crop yields
    ceil(H/P) * ceil(W/P) tokens. uint8 crops are scaled to [0, 1].
    """
    if patch_size < 1 or d < 1:
        raise ValueError(f"patch_size and d must be >= 1, got {patch_size}, {d}")
    arr = np.asarray(crop)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0 or arr.shape[2] == 0:
        raise ValueError(f"degenerate crop of shape {np.shape(crop)}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("crop contains non-finite values")

    P = patch_size
    gh, gw = math.ceil(arr.shape[0] / P), math.ceil(arr.shape[1] / P)
    if (gh * P, gw * P) != arr.shape[:2]:
        arr = _resize_nearest(arr, gh * P, gw * P)
    C = arr.shape[2]
    patches = arr.reshape(gh, P, gw, P, C).transpose(0, 2, 1, 3, 4).reshape(gh * gw, P * P * C)
    tokens = patches @ projection_matrix(P * P * C, d, seed)
    return PatchEmbedding(tokens=tokens, patch_size=P, individual_index=index)


def crop_individual(image: np.ndarray, box: Box) -> np.ndarray:
    """Integer crop of `box` from `image`, rounded outward and clipped."""
    frame = FrameSpec(image.shape[1], image.shape[0])
    x1 = max(0, math.floor(box.x))
    y1 = max(0, math.floor(box.y))
    x2 = min(int(frame.width), math.ceil(box.x2))
    y2 = min(int(frame.height), math.ceil(box.y2))
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"box {box.coords()} does not intersect the image")
    return image[y1:y2, x1:x2]


def propose_groups(individuals: Sequence[Box], distance_threshold: float = DEFAULT_GROUP_DISTANCE) -> list[GroupProposal]:
    """Single-linkage clustering on box centers.

    Two individuals are linked when their centers are closer than
    `distance_threshold`; groups are the connected components, ordered by
    their smallest member index.
    """
    if not individuals:
        return []
    centers = np.array([b.center for b in individuals], dtype=float)
    diff = centers[:, None, :] - centers[None, :, :]
    adjacency = np.sqrt((diff**2).sum(-1)) < distance_threshold
    _, labels = connected_components(adjacency, directed=False)

    members: dict[int, list[int]] = {}
    for idx, lab in enumerate(labels):
        members.setdefault(int(lab), []).append(idx)
    groups = []
    for idxs in sorted(members.values(), key=min):
        bounds = individuals[idxs[0]]
        for k in idxs[1:]:
            bounds = union_box(bounds, individuals[k])
        groups.append(GroupProposal(tuple(idxs), Box(bounds.x, bounds.y, bounds.w, bounds.h)))
    return groups
