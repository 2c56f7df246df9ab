"""Training objectives: multi-granularity recognition BCE and detection loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from panofocus.geometry import Box
from panofocus.prototyper.autograd import Tensor, as_tensor, bce_with_logits, maximum, minimum

DEFAULT_LAMBDA = 1e-3
DEFAULT_LAMBDA_REG = 5.0


@dataclass
class RecognitionLoss:
    l_i: Tensor
    l_s: Tensor
    l_g: Tensor
    l_d: Tensor

    @property
    def total(self) -> Tensor:
        return self.l_i + self.l_s + self.l_g + self.l_d


@dataclass
class DetectionLoss:
    l_reg: Tensor
    l_obj: Tensor
    l_cls: Tensor
    lambda_reg: float = DEFAULT_LAMBDA_REG

    @property
    def total(self) -> Tensor:
        return self.l_reg * self.lambda_reg + self.l_obj + self.l_cls


@dataclass(frozen=True)
class LossReport:
    l_det: float
    l_reg: float
    l_obj: float
    l_cls: float
    lambda_reg: float
    l_rec: float
    l_i: float
    l_s: float
    l_g: float
    l_d: float
    lam: float
    total: float

    @classmethod
    def from_parts(cls, rec: RecognitionLoss, det: DetectionLoss, lam: float = DEFAULT_LAMBDA) -> "LossReport":
        l_rec = float(rec.total.data)
        l_det = float(det.total.data)
        return cls(
            l_det=l_det, l_reg=float(det.l_reg.data), l_obj=float(det.l_obj.data), l_cls=float(det.l_cls.data),
            lambda_reg=det.lambda_reg,
            l_rec=l_rec, l_i=float(rec.l_i.data), l_s=float(rec.l_s.data), l_g=float(rec.l_g.data),
            l_d=float(rec.l_d.data),
            lam=lam, total=l_rec + lam * l_det,
        )


def _mean_bce(logits, targets, what: str) -> Tensor:
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ValueError(f"{what}: logits {logits.shape} vs labels {targets.shape}")
    if logits.data.size == 0:
        return Tensor(0.0)
    return bce_with_logits(logits, targets).mean()


def same_group_matrix(groups: Sequence[Sequence[int]], q: int) -> np.ndarray:
    """Q x Q indicator of shared group membership (diagonal included)."""
    out = np.zeros((q, q))
    for members in groups:
        idx = np.asarray(list(members), dtype=int)
        out[np.ix_(idx, idx)] = 1.0
    return out


def recognition_loss(
    ind_logits, group_logits, global_logits, affinity_logits,
    ind_labels, group_labels, global_labels, same_group,
) -> RecognitionLoss:
    """Mean binary cross-entropy at the individual, group and global levels,
    plus BCE between the affinity logits and the same-group matrix."""
    return RecognitionLoss(
        l_i=_mean_bce(ind_logits, ind_labels, "individual"),
        l_s=_mean_bce(group_logits, group_labels, "group"),
        l_g=_mean_bce(global_logits, global_labels, "global"),
        l_d=_mean_bce(affinity_logits, same_group, "group detection"),
    )


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax1, ay1, ax2, ay2 = a[:, 0:1], a[:, 1:2], a[:, 0:1] + a[:, 2:3], a[:, 1:2] + a[:, 3:4]
    bx1, by1, bx2, by2 = b[:, 0], b[:, 1], b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    union = (a[:, 2:3] * a[:, 3:4]) + (b[:, 2] * b[:, 3]) - inter
    return inter / union


def greedy_assign(pred: np.ndarray, gt: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one pairs in descending IoU order; only overlapping pairs."""
    if len(pred) == 0 or len(gt) == 0:
        return []
    ious = _iou_matrix(pred, gt)
    cand = [(-ious[i, j], i, j) for i in range(len(pred)) for j in range(len(gt)) if ious[i, j] > 0]
    cand.sort()
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in cand:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j))
    return pairs


def paired_iou(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable row-wise IoU between K predicted and K target boxes (x, y, w, h)."""
    gx1, gy1 = gt[:, 0], gt[:, 1]
    gx2, gy2 = gt[:, 0] + gt[:, 2], gt[:, 1] + gt[:, 3]
    px1, py1, pw, ph = pred[:, 0], pred[:, 1], pred[:, 2], pred[:, 3]
    px2, py2 = px1 + pw, py1 + ph
    iw = maximum(minimum(px2, gx2) - maximum(px1, gx1), 0.0)
    ih = maximum(minimum(py2, gy2) - maximum(py1, gy1), 0.0)
    inter = iw * ih
    return inter / (pw * ph + gt[:, 2] * gt[:, 3] - inter)


def _box_array(boxes) -> np.ndarray:
    if isinstance(boxes, Tensor):
        return boxes.data
    if len(boxes) and isinstance(boxes[0], Box):
        return np.array([b.coords() for b in boxes], dtype=np.float64)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def detection_loss(
    pred_boxes,
    obj_logits,
    cls_logits,
    gt_boxes,
    lambda_reg: float = DEFAULT_LAMBDA_REG,
    pairs: Optional[list[tuple[int, int]]] = None,
) -> DetectionLoss:
    """IoU regression loss, objectness BCE and person-class BCE.

    Predictions are matched one-to-one to ground truth greedily by IoU.
    ``l_reg`` averages 1 - IoU over matched pairs; ``l_obj`` is BCE of every
    objectness logit against matched/unmatched; ``l_cls`` is BCE of the
    person logit over matched predictions. Empty sets give zero terms.
    """
    pred_t = pred_boxes if isinstance(pred_boxes, Tensor) else Tensor(_box_array(pred_boxes))
    gt = _box_array(gt_boxes)
    obj = as_tensor(obj_logits).reshape(-1)
    cls = as_tensor(cls_logits).reshape(-1)
    n = pred_t.shape[0] if pred_t.data.size else 0
    if pairs is None:
        pairs = greedy_assign(pred_t.data.reshape(-1, 4), gt)

    zero = Tensor(0.0)
    if pairs:
        pi = [p for p, _ in pairs]
        gi = [g for _, g in pairs]
        l_reg = (1.0 - paired_iou(pred_t[pi], gt[gi])).mean()
        l_cls = bce_with_logits(cls[pi], np.ones(len(pi))).mean()
    else:
        l_reg, l_cls = zero, zero
    if n:
        target = np.zeros(n)
        target[[p for p, _ in pairs]] = 1.0
        l_obj = bce_with_logits(obj, target).mean()
    else:
        l_obj = zero
    return DetectionLoss(l_reg, l_obj, l_cls, lambda_reg)


def total_loss(l_rec, l_det, lam: float = DEFAULT_LAMBDA):
    """Recognition loss plus `lam` times detection loss."""
    return l_rec + l_det * lam
