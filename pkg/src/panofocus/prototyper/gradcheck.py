"""
Finite-difference verification of the reverse-mode gradients.

The desk-scale problem wires the whole chain together: patch embedding,
three encoding blocks, recognition/affinity/detection heads, recognition
and detection losses, combined into the total objective.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

from panofocus.featurizer import embed_individual
from panofocus.prototyper.autograd import Tensor, parameter
from panofocus.prototyper.losses import (
    DEFAULT_LAMBDA,
    DEFAULT_LAMBDA_REG,
    LossReport,
    detection_loss,
    recognition_loss,
    same_group_matrix,
    total_loss,
)
from panofocus.prototyper.model import (
    PrototyperConfig,
    decode_boxes,
    forward_bipropagate,
    init_params,
    recognition_heads,
)

LossFn = Callable[[Mapping[str, Tensor]], Tensor]
GRADCHECK_TOLERANCE = 1e-4


class NondeterministicLoss(RuntimeError):
    """Raised when two evaluations of the same loss closure disagree."""


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def analytic_gradients(loss_fn: LossFn, params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    leaves = {k: parameter(v) for k, v in params.items()}
    loss = loss_fn(leaves)
    loss.backward()
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}


def _evaluate(loss_fn: LossFn, params: Mapping[str, np.ndarray]):
    return loss_fn({k: Tensor(v) for k, v in params.items()}).data[()]


def numeric_gradient(
    loss_fn: LossFn,
    params: Mapping[str, np.ndarray],
    name: str,
    epsilon: float,
    extended: bool = True,
) -> np.ndarray:
    """Central differences, one entry at a time.

    With `extended` the perturbed evaluations run in long double, which
    keeps cancellation error well below the gradients being checked.
    """
    dtype = np.longdouble if extended else np.float64
    work = {k: np.array(v, dtype=dtype) for k, v in params.items()}
    target = work[name]
    grad = np.zeros_like(target)
    for idx in np.ndindex(target.shape):
        orig = target[idx]
        target[idx] = orig + epsilon
        up = _evaluate(loss_fn, work)
        target[idx] = orig - epsilon
        down = _evaluate(loss_fn, work)
        target[idx] = orig
        grad[idx] = (up - down) / (2 * dtype(epsilon))
    return grad.astype(np.float64)


def _check_inputs(loss_fn: LossFn, params: Mapping[str, np.ndarray], epsilon: float) -> None:
    if not 1e-7 <= epsilon <= 1e-3:
        warnings.warn(f"epsilon {epsilon:g} is outside [1e-7, 1e-3]; expect inaccurate differences",
                      RuntimeWarning, stacklevel=3)
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"weight {k!r} contains non-finite values")
    if float(_evaluate(loss_fn, params)) != float(_evaluate(loss_fn, params)):
        raise NondeterministicLoss("two evaluations of the loss closure disagree")


def gradient_check(loss_fn: LossFn, params: Mapping[str, np.ndarray], name: str, epsilon: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients
    of `loss_fn` with respect to ``params[name]``."""
    _check_inputs(loss_fn, params, epsilon)
    g_a = analytic_gradients(loss_fn, params)[name]
    g_n = numeric_gradient(loss_fn, params, name, epsilon)
    return float(relative_error(g_a, g_n).max()) if g_a.size else 0.0


def gradient_check_all(
    loss_fn: LossFn,
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    names: Optional[Iterable[str]] = None,
) -> dict[str, float]:
    _check_inputs(loss_fn, params, epsilon)
    grads = analytic_gradients(loss_fn, params)
    out = {}
    for name in names if names is not None else params:
        g_n = numeric_gradient(loss_fn, params, name, epsilon)
        out[name] = float(relative_error(grads[name], g_n).max()) if g_n.size else 0.0
    return out


@dataclass
class DeskProblem:
    cfg: PrototyperConfig
    params: dict[str, np.ndarray]
    patches: list[np.ndarray]
    groups: list[list[int]]
    anchors: np.ndarray
    gt_boxes: np.ndarray
    ind_labels: np.ndarray
    group_labels: np.ndarray
    global_labels: np.ndarray
    gumbel_seed: Optional[int]
    lam: float = DEFAULT_LAMBDA
    lambda_reg: float = DEFAULT_LAMBDA_REG

    def losses(self, params: Mapping[str, object]):
        rng = None if self.gumbel_seed is None else np.random.default_rng(self.gumbel_seed)
        hier = forward_bipropagate(self.patches, self.groups, params, self.cfg, gumbel=rng)
        heads = recognition_heads(hier, params)
        rec = recognition_loss(
            heads.ind, heads.group, heads.glo, heads.affinity,
            self.ind_labels, self.group_labels, self.global_labels,
            same_group_matrix(self.groups, len(self.patches)),
        )
        det_out = heads.detection
        boxes = decode_boxes(self.anchors, det_out[:, 0:4])
        det = detection_loss(boxes, det_out[:, 4], det_out[:, 5], self.gt_boxes, self.lambda_reg)
        return rec, det

    def loss(self, params: Mapping[str, object]) -> Tensor:
        rec, det = self.losses(params)
        return total_loss(rec.total, det.total, self.lam)

    def report(self) -> LossReport:
        rec, det = self.losses(self.params)
        return LossReport.from_parts(rec, det, self.lam)


def build_desk_problem(
    seed: int = 0,
    d: int = 8,
    q: int = 3,
    groups: Optional[list[list[int]]] = None,
    heads: int = 4,
    prototypes: int = 4,
    patch_size: int = 8,
    gumbel: bool = True,
    init_std: float = 0.02,
) -> DeskProblem:
    """A small random instance: `q` individuals split into groups, random labels,
    anchors with jittered ground-truth boxes."""
    rng = np.random.default_rng(seed)
    if groups is None:
        groups = [list(range(0, max(1, q - 1))), list(range(max(1, q - 1), q))] if q > 1 else [[0]]
        groups = [g for g in groups if g]
    cfg = PrototyperConfig(d=d, heads=heads, prototypes=prototypes, m_max=16, init_std=init_std)
    patches = []
    for i in range(q):
        crop = rng.uniform(0.0, 1.0, size=(2 * patch_size, 3 * patch_size, 3))
        patches.append(embed_individual(crop, patch_size, d, seed=seed + 1000, index=i).tokens)
    anchors = np.column_stack([
        rng.uniform(0, 200, q), rng.uniform(0, 100, q), rng.uniform(20, 60, q), rng.uniform(40, 120, q),
    ])
    gt = anchors.copy()
    gt[:, 0:2] += rng.uniform(-0.2, 0.2, (q, 2)) * anchors[:, 2:4]
    gt[:, 2:4] *= rng.uniform(0.8, 1.25, (q, 2))
    return DeskProblem(
        cfg=cfg,
        params=init_params(cfg, seed),
        patches=patches,
        groups=groups,
        anchors=anchors,
        gt_boxes=gt,
        ind_labels=(rng.uniform(size=(q, cfg.n_ind)) < 0.2).astype(float),
        group_labels=(rng.uniform(size=(len(groups), cfg.n_group)) < 0.3).astype(float),
        global_labels=(rng.uniform(size=(1, cfg.n_global)) < 0.4).astype(float),
        gumbel_seed=seed + 7 if gumbel else None,
    )
