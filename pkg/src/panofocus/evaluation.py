"""
Multi-granularity activity evaluation
=====================================

Individuals are matched to ground truth by box IoU, groups by member-set
IoU, and each matched entity is scored by overlap of its label sets:

    P contribution = |pred & gt| / |pred|
    R contribution = |pred & gt| / |gt|

Per frame, P sums contributions over all predictions and R over all ground
truth entities. Frames are averaged uniformly; F1 of the averaged P and R
is reported per level, and the overall score is the mean of the three F1.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from panofocus.geometry import Box, iou

DEFAULT_IOU = 0.3
DEFAULT_MEMBER_IOU = 0.3
AVERAGING = "per-frame P/R, uniform mean over frames, F1 of the mean P and R"


@dataclass(frozen=True)
class Individual:
    box: Box
    identity: str
    actions: frozenset[int]


@dataclass(frozen=True)
class Group:
    members: tuple
    activities: frozenset[int]


@dataclass(frozen=True)
class FrameAnnotation:
    frame_id: str
    individuals: tuple[Individual, ...]
    groups: tuple[Group, ...]
    global_labels: frozenset[int]
    image_path: Optional[str] = None

    def __post_init__(self):
        ids = [ind.identity for ind in self.individuals]
        if len(set(ids)) != len(ids):
            raise ValueError(f"frame {self.frame_id}: duplicate individual identities")
        known, seen = set(ids), set()
        for g in self.groups:
            for m in g.members:
                if m not in known:
                    raise ValueError(f"frame {self.frame_id}: group member {m!r} is not an annotated individual")
                if m in seen:
                    raise ValueError(f"frame {self.frame_id}: individual {m!r} appears in two groups")
                seen.add(m)


@dataclass(frozen=True)
class PredictedIndividual:
    box: Box
    score: float
    actions: frozenset[int]


@dataclass(frozen=True)
class FramePrediction:
    frame_id: str
    individuals: tuple[PredictedIndividual, ...]
    groups: tuple[Group, ...]  # members are indices into `individuals`
    global_labels: frozenset[int]

    def __post_init__(self):
        n = len(self.individuals)
        for g in self.groups:
            for m in g.members:
                if not (isinstance(m, int) and 0 <= m < n):
                    raise ValueError(f"frame {self.frame_id}: group member index {m!r} out of range")


@dataclass(frozen=True)
class PRF:
    p: float
    r: float
    f: float

    @classmethod
    def from_pr(cls, p: float, r: float) -> "PRF":
        return cls(p, r, f1(p, r))


@dataclass
class FrameScore:
    frame_id: str
    individual: Optional[PRF]
    group: Optional[PRF]
    global_: PRF


@dataclass
class EvalReport:
    individual: PRF
    group: PRF
    global_: PRF
    frames: list[FrameScore] = field(default_factory=list)

    @property
    def f_a(self) -> float:
        return overall(self.individual.f, self.group.f, self.global_.f)

    def to_dict(self) -> dict:
        def prf(x: Optional[PRF]):
            return None if x is None else asdict(x)

        return {
            "p_i": self.individual.p, "r_i": self.individual.r, "f_i": self.individual.f,
            "p_p": self.group.p, "r_p": self.group.r, "f_p": self.group.f,
            "p_g": self.global_.p, "r_g": self.global_.r, "f_g": self.global_.f,
            "f_a": self.f_a,
            "averaging": AVERAGING,
            "frames": [
                {"frame_id": fs.frame_id, "individual": prf(fs.individual), "group": prf(fs.group),
                 "global": prf(fs.global_)}
                for fs in self.frames
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_text(self) -> str:
        rows = [("individual", self.individual), ("group", self.group), ("global", self.global_)]
        lines = [f"{'level':<11} {'P':>7} {'R':>7} {'F':>7}"]
        for name, s in rows:
            lines.append(f"{name:<11} {100 * s.p:7.2f} {100 * s.r:7.2f} {100 * s.f:7.2f}")
        lines.append(f"{'overall':<11} {'':>7} {'':>7} {100 * self.f_a:7.2f}")
        lines.append(f"({len(self.frames)} frames; {AVERAGING})")
        return "\n".join(lines)


def f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def overall(f_i: float, f_p: float, f_g: float) -> float:
    return (f_i + f_p + f_g) / 3.0


def label_overlap(pred: frozenset, gt: frozenset) -> tuple[float, float]:
    """Precision and recall contributions of one matched pair."""
    hit = len(pred & gt)
    return (hit / len(pred) if pred else 0.0, hit / len(gt) if gt else 0.0)


def _greedy(candidates: list[tuple], threshold: float) -> list[tuple[int, int]]:
    # candidates: (sort key..., pred index, gt index), first element is the -similarity
    used_p, used_g, pairs = set(), set(), []
    for cand in sorted(candidates):
        sim, i, j = -cand[0], cand[-2], cand[-1]
        if sim <= threshold or i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j))
    return pairs


def match_individuals(
    pred: Sequence[Box],
    gt: Sequence[Box],
    iou_thresh: float = DEFAULT_IOU,
    scores: Optional[Sequence[float]] = None,
) -> list[tuple[int, int]]:
    """Greedy one-to-one matching by descending IoU; IoU must exceed `iou_thresh`.

    Ties prefer the higher-scored prediction, then lexicographic box order.
    """
    if scores is None:
        scores = [b.score if b.score is not None else 0.0 for b in pred]
    cand = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            v = iou(p, g)
            if v > iou_thresh:
                cand.append((-v, -scores[i], p.coords(), g.coords(), i, j))
    return _greedy(cand, iou_thresh)


def _score_pairs(
    pred_labels: Sequence[frozenset], gt_labels: Sequence[frozenset], pairs: Sequence[tuple[int, int]]
) -> Optional[PRF]:
    if not pred_labels and not gt_labels:
        return None
    p_sum = r_sum = 0.0
    for i, j in pairs:
        pc, rc = label_overlap(pred_labels[i], gt_labels[j])
        p_sum += pc
        r_sum += rc
    p = p_sum / len(pred_labels) if pred_labels else 0.0
    r = r_sum / len(gt_labels) if gt_labels else 0.0
    return PRF.from_pr(p, r)


def score_individual(pred: FramePrediction, gt: FrameAnnotation, matching: Sequence[tuple[int, int]]) -> Optional[PRF]:
    """Returns None when the frame has neither predicted nor annotated individuals."""
    return _score_pairs(
        [p.actions for p in pred.individuals], [g.actions for g in gt.individuals], matching
    )


def member_iou(pred_members: set, gt_members: set) -> float:
    union = len(pred_members) + len(gt_members) - len(pred_members & gt_members)
    return len(pred_members & gt_members) / union if union else 0.0


def match_groups(
    pred: FramePrediction,
    gt: FrameAnnotation,
    individual_matching: Sequence[tuple[int, int]],
    member_iou_thresh: float = DEFAULT_MEMBER_IOU,
) -> list[tuple[int, int]]:
    """Greedy one-to-one group matching by member-set IoU.

    Predicted members are translated to ground-truth identities through the
    individual matching. Unmatched predicted members stay distinct, so they
    only enlarge the union.
    """
    to_identity = {i: gt.individuals[j].identity for i, j in individual_matching}
    cand = []
    for a, pg in enumerate(pred.groups):
        mapped = {to_identity.get(m, ("unmatched", m)) for m in pg.members}
        for b, gg in enumerate(gt.groups):
            v = member_iou(mapped, set(gg.members))
            if v > member_iou_thresh:
                cand.append((-v, a, b))
    return _greedy(cand, member_iou_thresh)


def score_group(pred: FramePrediction, gt: FrameAnnotation, matching: Sequence[tuple[int, int]]) -> Optional[PRF]:
    return _score_pairs([g.activities for g in pred.groups], [g.activities for g in gt.groups], matching)


def score_global(pred: frozenset, gt: frozenset) -> PRF:
    p, r = label_overlap(frozenset(pred), frozenset(gt))
    return PRF.from_pr(p, r)


def evaluate_frame(
    pred: FramePrediction,
    gt: FrameAnnotation,
    iou_thresh: float = DEFAULT_IOU,
    member_iou_thresh: float = DEFAULT_MEMBER_IOU,
) -> FrameScore:
    ind_match = match_individuals(
        [p.box for p in pred.individuals], [g.box for g in gt.individuals], iou_thresh,
        scores=[p.score for p in pred.individuals],
    )
    grp_match = match_groups(pred, gt, ind_match, member_iou_thresh)
    return FrameScore(
        frame_id=gt.frame_id,
        individual=score_individual(pred, gt, ind_match),
        group=score_group(pred, gt, grp_match),
        global_=score_global(pred.global_labels, gt.global_labels),
    )


def _mean_prf(scores: Sequence[Optional[PRF]]) -> PRF:
    present = [s for s in scores if s is not None]
    if not present:
        return PRF(0.0, 0.0, 0.0)
    p = sum(s.p for s in present) / len(present)
    r = sum(s.r for s in present) / len(present)
    return PRF.from_pr(p, r)


def empty_prediction(frame_id: str) -> FramePrediction:
    return FramePrediction(frame_id, (), (), frozenset())


def evaluate(
    preds: dict[str, FramePrediction],
    gts: dict[str, FrameAnnotation],
    iou_thresh: float = DEFAULT_IOU,
    member_iou_thresh: float = DEFAULT_MEMBER_IOU,
) -> EvalReport:
    """Score every annotated frame; frames without a prediction count as empty.

    Predictions for frames absent from the ground truth are ignored. A level
    with no entities on either side of a frame is left out of that level's
    average.
    """
    frames = [
        evaluate_frame(preds.get(fid, empty_prediction(fid)), gt, iou_thresh, member_iou_thresh)
        for fid, gt in gts.items()
    ]
    return EvalReport(
        individual=_mean_prf([f.individual for f in frames]),
        group=_mean_prf([f.group for f in frames]),
        global_=_mean_prf([f.global_ for f in frames]),
        frames=frames,
    )


def exhaustive_matching(pred: Sequence[Box], gt: Sequence[Box], iou_thresh: float = DEFAULT_IOU) -> list[tuple[int, int]]:
    """Reference matcher: the one-to-one matching with maximal total IoU among
    pairs above the threshold. Exponential; meant for tiny instances only."""
    n, m = len(pred), len(gt)
    sims = [[iou(p, g) for g in gt] for p in pred]
    best, best_pairs = -1.0, []
    k = min(n, m)
    for size in range(k + 1):
        for ps in itertools.combinations(range(n), size):
            for gs in itertools.permutations(range(m), size):
                if any(sims[i][j] <= iou_thresh for i, j in zip(ps, gs)):
                    continue
                total = sum(sims[i][j] for i, j in zip(ps, gs))
                if total > best + 1e-12:
                    best, best_pairs = total, list(zip(ps, gs))
    return best_pairs
