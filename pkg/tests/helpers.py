"""Random synthetic annotations shared by the evaluation and acceptance tests."""

import numpy as np

from panofocus.evaluation import (
    FrameAnnotation,
    FramePrediction,
    Group,
    Individual,
    PredictedIndividual,
)
from panofocus.geometry import Box


def label_set(rng, n_classes, max_size=3):
    k = int(rng.integers(1, max_size + 1))
    return frozenset(int(c) for c in rng.choice(n_classes, size=k, replace=False))


def random_annotation(rng, frame_id="f", max_people=8):
    q = int(rng.integers(1, max_people + 1))
    individuals = []
    for k in range(q):
        box = Box(float(rng.uniform(0, 3600)), float(rng.uniform(0, 400)),
                  float(rng.uniform(10, 120)), float(rng.uniform(20, 200)))
        individuals.append(Individual(box, f"p{k}", label_set(rng, 27)))
    ids = [ind.identity for ind in individuals]
    rng.shuffle(ids)
    groups, start = [], 0
    while start < len(ids):
        size = int(rng.integers(1, 4))
        members = tuple(ids[start : start + size])
        start += size
        if rng.random() < 0.85:
            groups.append(Group(members, label_set(rng, 11)))
    return FrameAnnotation(frame_id, tuple(individuals), tuple(groups), label_set(rng, 7))


def prediction_from(ann):
    index = {ind.identity: k for k, ind in enumerate(ann.individuals)}
    return FramePrediction(
        ann.frame_id,
        tuple(PredictedIndividual(ind.box, 1.0, ind.actions) for ind in ann.individuals),
        tuple(Group(tuple(index[m] for m in g.members), g.activities) for g in ann.groups),
        ann.global_labels,
    )


def random_boxes(rng, n, extent=60.0):
    return [Box(float(rng.uniform(0, extent)), float(rng.uniform(0, extent)),
                float(rng.uniform(8, 30)), float(rng.uniform(8, 30)), float(rng.uniform(0.05, 1.0)))
            for _ in range(n)]


def boxes_f_score(pred, gt, pairs, pred_labels, gt_labels):
    """Individual-level F1 of one frame given a matching."""
    from panofocus.evaluation import f1, label_overlap

    p = sum(label_overlap(pred_labels[i], gt_labels[j])[0] for i, j in pairs) / len(pred) if pred else 0.0
    r = sum(label_overlap(pred_labels[i], gt_labels[j])[1] for i, j in pairs) / len(gt) if gt else 0.0
    return f1(p, r)
