"""
On-disk formats
===============

detections.jsonl   {"frame_id": str, "boxes": [{"x","y","w","h","score"}]} per line
annotations.json   {"frames": [{"frame_id", "image_path", "individuals": [{"id", "box", "actions"}],
                                "groups": [{"members", "activities"}], "global"}]}
predictions.jsonl  {"frame_id", "individuals": [{"box", "score", "actions"}],
                    "groups": [{"members", "activities"}], "global"} per line
weights.json       {name: {"shape": [r, c], "data": [row-major reals]}}
features.jsonl     {"frame_id", "f_ind", "f_gro", "f_glo"} per line

Loaders reject unknown fields, NaN/infinite numbers and out-of-range
labels. Writers emit a canonical form: compact separators, fixed key
order, one record per line, so that write(load(x)) == x for canonical x.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from panofocus.evaluation import FrameAnnotation, FramePrediction, Group, Individual, PredictedIndividual
from panofocus.geometry import Box, GeometryError

PathLike = str | os.PathLike
DEFAULT_CLASS_COUNTS = (27, 11, 7)


class FormatError(ValueError):
    """A file failed to parse or validate. The message names the location."""


def _reject_constant(name: str):
    raise ValueError(f"non-finite number {name} is not allowed")


def _loads(text: str, where: str) -> Any:
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except ValueError as exc:
        raise FormatError(f"{where}: malformed JSON: {exc}") from exc


def _dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _expect_keys(obj: Any, required: Iterable[str], optional: Iterable[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected an object, got {type(obj).__name__}")
    required, optional = set(required), set(optional)
    unknown = set(obj) - required - optional
    if unknown:
        raise FormatError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise FormatError(f"{where}: missing field(s) {sorted(missing)}")


def _number(obj: Mapping, key: str, where: str) -> float:
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise FormatError(f"{where}: field {key!r} must be a number")
    v = float(v)
    if not math.isfinite(v):
        raise FormatError(f"{where}: field {key!r} must be finite")
    return v


def _box(obj: Any, where: str, score_field: bool) -> Box:
    keys = ("x", "y", "w", "h")
    _expect_keys(obj, keys, ("score",) if score_field else (), where)
    vals = [_number(obj, k, where) for k in keys]
    for k, v in zip("wh", vals[2:]):
        if v <= 0:
            raise FormatError(f"{where}: field {k!r} must be positive, got {v}")
    score = None
    if score_field and obj.get("score") is not None:
        score = _number(obj, "score", where)
        if not 0.0 <= score <= 1.0:
            raise FormatError(f"{where}: field 'score' must lie in [0, 1], got {score}")
    try:
        return Box(*vals, score)
    except GeometryError as exc:
        raise FormatError(f"{where}: {exc}") from exc


def _labels(raw: Any, n_classes: int, where: str, field_name: str) -> frozenset[int]:
    if not isinstance(raw, list):
        raise FormatError(f"{where}: field {field_name!r} must be a list of class indices")
    out = set()
    for v in raw:
        if isinstance(v, bool) or not isinstance(v, int):
            raise FormatError(f"{where}: field {field_name!r} holds non-integer {v!r}")
        if not 0 <= v < n_classes:
            raise FormatError(f"{where}: field {field_name!r} label {v} outside [0, {n_classes})")
        out.add(v)
    return frozenset(out)


def _box_dict(b: Box, with_score: bool) -> dict:
    d = {"x": b.x, "y": b.y, "w": b.w, "h": b.h}
    if with_score:
        d["score"] = b.score
    return d


def _jsonl_records(path: PathLike):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.strip():
            where = f"{path}:{lineno}"
            yield where, _loads(line, where)


# detections -----------------------------------------------------------------


def load_detections(path: PathLike) -> dict[str, list[Box]]:
    out: dict[str, list[Box]] = {}
    for where, rec in _jsonl_records(path):
        _expect_keys(rec, ("frame_id", "boxes"), (), where)
        fid = rec["frame_id"]
        if not isinstance(fid, str):
            raise FormatError(f"{where}: field 'frame_id' must be a string")
        if fid in out:
            raise FormatError(f"{where}: duplicate frame_id {fid!r}")
        if not isinstance(rec["boxes"], list):
            raise FormatError(f"{where}: field 'boxes' must be a list")
        out[fid] = [_box(b, f"{where} boxes[{k}]", True) for k, b in enumerate(rec["boxes"])]
    return out


def dumps_detections(frames: Mapping[str, Sequence[Box]]) -> str:
    lines = [
        _dumps({"frame_id": fid, "boxes": [_box_dict(b, True) for b in boxes]})
        for fid, boxes in frames.items()
    ]
    return "".join(line + "\n" for line in lines)


def save_detections(path: PathLike, frames: Mapping[str, Sequence[Box]]) -> None:
    Path(path).write_text(dumps_detections(frames))


# annotations ------------------------------------------------------------------


def parse_annotations(doc: Any, where: str, class_counts: Sequence[int] = DEFAULT_CLASS_COUNTS) -> dict[str, FrameAnnotation]:
    n_ind, n_grp, n_glo = class_counts
    _expect_keys(doc, ("frames",), (), where)
    if not isinstance(doc["frames"], list):
        raise FormatError(f"{where}: field 'frames' must be a list")
    out: dict[str, FrameAnnotation] = {}
    for fi, fr in enumerate(doc["frames"]):
        fw = f"{where} frames[{fi}]"
        _expect_keys(fr, ("frame_id", "individuals", "groups", "global"), ("image_path",), fw)
        fid = fr["frame_id"]
        if not isinstance(fid, str):
            raise FormatError(f"{fw}: field 'frame_id' must be a string")
        if fid in out:
            raise FormatError(f"{fw}: duplicate frame_id {fid!r}")
        image_path = fr.get("image_path")
        if image_path is not None and not isinstance(image_path, str):
            raise FormatError(f"{fw}: field 'image_path' must be a string")

        inds = []
        for k, ind in enumerate(fr["individuals"]):
            iw = f"{fw} individuals[{k}]"
            _expect_keys(ind, ("id", "box", "actions"), (), iw)
            if isinstance(ind["id"], bool) or not isinstance(ind["id"], (str, int)):
                raise FormatError(f"{iw}: field 'id' must be a string or integer")
            inds.append(Individual(_box(ind["box"], iw + " box", False), str(ind["id"]),
                                   _labels(ind["actions"], n_ind, iw, "actions")))
        ids = [i.identity for i in inds]
        dup = sorted({i for i in ids if ids.count(i) > 1})
        if dup:
            raise FormatError(f"{fw}: duplicate individual id(s) {dup}")

        groups = []
        seen: set[str] = set()
        for k, g in enumerate(fr["groups"]):
            gw = f"{fw} groups[{k}]"
            _expect_keys(g, ("members", "activities"), (), gw)
            if not isinstance(g["members"], list) or not g["members"]:
                raise FormatError(f"{gw}: field 'members' must be a non-empty list")
            members = tuple(str(m) for m in g["members"])
            for m in members:
                if m not in ids:
                    raise FormatError(f"{gw}: member {m!r} is not an individual of this frame")
                if m in seen:
                    raise FormatError(f"{gw}: member {m!r} already belongs to another group")
                seen.add(m)
            groups.append(Group(members, _labels(g["activities"], n_grp, gw, "activities")))
        out[fid] = FrameAnnotation(
            fid, tuple(inds), tuple(groups), _labels(fr["global"], n_glo, fw, "global"), image_path
        )
    return out


def load_annotations(path: PathLike, class_counts: Sequence[int] = DEFAULT_CLASS_COUNTS) -> dict[str, FrameAnnotation]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return parse_annotations(_loads(text, str(path)), str(path), class_counts)


def annotations_to_dict(frames: Mapping[str, FrameAnnotation]) -> dict:
    out = []
    for fa in frames.values():
        out.append({
            "frame_id": fa.frame_id,
            "image_path": fa.image_path,
            "individuals": [
                {"id": i.identity, "box": _box_dict(i.box, False), "actions": sorted(i.actions)}
                for i in fa.individuals
            ],
            "groups": [{"members": list(g.members), "activities": sorted(g.activities)} for g in fa.groups],
            "global": sorted(fa.global_labels),
        })
    return {"frames": out}


def save_annotations(path: PathLike, frames: Mapping[str, FrameAnnotation]) -> None:
    Path(path).write_text(json.dumps(annotations_to_dict(frames), indent=1, allow_nan=False) + "\n")


# predictions -----------------------------------------------------------------


def parse_prediction(rec: Any, where: str, class_counts: Sequence[int] = DEFAULT_CLASS_COUNTS) -> FramePrediction:
    n_ind, n_grp, n_glo = class_counts
    _expect_keys(rec, ("frame_id", "individuals", "groups", "global"), (), where)
    fid = rec["frame_id"]
    if not isinstance(fid, str):
        raise FormatError(f"{where}: field 'frame_id' must be a string")
    inds = []
    for k, ind in enumerate(rec["individuals"]):
        iw = f"{where} individuals[{k}]"
        _expect_keys(ind, ("box", "score", "actions"), (), iw)
        score = _number(ind, "score", iw)
        if not 0.0 <= score <= 1.0:
            raise FormatError(f"{iw}: field 'score' must lie in [0, 1], got {score}")
        inds.append(PredictedIndividual(_box(ind["box"], iw + " box", False), score,
                                        _labels(ind["actions"], n_ind, iw, "actions")))
    groups = []
    for k, g in enumerate(rec["groups"]):
        gw = f"{where} groups[{k}]"
        _expect_keys(g, ("members", "activities"), (), gw)
        members = g["members"]
        if not isinstance(members, list) or not members or any(
            isinstance(m, bool) or not isinstance(m, int) or not 0 <= m < len(inds) for m in members
        ):
            raise FormatError(f"{gw}: field 'members' must list valid individual indices")
        groups.append(Group(tuple(members), _labels(g["activities"], n_grp, gw, "activities")))
    return FramePrediction(fid, tuple(inds), tuple(groups), _labels(rec["global"], n_glo, where, "global"))


def load_predictions(path: PathLike, class_counts: Sequence[int] = DEFAULT_CLASS_COUNTS) -> dict[str, FramePrediction]:
    out: dict[str, FramePrediction] = {}
    for where, rec in _jsonl_records(path):
        fp = parse_prediction(rec, where, class_counts)
        if fp.frame_id in out:
            raise FormatError(f"{where}: duplicate frame_id {fp.frame_id!r}")
        out[fp.frame_id] = fp
    return out


def prediction_to_dict(fp: FramePrediction) -> dict:
    return {
        "frame_id": fp.frame_id,
        "individuals": [
            {"box": _box_dict(i.box, False), "score": i.score, "actions": sorted(i.actions)}
            for i in fp.individuals
        ],
        "groups": [{"members": list(g.members), "activities": sorted(g.activities)} for g in fp.groups],
        "global": sorted(fp.global_labels),
    }


def dumps_predictions(preds: Iterable[FramePrediction]) -> str:
    return "".join(_dumps(prediction_to_dict(fp)) + "\n" for fp in preds)


def save_predictions(path: PathLike, preds: Iterable[FramePrediction]) -> None:
    Path(path).write_text(dumps_predictions(preds))


# weights & features ---------------------------------------------------------------


def load_weights(path: PathLike) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    doc = _loads(text, str(path))
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected an object of named matrices")
    out = {}
    for name, entry in doc.items():
        where = f"{path} [{name}]"
        _expect_keys(entry, ("shape", "data"), (), where)
        shape = entry["shape"]
        if not (isinstance(shape, list) and len(shape) == 2 and all(isinstance(s, int) and s >= 0 for s in shape)):
            raise FormatError(f"{where}: field 'shape' must be [rows, cols]")
        data = entry["data"]
        if not isinstance(data, list) or len(data) != shape[0] * shape[1]:
            raise FormatError(f"{where}: field 'data' must hold {shape[0] * shape[1]} numbers")
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in data):
            raise FormatError(f"{where}: field 'data' must hold numbers only")
        arr = np.asarray(data, dtype=np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{where}: field 'data' contains non-finite values")
        out[name] = arr
    return out


def dumps_weights(params: Mapping[str, np.ndarray]) -> str:
    doc = {
        name: {"shape": list(np.shape(arr)), "data": [float(v) for v in np.asarray(arr).ravel()]}
        for name, arr in sorted(params.items())
    }
    return json.dumps(doc, allow_nan=False) + "\n"


def save_weights(path: PathLike, params: Mapping[str, np.ndarray]) -> None:
    Path(path).write_text(dumps_weights(params))


def features_record(frame_id: str, f_ind: np.ndarray, f_gro: np.ndarray, f_glo: np.ndarray) -> str:
    return _dumps({
        "frame_id": frame_id,
        "f_ind": np.asarray(f_ind, dtype=float).tolist(),
        "f_gro": np.asarray(f_gro, dtype=float).tolist(),
        "f_glo": np.asarray(f_glo, dtype=float).reshape(-1).tolist(),
    }) + "\n"
