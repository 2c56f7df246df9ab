"""Detector adapters used for sub-region re-detection.

An adapter receives a cropped region and returns detections in the crop's
local coordinates. The detection network itself lives outside this package.
"""

from __future__ import annotations

import json
import os
import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from panofocus.geometry import Box, GeometryError


class AdapterError(RuntimeError):
    pass


class DetectorAdapter:
    """Base class for region detectors.

    Subclasses implement :meth:`detect`. Set ``thread_safe = True`` if
    :meth:`detect` may be called from several threads at once; otherwise the
    pipeline serializes calls.
    """

    thread_safe: bool = False

    def detect(
        self,
        crop: Optional[np.ndarray],
        region: Box,
        *,
        frame_id: str,
        region_index: int,
    ) -> list[Box]:
        raise NotImplementedError


class NullDetector(DetectorAdapter):
    """Finds nothing. Reduces the focuser to plain NMS over the originals."""

    thread_safe = True

    def detect(self, crop, region, *, frame_id, region_index):
        return []


def parse_box_list(raw, where: str) -> list[Box]:
    if not isinstance(raw, list):
        raise AdapterError(f"{where}: expected a JSON array of boxes, got {type(raw).__name__}")
    boxes = []
    for k, item in enumerate(raw):
        if not isinstance(item, dict):
            raise AdapterError(f"{where}: box #{k} is not an object")
        extra = set(item) - {"x", "y", "w", "h", "score"}
        if extra:
            raise AdapterError(f"{where}: box #{k} has unknown fields {sorted(extra)}")
        try:
            boxes.append(
                Box(float(item["x"]), float(item["y"]), float(item["w"]), float(item["h"]),
                    None if item.get("score") is None else float(item["score"]))
            )
        except (KeyError, TypeError, ValueError, GeometryError) as exc:
            raise AdapterError(f"{where}: box #{k} invalid: {exc}") from exc
    return boxes


class FileDetector(DetectorAdapter):
    """Replays region-local detections from a JSON-lines file.

    Each line is ``{"frame_id": str, "region": int, "boxes": [{x, y, w, h, score}]}``.
    Regions without a line yield no detections.
    """

    thread_safe = True

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.table: dict[tuple[str, int], list[Box]] = {}
        try:
            text = self.path.read_text()
        except OSError as exc:
            raise AdapterError(f"cannot read detector file {self.path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            where = f"{self.path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AdapterError(f"{where}: malformed JSON: {exc}") from exc
            if not isinstance(rec, dict) or set(rec) != {"frame_id", "region", "boxes"}:
                raise AdapterError(f"{where}: expected keys frame_id, region, boxes")
            key = (str(rec["frame_id"]), int(rec["region"]))
            self.table[key] = parse_box_list(rec["boxes"], where)

    def detect(self, crop, region, *, frame_id, region_index):
        return list(self.table.get((frame_id, region_index), []))


class CommandDetector(DetectorAdapter):
    """Runs an external command once per region.

    The crop is written to a temporary PNG whose path replaces ``{path}`` in
    the command template (appended if the placeholder is absent). The
    command must print one JSON array of ``{x, y, w, h, score}`` objects.
    """

    def __init__(self, template: str, timeout: float = 120.0):
        self.argv = shlex.split(template)
        if not self.argv:
            raise AdapterError("empty detector command")
        self.timeout = timeout

    def detect(self, crop, region, *, frame_id, region_index):
        from PIL import Image

        if crop is None:
            raise AdapterError(f"no image available for frame {frame_id!r}")
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, f"region_{region_index}.png")
            Image.fromarray(np.ascontiguousarray(crop)).save(path)
            argv = [a.replace("{path}", path) for a in self.argv]
            if not any("{path}" in a for a in self.argv):
                argv.append(path)
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise AdapterError(f"detector command failed to run: {exc}") from exc
        if proc.returncode != 0:
            raise AdapterError(
                f"detector command exited with status {proc.returncode}: {proc.stderr.strip()[:200]}"
            )
        try:
            raw = json.loads(proc.stdout)
        except json.JSONDecodeError as exc:
            raise AdapterError(f"detector command printed malformed JSON: {exc}") from exc
        return parse_box_list(raw, "detector output")
