"""SVG overlays of detections on frame images."""

from __future__ import annotations

import os
from typing import Iterable, Optional, Sequence
from xml.sax.saxutils import quoteattr

from panofocus.geometry import Box

# original detections gray, boxes introduced by the fine pass red
STYLES = {
    "original": 'fill="none" stroke="#9a9a9a" stroke-width="2"',
    "fine": 'fill="none" stroke="#e0301e" stroke-width="2"',
    "group": 'fill="none" stroke="#2f6fdf" stroke-width="2" stroke-dasharray="8 4"',
}


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def box_key(b: Box) -> tuple[float, float, float, float]:
    return (round(b.x, 6), round(b.y, 6), round(b.w, 6), round(b.h, 6))


def render_svg(
    width: float,
    height: float,
    boxes: Sequence[Box],
    kinds: Optional[Sequence[str]] = None,
    image_href: Optional[str] = None,
    labels: Optional[Sequence[str]] = None,
) -> str:
    """One SVG document: the image (if any) and one rect per box.

    The root viewport is the image extent, so boxes reaching past the frame
    edge are clipped.
    """
    kinds = kinds or ["original"] * len(boxes)
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" '
        f'width="{_fmt(width)}" height="{_fmt(height)}" viewBox="0 0 {_fmt(width)} {_fmt(height)}" overflow="hidden">',
    ]
    if image_href is not None:
        out.append(
            f'  <image x="0" y="0" width="{_fmt(width)}" height="{_fmt(height)}" '
            f"href={quoteattr(image_href)} xlink:href={quoteattr(image_href)}/>"
        )
    for k, (b, kind) in enumerate(zip(boxes, kinds)):
        style = STYLES.get(kind, STYLES["original"])
        title = ""
        if labels is not None and labels[k]:
            title = f"<title>{labels[k]}</title>"
        elif b.score is not None:
            title = f"<title>{b.score:.3f}</title>"
        out.append(
            f'  <rect class="{kind}" x="{_fmt(b.x)}" y="{_fmt(b.y)}" width="{_fmt(b.w)}" height="{_fmt(b.h)}" '
            f"{style}>{title}</rect>"
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def classify(fused: Iterable[Box], original: Optional[Iterable[Box]]) -> list[str]:
    """Tag each fused box as 'original' if it equals an input detection, else 'fine'."""
    fused = list(fused)
    if original is None:
        return ["original"] * len(fused)
    known = {box_key(b) for b in original}
    return ["original" if box_key(b) in known else "fine" for b in fused]


def relative_href(image_path: Optional[os.PathLike | str], out_dir: os.PathLike | str) -> Optional[str]:
    if image_path is None:
        return None
    return os.path.relpath(os.fspath(image_path), os.fspath(out_dir)).replace(os.sep, "/")
