"""Frame image access (PNG and JPEG)."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from panofocus.io.formats import FormatError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an image as an H x W x 3 uint8 array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc


def save_png(path: str | os.PathLike, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image)).save(path, format="PNG")


def find_frame_image(images_dir: Optional[str | os.PathLike], frame_id: str) -> Optional[Path]:
    """Locate ``<images_dir>/<frame_id>.{png,jpg,jpeg}``."""
    if images_dir is None:
        return None
    for suffix in IMAGE_SUFFIXES:
        p = Path(images_dir) / f"{frame_id}{suffix}"
        if p.is_file():
            return p
    return None


def image_size(path: str | os.PathLike) -> tuple[int, int]:
    """(width, height) without decoding pixel data."""
    try:
        with Image.open(path) as im:
            return im.size
    except OSError as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
