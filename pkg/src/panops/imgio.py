"""PNG image and label-map files, palette color coding, offset overlays.

Label maps are single-channel uint8 with category ids; 255 is the ignore id
and renders as black, so palettes may not contain pure black.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .metrics import IGNORE_ID
from .tensor import FormatError

GREEN = (0, 255, 0)
RED = (255, 0, 0)


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG as (h, w) or (h, w, 3) uint8."""
    with PILImage.open(path) as img:
        if (img.format or "") != "PNG":
            raise FormatError(f"{path}: expected a PNG file, got {img.format or 'unknown format'}")
        if img.mode not in ("L", "RGB"):
            raise FormatError(f"{path}: unsupported PNG mode {img.mode!r}, "
                              f"need 8-bit grayscale (L) or RGB")
        return np.asarray(img)


def save_image(image, path) -> None:
    """Write a (h, w) or (h, w, 3) uint8 array as a PNG."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise ValueError(f"image must be uint8, got {arr.dtype}")
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim == 2:
        mode = "L"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        mode = "RGB"
    else:
        raise ValueError(f"image must be (h, w) or (h, w, 3), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"image has an empty dimension: shape {arr.shape}")
    PILImage.fromarray(arr, mode=mode).save(path, format="PNG")


def load_labels(path) -> np.ndarray:
    """Read a label map stored as a grayscale PNG."""
    arr = load_image(path)
    if arr.ndim != 2:
        raise FormatError(f"{path}: label maps must be single-channel, got RGB")
    return arr


def save_labels(labels, path) -> None:
    """Write a 2-D uint8 label map as a grayscale PNG."""
    arr = np.asarray(labels)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError(f"labels must be a 2-D uint8 map, got {arr.dtype} shape {arr.shape}")
    save_image(arr, path)


@dataclass(frozen=True)
class Palette:
    """Ordered category colors; index in the list is the category id."""

    names: tuple[str, ...]
    colors: np.ndarray

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        colors = np.array(self.colors, dtype=np.uint8)
        if colors.ndim != 2 or colors.shape[1] != 3 or colors.shape[0] != len(names):
            raise ValueError(f"need one (r, g, b) row per name, got {colors.shape} "
                             f"for {len(names)} names")
        if not 1 <= len(names) <= IGNORE_ID:
            raise ValueError(f"palette must have 1..{IGNORE_ID} entries, got {len(names)}")
        if len(set(names)) != len(names):
            raise ValueError("palette names must be unique")
        keys = {tuple(int(v) for v in c) for c in colors}
        if len(keys) != len(names):
            raise ValueError("palette colors must be unique")
        if (0, 0, 0) in keys:
            raise ValueError("pure black is reserved for the ignore id")
        colors.flags.writeable = False
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "colors", colors)

    def __len__(self) -> int:
        return len(self.names)


def load_palette(path) -> Palette:
    """Read "name,r,g,b" CSV rows into a Palette."""
    names, colors = [], []
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise FormatError(f"{path}: line {lineno}: expected name,r,g,b")
            name = row[0].strip()
            try:
                rgb = [int(v) for v in row[1:]]
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: non-integer color "
                                  f"component in {row[1:]}") from None
            if not name:
                raise FormatError(f"{path}: line {lineno}: empty category name")
            if min(rgb) < 0 or max(rgb) > 255:
                raise FormatError(f"{path}: line {lineno}: color {rgb} outside [0, 255]")
            names.append(name)
            colors.append(rgb)
    try:
        return Palette(tuple(names), np.array(colors, dtype=np.uint8).reshape(-1, 3))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def save_palette(palette: Palette, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        for name, (r, g, b) in zip(palette.names, palette.colors):
            writer.writerow([name, int(r), int(g), int(b)])


def encode_labels(labels, palette: Palette) -> np.ndarray:
    """Color a label map with its palette; ignore pixels become black."""
    ids = np.asarray(labels)
    if ids.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise ValueError(f"labels must be a 2-D integer map, got {ids.dtype} shape {ids.shape}")
    bad = ~(((ids >= 0) & (ids < len(palette))) | (ids == IGNORE_ID))
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise ValueError(f"label id {int(ids[y, x])} at pixel ({y}, {x}) has no palette entry")
    lut = np.zeros((256, 3), dtype=np.uint8)
    lut[:len(palette)] = palette.colors
    return lut[ids.astype(np.int64)]


def decode_labels(image, palette: Palette) -> np.ndarray:
    """Recover a label map from a palette-colored image; black decodes to 255."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError(f"expected an (h, w, 3) uint8 image, got {arr.dtype} shape {arr.shape}")
    packed = (arr[..., 0].astype(np.int64) << 16 | arr[..., 1].astype(np.int64) << 8
              | arr[..., 2].astype(np.int64))
    colors = palette.colors.astype(np.int64)
    known_keys = colors[:, 0] << 16 | colors[:, 1] << 8 | colors[:, 2]
    known_keys = np.concatenate([known_keys, [0]])          # black -> ignore
    known_ids = np.concatenate([np.arange(len(palette)), [IGNORE_ID]])
    order = np.argsort(known_keys)
    known_keys = known_keys[order]
    known_ids = known_ids[order]

    pos = np.searchsorted(known_keys, packed)
    pos_c = np.clip(pos, 0, len(known_keys) - 1)
    ok = known_keys[pos_c] == packed
    if not ok.all():
        y, x = np.argwhere(~ok)[0]
        r, g, b = (int(v) for v in arr[y, x])
        raise FormatError(f"unknown color ({r}, {g}, {b}) at pixel ({y}, {x})")
    return known_ids[pos_c].astype(np.uint8)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def render_offsets(base, anchors, offsets):
    """Overlay sampling geometry on an image for inspection.

    Each anchor gets a green 3x3 mark centered on its rounded position; each
    offset point gets a red 2x2 mark whose top-left corner is its rounded
    position. Red is painted after green, so coincident marks end up red.
    Marks partially off the canvas are cropped; marks whose rounded position
    falls entirely outside are dropped.
    """
    return _render_offsets_counted(base, anchors, offsets)[0]


def _render_offsets_counted(base, anchors, offsets):
    img = np.asarray(base)
    if img.dtype != np.uint8 or img.ndim not in (2, 3):
        raise ValueError(f"base must be a uint8 image, got {img.dtype} "
                         f"{img.ndim}-D")
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    elif img.shape[2] != 3:
        raise ValueError(f"base must have 1 or 3 channels, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"base has an empty dimension: shape {img.shape}")
    out = img.copy()
    h, w = out.shape[:2]

    counts = {"anchors_drawn": 0, "offsets_drawn": 0, "clipped": 0}
    for y, x in anchors:
        cy, cx = _round_half_up(float(y)), _round_half_up(float(x))
        if not (0 <= cy < h and 0 <= cx < w):
            counts["clipped"] += 1
            continue
        out[max(cy - 1, 0):cy + 2, max(cx - 1, 0):cx + 2] = GREEN
        counts["anchors_drawn"] += 1
    for y, x in offsets:
        cy, cx = _round_half_up(float(y)), _round_half_up(float(x))
        if not (0 <= cy < h and 0 <= cx < w):
            counts["clipped"] += 1
            continue
        out[cy:cy + 2, cx:cx + 2] = RED
        counts["offsets_drawn"] += 1
    return out, counts
