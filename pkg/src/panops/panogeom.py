"""Equirectangular projection, pinhole-to-panorama warping, and tile shuffling.

Angles are radians everywhere in this module. Longitude lambda grows to the
right, latitude phi grows upward, and image row 0 is the top of the frame,
so planar y and row index run in opposite directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class ErpParams:
    """Equirectangular plate carree parameters.

    radius scales the planar chart; lambda0/phi0 place the chart origin on
    the sphere; phi1 is the standard parallel whose cosine compresses the
    horizontal axis.
    """

    radius: float = 1.0
    lambda0: float = 0.0
    phi0: float = 0.0
    phi1: float = 0.0

    def __post_init__(self):
        vals = (self.radius, self.lambda0, self.phi0, self.phi1)
        if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in vals):
            raise ValueError(f"projection parameters must be finite numbers, got {vals}")
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if math.cos(self.phi1) <= 0:
            raise ValueError(f"standard parallel {self.phi1} has non-positive cosine")


def erp_forward(lam, phi, params: ErpParams = ErpParams()):
    """Sphere (lambda, phi) to planar (x, y). Accepts scalars or arrays."""
    x = params.radius * (np.asarray(lam, dtype=np.float64) - params.lambda0) * math.cos(params.phi1)
    y = params.radius * (np.asarray(phi, dtype=np.float64) - params.phi0)
    return x, y


def erp_inverse(x, y, params: ErpParams = ErpParams()):
    """Planar (x, y) back to sphere (lambda, phi). Accepts scalars or arrays."""
    lam = np.asarray(x, dtype=np.float64) / (params.radius * math.cos(params.phi1)) + params.lambda0
    phi = np.asarray(y, dtype=np.float64) / params.radius + params.phi0
    return lam, phi


@dataclass(frozen=True)
class WarpSpec:
    """How a pinhole frame is resampled onto an equirectangular canvas.

    fov_h/fov_v are the full horizontal and vertical view angles of the
    source frame; out_size is (rows, cols) of the canvas (None keeps the
    source size); fill paints canvas pixels that fall outside the source.
    """

    fov_h: float = math.pi / 2
    fov_v: float = math.pi / 2
    out_size: tuple[int, int] | None = None
    fill: int = 0
    interpolation: str = "bilinear"

    def __post_init__(self):
        for name, fov in (("fov_h", self.fov_h), ("fov_v", self.fov_v)):
            if not (isinstance(fov, (int, float)) and 0.0 < fov < math.pi):
                raise ValueError(f"{name} must lie in (0, pi), got {fov}")
        if self.out_size is not None:
            oh, ow = self.out_size
            if not (isinstance(oh, int) and isinstance(ow, int) and oh >= 1 and ow >= 1):
                raise ValueError(f"out_size must be positive integers, got {self.out_size}")
            object.__setattr__(self, "out_size", (oh, ow))
        if not (isinstance(self.fill, int) and 0 <= self.fill <= 255):
            raise ValueError(f"fill must be an integer in [0, 255], got {self.fill}")
        if self.interpolation not in ("bilinear", "nearest"):
            raise ValueError(f"interpolation must be 'bilinear' or 'nearest', "
                             f"got {self.interpolation!r}")


def _check_image(arr, name="image"):
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        raise ValueError(f"{name} must be uint8, got {a.dtype}")
    if not (a.ndim == 2 or (a.ndim == 3 and a.shape[2] == 3)):
        raise ValueError(f"{name} must be (h, w) or (h, w, 3), got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} has an empty dimension: shape {a.shape}")
    return a


def _sample_image(img, rows, cols, interpolation, fill):
    """Resample an uint8 image at fractional (row, col) grids, constant fill."""
    h, w = img.shape[:2]
    planes = (img if img.ndim == 3 else img[..., None]).astype(np.float64)
    fillv = float(fill)
    # keep the int cast safe for near-vertical view rays
    rows = np.clip(rows, -(h + 1.0), h + 1.0)
    cols = np.clip(cols, -(w + 1.0), w + 1.0)

    if interpolation == "nearest":
        ri = np.floor(rows + 0.5).astype(np.int64)
        ci = np.floor(cols + 0.5).astype(np.int64)
        ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        vals = planes[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)]
        out = np.where(ok[..., None], vals, fillv)
    else:
        r0 = np.floor(rows).astype(np.int64)
        c0 = np.floor(cols).astype(np.int64)
        dr = (rows - r0)[..., None]
        dc = (cols - c0)[..., None]
        out = np.zeros(rows.shape + (planes.shape[2],), dtype=np.float64)
        for rr, wr in ((r0, 1.0 - dr), (r0 + 1, dr)):
            for cc, wc in ((c0, 1.0 - dc), (c0 + 1, dc)):
                ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
                vals = planes[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
                out += wr * wc * np.where(ok[..., None], vals, fillv)

    out = np.rint(out).clip(0, 255).astype(np.uint8)
    return out if img.ndim == 3 else out[..., 0]


def warp_pinhole_to_erp(image, spec: WarpSpec = WarpSpec(),
                        params: ErpParams = ErpParams()) -> np.ndarray:
    """Resample a pinhole frame onto an equirectangular canvas.

    The canvas spans lambda0 +- fov_h/2 horizontally and phi0 +- fov_v/2
    vertically, sampled at pixel centers; each canvas pixel is projected
    back through the pinhole model (focal lengths chosen so the source
    frame exactly covers its field of view) and the source is sampled
    there. An odd-sized canvas maps its center pixel to the source center.
    """
    img = _check_image(image)
    src_h, src_w = img.shape[:2]
    out_h, out_w = spec.out_size if spec.out_size is not None else (src_h, src_w)

    x_max = params.radius * (spec.fov_h / 2.0) * math.cos(params.phi1)
    y_max = params.radius * (spec.fov_v / 2.0)
    xs = (2.0 * (np.arange(out_w, dtype=np.float64) + 0.5) / out_w - 1.0) * x_max
    ys = (1.0 - 2.0 * (np.arange(out_h, dtype=np.float64) + 0.5) / out_h) * y_max
    lam, phi = erp_inverse(xs[None, :], ys[:, None], params)

    dlam = lam - params.lambda0
    dphi = phi - params.phi0
    f_h = (src_w / 2.0) / math.tan(spec.fov_h / 2.0)
    f_v = (src_h / 2.0) / math.tan(spec.fov_v / 2.0)
    u = np.tan(dlam) * f_h
    v = np.tan(dphi) / np.cos(dlam) * f_v

    cols = u + (src_w - 1) / 2.0
    rows = (src_h - 1) / 2.0 - v
    rows, cols = np.broadcast_arrays(rows, cols)
    return _sample_image(img, rows, cols, spec.interpolation, spec.fill)


def _tile_edges(size, grid):
    base = size // grid
    return [i * base for i in range(grid)] + [size]


def _resize_nearest(tile, out_h, out_w):
    th, tw = tile.shape[:2]
    ri = np.floor((np.arange(out_h) + 0.5) * th / out_h).astype(np.int64)
    ci = np.floor((np.arange(out_w) + 0.5) * tw / out_w).astype(np.int64)
    return tile[ri[:, None], ci[None, :]]


def shuffle_tiles(image, grid: int, permutation) -> np.ndarray:
    """Rearrange a g x g tiling of the image: slot i receives tile permutation[i].

    Tiles are addressed row-major. When the image size is not a multiple of
    g, the last row/column of tiles absorbs the remainder and relocated
    tiles are nearest-resized into their destination slot; with exact
    tiling every tile moves unchanged.
    """
    img = _check_image(image)
    if not (isinstance(grid, int) and grid >= 1):
        raise ValueError(f"grid must be an integer >= 1, got {grid}")
    h, w = img.shape[:2]
    if h < grid or w < grid:
        raise ValueError(f"grid {grid} exceeds image size {h}x{w}")
    perm = [int(p) for p in permutation]
    if sorted(perm) != list(range(grid * grid)):
        raise ValueError(f"permutation must rearrange 0..{grid * grid - 1}, got {perm}")

    re = _tile_edges(h, grid)
    ce = _tile_edges(w, grid)
    out = np.empty_like(img)
    for slot in range(grid * grid):
        di, dj = divmod(slot, grid)
        si, sj = divmod(perm[slot], grid)
        tile = img[re[si]:re[si + 1], ce[sj]:ce[sj + 1]]
        out[re[di]:re[di + 1], ce[dj]:ce[dj + 1]] = _resize_nearest(
            tile, re[di + 1] - re[di], ce[dj + 1] - ce[dj])
    return out


@dataclass(frozen=True)
class RerpConfig:
    """Tile-shuffle augmentation settings: grid size, RNG seed, warp to apply."""

    grid: int
    seed: int
    warp: WarpSpec = WarpSpec()

    def __post_init__(self):
        if not (isinstance(self.grid, int) and self.grid >= 1):
            raise ValueError(f"grid must be an integer >= 1, got {self.grid}")
        if not isinstance(self.seed, int):
            raise ValueError(f"seed must be an integer, got {self.seed!r}")


def rerp_augment(image, labels, config: RerpConfig,
                 params: ErpParams = ErpParams()):
    """Shuffle g x g tiles with a seeded permutation, then warp to the panorama.

    Labels may be None; when given they ride along: same permutation,
    nearest-neighbor warp, unmapped pixels set to the ignore id 255. Returns
    (warped image, warped labels or None, permutation applied). grid=1
    degenerates to the plain warp.
    """
    img = _check_image(image)
    rng = np.random.default_rng(config.seed)
    perm = [int(p) for p in rng.permutation(config.grid * config.grid)]

    warped = warp_pinhole_to_erp(shuffle_tiles(img, config.grid, perm),
                                 config.warp, params)
    warped_labels = None
    if labels is not None:
        lab = np.asarray(labels)
        if lab.ndim != 2 or lab.dtype != np.uint8:
            raise ValueError(f"labels must be a 2-D uint8 map, got {lab.dtype} shape {lab.shape}")
        if lab.shape != img.shape[:2]:
            raise ValueError(f"labels shape {lab.shape} does not match image {img.shape[:2]}")
        label_spec = replace(config.warp, interpolation="nearest", fill=255)
        warped_labels = warp_pinhole_to_erp(shuffle_tiles(lab, config.grid, perm),
                                            label_spec, params)
    return warped, warped_labels, perm


def horizontal_rotate(panorama, shift: int) -> np.ndarray:
    """Circularly shift panorama columns right by shift (mod width).

    A full-width shift is the identity; negative shifts rotate left.
    """
    pano = np.asarray(panorama)
    if pano.ndim not in (2, 3) or pano.shape[0] < 1 or pano.shape[1] < 1:
        raise ValueError(f"panorama must be a non-empty 2-D or 3-D array, got shape {pano.shape}")
    return np.roll(pano, int(shift) % pano.shape[1], axis=1)
