"""Block-wise decoupling masks, toroidal border shifting and information-deletion baselines.

Masks are plain ``uint8`` numpy arrays (1 = keep, 0 = erase).  A block grid
is ``(n, n)``; a pixel mask is ``(H, W)``.  Shift offsets are ``(s_h, s_v)``
pixel pairs, horizontal first.  Every sampler takes an explicit
``np.random.Generator``.
"""
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .patch import Patch


def sample_block_grid(n, r, rng):
    """Sample an ``n x n`` keep/erase grid; each cell is erased with probability ``r``."""
    if int(n) != n or n < 1:
        raise ValueError(f"granularity n must be a positive integer, got {n!r}")
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"decoupling ratio r must lie in [0, 1], got {r!r}")
    return (rng.random((int(n), int(n))) >= r).astype(np.uint8)


def block_bounds(size, n):
    """Start index of each of the ``n`` blocks along an axis of ``size`` pixels, plus ``size``."""
    return np.array([(k * size) // n for k in range(n + 1)], dtype=np.int64)


def block_index(size, n):
    """Block id of every pixel along one axis (boundaries at floor(k*size/n))."""
    bounds = block_bounds(size, n)
    return np.searchsorted(bounds, np.arange(size), side="right") - 1


def render_pixel_mask(grid, width, height):
    """Rasterize a block grid to an ``(height, width)`` pixel mask."""
    grid = np.asarray(grid)
    n = grid.shape[0]
    if grid.ndim != 2 or grid.shape[1] != n:
        raise ValueError(f"block grid must be square, got shape {grid.shape}")
    if width < n or height < n:
        raise ValueError(f"mask {width}x{height} is smaller than the {n}x{n} block grid")
    rows = block_index(height, n)
    cols = block_index(width, n)
    return grid[rows[:, None], cols[None, :]].astype(np.uint8)


def border_shift(mask, offset):
    """Toroidally translate ``mask`` by ``offset = (s_h, s_v)``.

    Output pixel (x, y) is input pixel ((x - s_h) mod W, (y - s_v) mod H), so
    mask area pushed past one edge re-enters from the opposite edge.
    """
    s_h, s_v = offset
    h, w = mask.shape[-2:]
    return np.roll(mask, shift=(int(s_v) % h, int(s_h) % w), axis=(-2, -1))


def sample_shift(width, height, rng):
    """Uniform integer offset over [0, W) x [0, H)."""
    return int(rng.integers(0, width)), int(rng.integers(0, height))


def decouple_mask(width, height, n, r, rng, offset=None, shift=True):
    """Sample the shifted block-wise mask used by :func:`decouple`.

    ``offset=None`` with ``shift=True`` draws a fresh uniform offset from ``rng``
    after the grid has been drawn.
    """
    grid = sample_block_grid(n, r, rng)
    mask = render_pixel_mask(grid, width, height)
    if shift:
        if offset is None:
            offset = sample_shift(width, height, rng)
        mask = border_shift(mask, offset)
    return mask


def decouple(patch, n, r, offset, rng):
    """Block-wise decoupling with border shifting.

    Returns a new :class:`Patch` whose alpha is the (existing alpha times the)
    shifted block mask.  RGB is passed through untouched, so gradients reach
    kept pixels unchanged and erased pixels only through alpha (i.e. not at all
    once composited with premultiplied alpha).
    """
    mask = decouple_mask(patch.width, patch.height, n, r, rng, offset=offset, shift=True)
    alpha = torch.from_numpy(mask).to(patch.alpha)
    return Patch(patch.rgb, patch.alpha * alpha.unsqueeze(0))


# -- information-deletion baselines ---------------------------------------------------------


class BaselineMode(str, enum.Enum):
    HAS = "has"
    CUTOUT = "cutout"
    GRIDMASK = "gridmask"
    RANDOM_ERASING = "random_erasing"


_DEFAULTS = {
    BaselineMode.HAS: {"grid": 4, "hide_prob": 0.5},
    BaselineMode.CUTOUT: {"side_fraction": 0.5, "side": None},
    BaselineMode.GRIDMASK: {"keep_ratio": 0.6, "unit": None, "unit_range": (0.2, 0.5)},
    BaselineMode.RANDOM_ERASING: {"probability": 0.5, "area_range": (0.02, 0.4),
                                  "aspect_range": (0.3, 3.3), "attempts": 10},
}


@dataclass
class BaselineMaskMode:
    mode: BaselineMode
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            self.mode = BaselineMode(self.mode)
        except ValueError:
            raise ValueError(
                f"unknown baseline mask mode {self.mode!r}; "
                f"expected one of {[m.value for m in BaselineMode]}") from None
        unknown = set(self.params) - set(_DEFAULTS[self.mode])
        if unknown:
            raise ValueError(f"unknown parameters for {self.mode.value}: {sorted(unknown)}")
        self.params = {**_DEFAULTS[self.mode], **self.params}
        self._validate()

    def _validate(self):
        p = self.params

        def ratio(name):
            if not 0.0 <= p[name] <= 1.0:
                raise ValueError(f"{self.mode.value}.{name} must lie in [0, 1], got {p[name]}")

        def interval(name, lo=0.0, hi=math.inf):
            a, b = p[name]
            if not (lo <= a <= b <= hi) or a <= 0:
                raise ValueError(f"{self.mode.value}.{name} must be a positive interval, got {p[name]}")

        if self.mode is BaselineMode.HAS:
            ratio("hide_prob")
            if int(p["grid"]) < 1:
                raise ValueError("has.grid must be >= 1")
        elif self.mode is BaselineMode.CUTOUT:
            ratio("side_fraction")
            if p["side"] is not None and p["side"] < 0:
                raise ValueError("cutout.side must be >= 0")
        elif self.mode is BaselineMode.GRIDMASK:
            ratio("keep_ratio")
            interval("unit_range", hi=1.0)
            if p["unit"] is not None and p["unit"] < 1:
                raise ValueError("gridmask.unit must be >= 1 pixel")
        else:
            ratio("probability")
            interval("area_range", hi=1.0)
            interval("aspect_range")


def gridmask_hole(unit, keep_ratio):
    """Side of the square hole inside one ``unit x unit`` cell for a given keep ratio."""
    return int(round(unit * math.sqrt(1.0 - keep_ratio)))


def gridmask_expected_erased(unit, keep_ratio):
    """Expected erased fraction of a GridMask with uniformly random phase."""
    return (gridmask_hole(unit, keep_ratio) / unit) ** 2


def _has(width, height, p, rng):
    g = int(p["grid"])
    cells = (rng.random((g, g)) >= p["hide_prob"]).astype(np.uint8)
    return render_pixel_mask(cells, width, height)


def _cutout(width, height, p, rng):
    mask = np.ones((height, width), dtype=np.uint8)
    side = p["side"]
    if side is None:
        side = int(round(p["side_fraction"] * min(width, height)))
    side = int(side)
    if side == 0:
        return mask
    cy, cx = int(rng.integers(0, height)), int(rng.integers(0, width))
    y1, y2 = max(0, cy - side // 2), min(height, cy - side // 2 + side)
    x1, x2 = max(0, cx - side // 2), min(width, cx - side // 2 + side)
    mask[y1:y2, x1:x2] = 0
    return mask


def _gridmask(width, height, p, rng):
    unit = p["unit"]
    if unit is None:
        lo, hi = p["unit_range"]
        side = min(width, height)
        unit = int(rng.integers(max(2, int(lo * side)), max(3, int(hi * side) + 1)))
    unit = int(unit)
    hole = gridmask_hole(unit, p["keep_ratio"])
    dx, dy = int(rng.integers(0, unit)), int(rng.integers(0, unit))
    in_x = ((np.arange(width) - dx) % unit) < hole
    in_y = ((np.arange(height) - dy) % unit) < hole
    return (~(in_y[:, None] & in_x[None, :])).astype(np.uint8)


def _random_erasing(width, height, p, rng):
    mask = np.ones((height, width), dtype=np.uint8)
    if rng.random() >= p["probability"]:
        return mask
    area = width * height
    lo_a, hi_a = p["area_range"]
    lo_r, hi_r = p["aspect_range"]
    for _ in range(int(p["attempts"])):
        target = rng.uniform(lo_a, hi_a) * area
        aspect = math.exp(rng.uniform(math.log(lo_r), math.log(hi_r)))
        h = int(round(math.sqrt(target * aspect)))
        w = int(round(math.sqrt(target / aspect)))
        if 0 < h < height and 0 < w < width:
            y = int(rng.integers(0, height - h + 1))
            x = int(rng.integers(0, width - w + 1))
            mask[y:y + h, x:x + w] = 0
            break
    return mask


_SAMPLERS = {
    BaselineMode.HAS: _has,
    BaselineMode.CUTOUT: _cutout,
    BaselineMode.GRIDMASK: _gridmask,
    BaselineMode.RANDOM_ERASING: _random_erasing,
}


def sample_baseline_mask(mode, width, height, rng):
    """Sample one information-deletion mask.  ``mode`` is a BaselineMaskMode or a mode name."""
    if not isinstance(mode, BaselineMaskMode):
        mode = BaselineMaskMode(mode)
    return _SAMPLERS[mode.mode](width, height, mode.params, rng)


def save_mask_png(path, mask):
    """Write a mask as 8-bit grayscale: 0 = erased, 255 = kept."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)
    return path


def load_mask_png(path):
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)
