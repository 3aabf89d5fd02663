"""Simulated physical transformations and placement of the patch onto people.

Geometry (rotation, scale, thin plate spline, placement) is resampled
bilinearly with ``grid_sample`` so everything stays differentiable in the
patch colors.  Compositing uses premultiplied alpha::

    out = sample(alpha * rgb) + (1 - sample(alpha)) * image

which means an erased patch pixel contributes nothing to the output and gets
exactly zero gradient.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .patch import Patch

log = logging.getLogger(__name__)

tps_stats = {"fallbacks": 0}


def _interval(value, name):
    lo, hi = (float(v) for v in value)
    if lo > hi:
        raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
    return (lo, hi)


@dataclass
class TransformSpec:
    rotation: tuple = (-20.0, 20.0)     # degrees, counter-clockwise on screen
    scale: tuple = (0.9, 1.1)           # multiplier on the nominal placement size
    noise: float = 0.1                  # half-width of per-pixel uniform noise
    brightness: tuple = (-0.1, 0.1)     # additive
    contrast: tuple = (0.8, 1.2)        # multiplicative
    tps_enabled: bool = True
    tps_jitter: float = 0.05            # control-point displacement, fraction of patch size
    tps_grid: int = 4
    tc_enabled: bool = False

    def __post_init__(self):
        self.rotation = _interval(self.rotation, "rotation")
        self.scale = _interval(self.scale, "scale")
        self.brightness = _interval(self.brightness, "brightness")
        self.contrast = _interval(self.contrast, "contrast")
        if self.scale[0] <= 0:
            raise ValueError("scale range must be positive")
        if not 0 <= self.noise <= 1:
            raise ValueError("noise amplitude must lie in [0, 1]")
        if not 0 <= self.tps_jitter <= 0.2:
            raise ValueError("tps_jitter must lie in [0, 0.2]")
        if self.tps_grid < 2:
            raise ValueError("tps_grid must be >= 2")

    @classmethod
    def identity(cls):
        return cls(rotation=(0, 0), scale=(1, 1), noise=0.0, brightness=(0, 0), contrast=(1, 1),
                   tps_enabled=False)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class PlacementRule:
    relative_size: float = 0.2   # patch side as a fraction of the box's larger side
    anchor: float = 0.45         # patch center as a fraction of box height from the top

    def __post_init__(self):
        if not 0 < self.relative_size <= 1:
            raise ValueError("relative_size must lie in (0, 1]")
        if not 0 <= self.anchor <= 1:
            raise ValueError("anchor must lie in [0, 1]")


@dataclass
class EotDraw:
    """One draw of transformation parameters."""
    angle: float = 0.0
    scale: float = 1.0
    contrast: float = 1.0
    brightness: float = 0.0
    noise: Optional[np.ndarray] = field(default=None, repr=False)
    tps_dst: Optional[np.ndarray] = field(default=None, repr=False)


def sample_eot(spec, shape, rng, tps=None):
    """Draw rotation/scale/photometric (and optionally TPS) parameters for a (H, W) patch.

    Draw order is fixed so a given rng state always yields the same parameters.
    """
    h, w = shape
    d = EotDraw(angle=float(rng.uniform(*spec.rotation)), scale=float(rng.uniform(*spec.scale)),
                contrast=float(rng.uniform(*spec.contrast)),
                brightness=float(rng.uniform(*spec.brightness)))
    noise = rng.uniform(-1.0, 1.0, size=(3, h, w)).astype(np.float32)
    if spec.noise > 0:
        d.noise = noise * spec.noise
    use_tps = spec.tps_enabled if tps is None else tps
    if use_tps:
        d.tps_dst = tps_jitter_points(spec.tps_grid, spec.tps_jitter, rng)
    return d


def photometric(rgb, draw):
    out = draw.contrast * rgb + draw.brightness
    if draw.noise is not None:
        out = out + torch.as_tensor(draw.noise, dtype=rgb.dtype, device=rgb.device)
    return out.clamp(0.0, 1.0)


def _rotation_theta(angle_deg, scale, dtype):
    """Affine matrix mapping output coords to input coords for a CCW rotation and zoom."""
    t = math.radians(angle_deg)
    c, s = math.cos(t) / scale, math.sin(t) / scale
    return torch.tensor([[c, -s, 0.0], [s, c, 0.0]], dtype=dtype)


def _resample(patch, grid):
    """Sample a patch at normalized coords ``grid`` (N, H, W, 2); alpha is zero outside."""
    n = grid.shape[0]
    rgb = F.grid_sample(patch.rgb.unsqueeze(0).expand(n, -1, -1, -1), grid, mode="bilinear",
                        padding_mode="border", align_corners=False)
    alpha = F.grid_sample(patch.alpha.unsqueeze(0).expand(n, -1, -1, -1), grid, mode="bilinear",
                          padding_mode="zeros", align_corners=False)
    return rgb, alpha


def rotate_scale(patch, angle=0.0, scale=1.0):
    if angle == 0.0 and scale == 1.0:
        return patch
    theta = _rotation_theta(angle, scale, patch.rgb.dtype).unsqueeze(0)
    grid = F.affine_grid(theta, (1, 3, patch.height, patch.width), align_corners=False)
    rgb, alpha = _resample(patch, grid)
    return Patch(rgb[0], alpha[0])


def apply_eot(patch, spec, rng, draw=None):
    """``clamp(contrast * rotate_scale(patch) + brightness + noise, 0, 1)``.

    Alpha follows the geometry only.  TPS is not part of this op; see
    :func:`apply_tps`.
    """
    draw = draw or sample_eot(spec, patch.size, rng, tps=False)
    geo = rotate_scale(patch, draw.angle, draw.scale)
    return Patch(photometric(geo.rgb, draw), geo.alpha)


# -- thin plate spline ------------------------------------------------------------------------

# jitter moves control points by at most 2 * tps_jitter, far below this margin
TPS_MARGIN = 0.5


def control_grid(k):
    """k x k control points spanning [-1, 1]^2 as an (k*k, 2) array of (x, y)."""
    lin = np.linspace(-1.0, 1.0, k)
    xs, ys = np.meshgrid(lin, lin)
    return np.stack([xs.ravel(), ys.ravel()], 1)


def tps_jitter_points(k, jitter, rng):
    """Control grid displaced by uniform noise of ``jitter`` patch sizes (2*jitter normalized)."""
    src = control_grid(k)
    return src + rng.uniform(-2 * jitter, 2 * jitter, size=src.shape)


def _tps_kernel(d2):
    return 0.5 * d2 * torch.log(d2.clamp(min=1e-20))


def solve_tps(centers, targets):
    """Fit f with f(centers_i) = targets_i; returns coefficients or None if singular."""
    c = torch.as_tensor(centers, dtype=torch.float64)
    v = torch.as_tensor(targets, dtype=torch.float64)
    n = len(c)
    k = _tps_kernel(((c[:, None] - c[None]) ** 2).sum(-1))
    p = torch.cat([torch.ones(n, 1, dtype=torch.float64), c], 1)
    lhs = torch.zeros(n + 3, n + 3, dtype=torch.float64)
    lhs[:n, :n], lhs[:n, n:], lhs[n:, :n] = k, p, p.T
    rhs = torch.cat([v, torch.zeros(3, 2, dtype=torch.float64)])
    if torch.linalg.matrix_rank(p) < 3 or torch.linalg.cond(lhs) > 1e12:
        return None
    return torch.linalg.solve(lhs, rhs)


def tps_eval(points, centers, coeffs):
    """Evaluate a fitted TPS at ``points`` (..., 2)."""
    c = torch.as_tensor(centers, dtype=torch.float64)
    shape = points.shape
    pts = points.reshape(-1, 2).to(torch.float64)
    n = len(c)
    u = _tps_kernel(((pts[:, None] - c[None]) ** 2).sum(-1))
    out = u @ coeffs[:n] + coeffs[n] + pts @ coeffs[n + 1:]
    return out.reshape(shape).to(points.dtype)


def tps_sampling_map(src, dst):
    """Function mapping output coords to source coords so that ``dst_i`` shows ``src_i``.

    Falls back to the identity (and counts it in ``tps_stats``) when the
    control points are degenerate.
    """
    coeffs = solve_tps(dst, src)
    if coeffs is None:
        tps_stats["fallbacks"] += 1
        log.warning("degenerate TPS control points; using identity warp")
        return lambda pts: pts
    return lambda pts: tps_eval(pts, dst, coeffs)


def apply_tps(patch, tps_jitter, rng, grid=4, src=None, dst=None):
    """Warp ``patch`` by a TPS through a jittered ``grid x grid`` control lattice.

    Explicit ``src``/``dst`` control points (normalized [-1, 1] coords) override
    the random jitter.
    """
    if tps_jitter < 0:
        raise ValueError("tps_jitter must be >= 0")
    if src is None:
        src = control_grid(grid)
    if dst is None:
        dst = src + rng.uniform(-2 * tps_jitter, 2 * tps_jitter, size=src.shape)
    src, dst = np.asarray(src, dtype=np.float64), np.asarray(dst, dtype=np.float64)
    if np.array_equal(src, dst):
        return patch
    mapping = tps_sampling_map(src, dst)
    ident = F.affine_grid(torch.eye(2, 3, dtype=patch.rgb.dtype).unsqueeze(0),
                          (1, 3, patch.height, patch.width), align_corners=False)
    rgb, alpha = _resample(patch, mapping(ident))
    return Patch(rgb[0], alpha[0])


# -- cropping and occlusion -------------------------------------------------------------------


def toroidal_crop(patch, crop_w=None, crop_h=None, origin=None, rng=None):
    """Crop from the infinite tiling of ``patch``.

    Output pixel (i, j) is patch pixel ((origin_x + i) mod W, (origin_y + j) mod H).
    ``crop_w``/``crop_h`` default to the patch size; ``origin=None`` draws a
    uniform origin from ``rng``.
    """
    h, w = patch.size
    crop_w = w if crop_w is None else int(crop_w)
    crop_h = h if crop_h is None else int(crop_h)
    if crop_w < 1 or crop_h < 1:
        raise ValueError("crop size must be >= 1")
    if origin is None:
        origin = (int(rng.integers(0, w)), int(rng.integers(0, h)))
    ox, oy = origin
    xs = torch.remainder(torch.arange(crop_w) + int(ox), w)
    ys = torch.remainder(torch.arange(crop_h) + int(oy), h)
    return Patch(patch.rgb[:, ys][:, :, xs], patch.alpha[:, ys][:, :, xs])


def occlusion_mask(height, width, ratio, rng):
    """Binary keep-mask with exactly round(ratio * H * W) erased pixels in one near-square block."""
    if not 0 <= ratio <= 1:
        raise ValueError(f"occlusion ratio must lie in [0, 1], got {ratio}")
    mask = np.ones((height, width), dtype=np.uint8)
    target = int(round(ratio * height * width))
    if target == 0:
        return mask
    side = min(max(int(math.ceil(math.sqrt(target))), -(-target // height)), width)
    rows = int(math.ceil(target / side))
    y = int(rng.integers(0, height - rows + 1))
    x = int(rng.integers(0, width - side + 1))
    block = np.ones(rows * side, dtype=np.uint8)
    block[:target] = 0
    mask[y:y + rows, x:x + side] = block.reshape(rows, side)
    return mask


def occlude(patch, ratio, rng):
    """Evaluation-time occlusion: zero alpha over a fraction ``ratio`` of the patch."""
    if ratio == 0:
        return patch
    mask = torch.from_numpy(occlusion_mask(patch.height, patch.width, ratio, rng)).to(patch.alpha)
    return Patch(patch.rgb, patch.alpha * mask.unsqueeze(0))


# -- placement --------------------------------------------------------------------------------


def placement_theta(box, image_size, patch_size, rule, angle=0.0, scale=1.0, dtype=torch.float32):
    """Affine matrix mapping normalized image coords to normalized patch coords."""
    x1, y1, x2, y2 = (float(v) for v in box)
    img_h, img_w = image_size
    ph, pw = patch_size
    side = rule.relative_size * max(x2 - x1, y2 - y1) * scale
    sw, sh = (side, side * ph / pw) if pw >= ph else (side * pw / ph, side)
    cx, cy = (x1 + x2) / 2, y1 + rule.anchor * (y2 - y1)
    t = math.radians(angle)
    c, s = math.cos(t), math.sin(t)
    a, b = img_w / 2, img_h / 2
    return torch.tensor([
        [c * a / (sw / 2), -s * b / (sw / 2), (c * (a - cx) - s * (b - cy)) / (sw / 2)],
        [s * a / (sh / 2), c * b / (sh / 2), (s * (a - cx) + c * (b - cy)) / (sh / 2)],
    ], dtype=dtype)


def attach(images, patches, boxes, rule=None, spec=None, rng=None, tps=None):
    """Composite the (transformed) patch onto every box of every image.

    images:  (B, 3, H, W) or (3, H, W) tensor.
    patches: one :class:`Patch` shared by all images, or a list with one per image.
    boxes:   per image an (M, 4) array of pixel xyxy person boxes.
    spec:    TransformSpec for per-box EoT (and TPS, unless ``tps=False``);
             ``None`` attaches the raw patch.
    """
    rule = rule or PlacementRule()
    single = images.dim() == 3
    if single:
        images = images.unsqueeze(0)
        boxes = [boxes]
    if isinstance(patches, Patch):
        patches = [patches] * images.shape[0]
    img_h, img_w = images.shape[-2:]

    layers, owners, grids = [], [], []
    for i, (patch, img_boxes) in enumerate(zip(patches, boxes)):
        for box in np.asarray(img_boxes, dtype=np.float64).reshape(-1, 4):
            if spec is not None:
                draw = sample_eot(spec, patch.size, rng, tps=tps)
                rgb = photometric(patch.rgb, draw)
            else:
                draw, rgb = EotDraw(), patch.rgb
            theta = placement_theta(box, (img_h, img_w), patch.size, rule,
                                    draw.angle, draw.scale, dtype=images.dtype)
            grid = F.affine_grid(theta.unsqueeze(0), (1, 3, img_h, img_w), align_corners=False)[0]
            if draw.tps_dst is not None:
                # only points near the patch footprint can land inside it
                near = grid.abs().amax(-1) <= 1.0 + TPS_MARGIN
                grid = grid.clone()
                grid[near] = tps_sampling_map(control_grid(spec.tps_grid), draw.tps_dst)(grid[near])
            layers.append(torch.cat([rgb * patch.alpha, patch.alpha], 0))
            grids.append(grid)
            owners.append(i)
    if not layers:
        return images[0] if single else images

    if len({tuple(l.shape) for l in layers}) == 1:
        sampled = F.grid_sample(torch.stack(layers).to(images.dtype), torch.stack(grids),
                                mode="bilinear", padding_mode="zeros", align_corners=False)
    else:
        sampled = [F.grid_sample(l.unsqueeze(0).to(images.dtype), g.unsqueeze(0), mode="bilinear",
                                 padding_mode="zeros", align_corners=False)[0]
                   for l, g in zip(layers, grids)]
    out = list(images.unbind(0))
    for layer, i in zip(sampled, owners):
        out[i] = layer[:3] + (1.0 - layer[3:]) * out[i]
    out = torch.stack(out)
    return out[0] if single else out
