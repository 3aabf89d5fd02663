"""Attack objective: accuracy-score box selection, NPS, TV and their weighted sum."""
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import torch

from .detector.base import box_iou
from .patch import Patch

TV_EPS = 1e-8
NPS_EPS = 1e-12


@dataclass
class ObjectiveWeights:
    w: float = 3.0
    alpha: float = 0.01
    beta: float = 2.5

    def __post_init__(self):
        for name in ("w", "alpha", "beta"):
            v = float(getattr(self, name))
            if v != v or v in (float("inf"), float("-inf")):
                raise ValueError(f"objective weight {name} must be finite")
            setattr(self, name, v)


@dataclass
class LossBreakdown:
    l_acc: torch.Tensor
    l_nps: torch.Tensor
    l_tv: torch.Tensor
    total: torch.Tensor
    weights: ObjectiveWeights
    evaded: int = 0
    images: int = 0

    def as_dict(self):
        return {"l_acc": self.l_acc.item(), "l_nps": self.l_nps.item(), "l_tv": self.l_tv.item(),
                "total": self.total.item(), "alpha": self.weights.alpha,
                "beta": self.weights.beta, "w": self.weights.w,
                "evaded": self.evaded, "images": self.images}


@dataclass
class Selection:
    loss: torch.Tensor
    index: Optional[int]

    @property
    def evaded(self):
        return self.index is None


def select_box(obj, iou, w=3.0):
    """Pick the box with the highest accuracy score ``w * iou + obj``.

    ``obj`` carries gradients; ``iou`` is used only to rank.  Returns a
    :class:`Selection` whose loss is the selected objectness, or zero with
    ``index=None`` when there are no candidates.  Ties go to the lowest index.
    """
    obj = torch.as_tensor(obj)
    if obj.numel() == 0:
        return Selection(obj.new_zeros(()) if obj.is_floating_point() else torch.zeros(()), None)
    iou = torch.as_tensor(iou, dtype=obj.dtype, device=obj.device)
    score = w * iou.detach() + obj.detach()
    k = int(torch.argmax(score))
    return Selection(obj[k], k)


def accuracy_select(detections: Sequence[Tuple[float, float]], w=3.0) -> Selection:
    """List form of :func:`select_box`: ``detections`` is a list of ``(obj_k, iou_k)``."""
    if len(detections) == 0:
        return Selection(torch.zeros((), dtype=torch.float64), None)
    obj = torch.as_tensor([d[0] for d in detections], dtype=torch.float64)
    iou = torch.as_tensor([d[1] for d in detections], dtype=torch.float64)
    return select_box(obj, iou, w)


def max_obj_select(obj):
    """The object-score criterion of earlier attacks: minimize the most confident box."""
    obj = torch.as_tensor(obj)
    if obj.numel() == 0:
        return Selection(torch.zeros(()), None)
    k = int(torch.argmax(obj.detach()))
    return Selection(obj[k], k)


def image_candidates(pred, truths, threshold=0.1, mode="obj_cls"):
    """Per image ``(obj, iou)`` tensors for boxes whose score exceeds ``threshold``.

    ``truths`` is a list of (M_i, 4) xyxy ground-truth arrays.  IoUs are the
    best IoU of each candidate against that image's ground truth, detached.
    """
    scores = pred.obj_scores(mode)
    out = []
    for b, gt in enumerate(truths):
        keep = scores[b].detach() > threshold
        obj = scores[b][keep]
        boxes = pred.boxes[b][keep].detach()
        gt = torch.as_tensor(gt, dtype=torch.float64).reshape(-1, 4)
        if len(gt) == 0 or len(obj) == 0:
            iou = torch.zeros(len(obj), dtype=obj.dtype)
        else:
            iou = box_iou(boxes, gt).max(dim=1).values.to(obj.dtype)
        out.append((obj, iou))
    return out


# -- printability and smoothness ------------------------------------------------------------


def load_palette(path=None):
    """Read a palette file: one ``r g b`` triplet in [0, 1] per line, ``#`` comments."""
    if path is None:
        text = resources.files("depatch").joinpath("data/palette.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    colors = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 3:
            raise ValueError(f"palette line {lineno}: expected 3 values, got {len(parts)}")
        rgb = [float(p) for p in parts]
        if not all(0.0 <= v <= 1.0 for v in rgb):
            raise ValueError(f"palette line {lineno}: values must lie in [0, 1]")
        colors.append(rgb)
    if not colors:
        raise ValueError("palette is empty")
    return torch.tensor(colors, dtype=torch.float32)


def _rgb_alpha(patch):
    if isinstance(patch, Patch):
        return patch.rgb, patch.alpha
    rgb = torch.as_tensor(patch)
    return rgb, torch.ones_like(rgb[:1])


def nps_loss(patch, palette):
    """Mean over kept pixels of the Euclidean distance to the nearest palette color."""
    rgb, alpha = _rgb_alpha(patch)
    palette = torch.as_tensor(palette, dtype=rgb.dtype, device=rgb.device).reshape(-1, 3)
    if len(palette) == 0:
        raise ValueError("palette is empty")
    diff = rgb.unsqueeze(0) - palette[:, :, None, None]           # (P, 3, H, W)
    dist = torch.sqrt((diff ** 2).sum(1) + NPS_EPS).min(0).values  # (H, W)
    weight = alpha[0]
    total = weight.sum()
    if float(total) == 0.0:
        return (dist * weight).sum()
    return (dist * weight).sum() / total


def tv_loss(rgb, alpha=None):
    """Isotropic total variation of a (C, H, W) tensor, summed over channels, per pixel.

    With ``alpha``, a term only counts when the pixel and its right and lower
    neighbors are all kept, so erased pixels neither contribute nor receive
    gradient and mask borders are not penalized as edges.
    """
    if isinstance(rgb, Patch):
        rgb, alpha = rgb.rgb, rgb.alpha if alpha is None else alpha
    if rgb.shape[-1] < 2 or rgb.shape[-2] < 2:
        raise ValueError("tv_loss needs at least a 2x2 patch")
    dx = rgb[..., :-1, :-1] - rgb[..., :-1, 1:]
    dy = rgb[..., :-1, :-1] - rgb[..., 1:, :-1]
    terms = torch.sqrt(dx ** 2 + dy ** 2 + TV_EPS)
    if alpha is not None:
        a = alpha.reshape(rgb.shape[-2:])
        terms = terms * (a[:-1, :-1] * a[:-1, 1:] * a[1:, :-1])
    n_pixels = rgb.shape[-1] * rgb.shape[-2]
    return terms.sum() / n_pixels


def total_objective(patch, candidates: List[Tuple[torch.Tensor, torch.Tensor]], weights=None,
                    palette=None, selection="acc"):
    """Weighted attack objective for one batch.

    ``patch`` is the patch as attached (alpha = decoupling mask), or a list of
    differently masked copies, in which case NPS and TV are averaged.  NPS is taken
    over kept pixels and TV over kept neighborhoods only, so erased pixels
    receive no gradient.  ``candidates`` holds one ``(obj, iou)`` pair
    per image; L_acc is the mean selected objectness over images that still
    have a candidate box.  ``selection="max_obj"`` swaps in the plain
    object-score criterion.
    """
    weights = weights or ObjectiveWeights()
    if palette is None:
        palette = load_palette()
    patches = list(patch) if isinstance(patch, (list, tuple)) else [patch]
    picked = []
    for obj, iou in candidates:
        sel = select_box(obj, iou, weights.w) if selection == "acc" else max_obj_select(obj)
        if not sel.evaded:
            picked.append(sel.loss)
    if picked:
        l_acc = torch.stack(picked).mean()
    else:
        l_acc = _rgb_alpha(patches[0])[0].new_zeros(())
    l_nps, l_tv = 0.0, 0.0
    for p in patches:
        rgb, alpha = _rgb_alpha(p)
        l_nps = l_nps + nps_loss(Patch(rgb, alpha), palette) / len(patches)
        l_tv = l_tv + tv_loss(rgb, alpha) / len(patches)
    total = l_acc + weights.alpha * l_nps + weights.beta * l_tv
    return LossBreakdown(l_acc, l_nps, l_tv, total, weights,
                         evaded=len(candidates) - len(picked), images=len(candidates))
