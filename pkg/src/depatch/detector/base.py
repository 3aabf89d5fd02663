"""Box types, IoU, NMS and the differentiable detector contract."""
import abc
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch

OBJ_SCORE_MODES = ("obj_cls", "obj")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels, (x1, y1) top-left, (x2, y2) bottom-right."""
    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def from_cxcywh(cls, cx, cy, w, h, width=1.0, height=1.0):
        """Build from a center/size box; pass the image size to denormalize."""
        return cls((cx - w / 2) * width, (cy - h / 2) * height,
                   (cx + w / 2) * width, (cy + h / 2) * height)

    def to_cxcywh(self, width=1.0, height=1.0):
        return ((self.x1 + self.x2) / 2 / width, (self.y1 + self.y2) / 2 / height,
                (self.x2 - self.x1) / width, (self.y2 - self.y1) / height)

    def clip(self, width, height):
        return BBox(min(max(self.x1, 0.0), width), min(max(self.y1, 0.0), height),
                    min(max(self.x2, 0.0), width), min(max(self.y2, 0.0), height))

    @property
    def area(self):
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)

    @property
    def valid(self):
        return self.x1 < self.x2 and self.y1 < self.y2

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class Detection:
    box: BBox
    objectness: float
    class_probs: tuple
    obj_score: float


def iou(a, b):
    """IoU of two boxes (BBox or xyxy sequences); zero-area boxes give 0."""
    a = a.as_tuple() if isinstance(a, BBox) else tuple(a)
    b = b.as_tuple() if isinstance(b, BBox) else tuple(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    if area_a <= 0 or area_b <= 0 or iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def best_iou(box, truths):
    """Max IoU of ``box`` against a list of ground-truth boxes (0 for an empty list)."""
    return max((iou(box, t) for t in truths), default=0.0)


def box_iou(a, b):
    """Pairwise IoU matrix between ``(N, 4)`` and ``(M, 4)`` xyxy tensors."""
    a = torch.as_tensor(a, dtype=torch.float64).reshape(-1, 4)
    b = torch.as_tensor(b, dtype=torch.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    out = torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))
    degenerate = (area_a[:, None] <= 0) | (area_b[None, :] <= 0)
    return out.masked_fill(degenerate, 0.0)


def nms(detections, iou_threshold=0.5):
    """Greedy non-maximum suppression by descending ``obj_score``.

    A detection is dropped when its IoU with an already kept one exceeds the
    threshold.  Ties keep input order.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    order = sorted(range(len(detections)), key=lambda i: -detections[i].obj_score)
    kept = []
    for i in order:
        d = detections[i]
        if all(iou(d.box, k.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


@dataclass
class Predictions:
    """Dense, differentiable detector output for a batch.

    boxes: (B, K, 4) xyxy pixels; objectness: (B, K); class_probs: (B, K, C).
    """
    boxes: torch.Tensor
    objectness: torch.Tensor
    class_probs: torch.Tensor
    person_class: int = 0

    def obj_scores(self, mode="obj_cls"):
        if mode == "obj_cls":
            return self.objectness * self.class_probs[..., self.person_class]
        if mode == "obj":
            return self.objectness
        raise ValueError(f"obj_score_mode must be one of {OBJ_SCORE_MODES}, got {mode!r}")

    def detections(self, threshold=0.1, mode="obj_cls") -> List[List[Detection]]:
        """Per-image lists of person detections whose score exceeds ``threshold``."""
        scores = self.obj_scores(mode).detach().cpu().numpy()
        boxes = self.boxes.detach().cpu().numpy()
        obj = self.objectness.detach().cpu().numpy()
        probs = self.class_probs.detach().cpu().numpy()
        out = []
        for b in range(scores.shape[0]):
            idx = np.nonzero(scores[b] > threshold)[0]
            out.append([Detection(BBox(*map(float, boxes[b, k])), float(obj[b, k]),
                                  tuple(float(p) for p in probs[b, k]), float(scores[b, k]))
                        for k in idx])
        return out


class DetectorAdapter(abc.ABC):
    """What the attack needs from a detector.

    ``predict`` maps an image batch ``(B, 3, H, W)`` in [0, 1] to dense
    :class:`Predictions` with gradients flowing back to the pixels.  It must be
    deterministic in inference mode.
    """
    name: str = "abstract"
    input_size: Sequence[int] = (160, 160)  # (height, width)
    person_class: int = 0
    nms_iou: float = 0.5

    @abc.abstractmethod
    def predict(self, images: torch.Tensor) -> Predictions:
        ...

    def check_input(self, images):
        if images.dim() != 4 or tuple(images.shape[-2:]) != tuple(self.input_size):
            raise ValueError(
                f"{self.name} expects (B, 3, {self.input_size[0]}, {self.input_size[1]}) "
                f"input, got {tuple(images.shape)}")

    def detect(self, images, threshold=0.1, mode="obj_cls", apply_nms=False):
        with torch.no_grad():
            dets = self.predict(images).detections(threshold, mode)
        if apply_nms:
            dets = [nms(d, self.nms_iou) for d in dets]
        return dets


_REGISTRY = {}


def register_detector(name):
    def deco(factory):
        _REGISTRY[name] = factory
        return factory
    return deco


def load_detector(name, **kwargs) -> DetectorAdapter:
    """Instantiate a registered detector adapter by name."""
    if name not in _REGISTRY:
        raise KeyError(f"unknown detector {name!r}; registered: {sorted(_REGISTRY)}")
    return _REGISTRY[name](**kwargs)


def registered_detectors():
    return sorted(_REGISTRY)
