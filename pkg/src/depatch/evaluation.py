"""Digital evaluation: AP against pseudo ground truth under several attack settings.

Columns of a report:

    ORIGINAL   raw patch attached, no transformation
    EOT        patch attached through the EoT stack
    TC_MEAN    toroidal crop of the patch, then EoT; mean AP over repeats
    OC(r)      occlusion of a fraction r of the patch, then EoT
    JPEG       EoT-attached image re-encoded as JPEG
    Overall    mean of every column except ORIGINAL

Ground truth comes from the detector itself: post-NMS clean-image detections
scoring above ``gt_confidence``.  Every image draws its transformations from
its own stream keyed by (seed, setting, repeat, image index), so results do
not depend on batching or on the number of workers, and OC(0) reproduces EOT
exactly.
"""
import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .detector.base import Detection, iou, nms
from .patch import Patch, resize_to_area
from .rng import stream
from .transforms import PlacementRule, TransformSpec, attach, occlude, toroidal_crop

log = logging.getLogger(__name__)

COLUMN_KINDS = ("original", "eot", "tc_mean", "oc", "jpeg")


@dataclass
class EvalProtocol:
    columns: tuple = COLUMN_KINDS
    oc_ratios: tuple = (0.1, 0.2, 0.3)
    repeats: int = 10                    # TC_MEAN resamples
    iou_threshold: float = 0.5
    gt_confidence: float = 0.5
    score_threshold: float = 0.0         # 0 keeps every post-NMS box (standard AP)
    jpeg_quality: int = 75
    transforms: TransformSpec = field(default_factory=TransformSpec)
    placement: PlacementRule = field(default_factory=PlacementRule)
    obj_score_mode: str = "obj_cls"
    seed: int = 0
    batch_size: int = 32
    jobs: int = 1

    def __post_init__(self):
        if isinstance(self.transforms, dict):
            self.transforms = TransformSpec(**self.transforms)
        if isinstance(self.placement, dict):
            self.placement = PlacementRule(**self.placement)
        self.columns = tuple(c.lower() for c in self.columns)
        bad = [c for c in self.columns if c not in COLUMN_KINDS]
        if bad:
            raise ValueError(f"unknown columns {bad}; choose from {COLUMN_KINDS}")
        self.oc_ratios = tuple(float(r) for r in self.oc_ratios)
        if any(not 0 <= r <= 1 for r in self.oc_ratios):
            raise ValueError("occlusion ratios must lie in [0, 1]")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not 0 < self.iou_threshold <= 1:
            raise ValueError("iou_threshold must lie in (0, 1]")
        if not 1 <= self.jpeg_quality <= 100:
            raise ValueError("jpeg_quality must lie in [1, 100]")
        if self.jobs < 1 or self.batch_size < 1:
            raise ValueError("jobs and batch_size must be >= 1")

    def column_names(self):
        names = []
        for c in self.columns:
            if c == "oc":
                names += [oc_name(r) for r in self.oc_ratios]
            else:
                names.append(c.upper())
        return names

    def to_dict(self):
        d = asdict(self)
        d["transforms"] = self.transforms.to_dict()
        d["columns"] = list(self.columns)
        d["oc_ratios"] = list(self.oc_ratios)
        return d


def oc_name(ratio):
    return f"OC({ratio:g})"


@dataclass
class EvalReport:
    columns: Dict[str, float]
    overall: Optional[float]
    images: int
    excluded: int
    gt_boxes: int
    tc_range: Optional[tuple] = None
    flags: List[str] = field(default_factory=list)
    detections: Dict[str, list] = field(default_factory=dict)
    protocol: dict = field(default_factory=dict)

    def to_dict(self):
        return {"columns": self.columns, "overall": self.overall, "images": self.images,
                "excluded": self.excluded, "gt_boxes": self.gt_boxes,
                "tc_range": list(self.tc_range) if self.tc_range else None,
                "flags": self.flags, "protocol": self.protocol}

    def write(self, out_dir, stem="report"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(self.columns) + ["Overall"])
            w.writerow([_fmt(v) for v in self.columns.values()] + [_fmt(self.overall)])
        (out_dir / f"{stem}_detections.json").write_text(json.dumps(self.detections, sort_keys=True))
        return out_dir / f"{stem}.csv"


def _fmt(v):
    return "n/a" if v is None else f"{v:.6f}"


# -- average precision ------------------------------------------------------------------------


def match_detections(detections, truths, iou_threshold=0.5):
    """Greedy matching in descending score order (stable for ties).

    ``detections``: list over images of ``(score, box)`` lists; ``truths``: list
    over images of box lists.  Each detection is compared with the ground truth
    box it overlaps most; it is a true positive if that IoU reaches the
    threshold and the box is still unclaimed.  Returns ``[(score, is_tp)]`` in
    ranking order.
    """
    flat = [(float(s), i, box) for i, dets in enumerate(detections) for s, box in dets]
    flat.sort(key=lambda t: -t[0])
    claimed = [set() for _ in truths]
    out = []
    for score, i, box in flat:
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"detection score {score} outside [0, 1]")
        best, best_j = -1.0, -1
        for j, gt in enumerate(truths[i]):
            v = iou(box, gt)
            if v > best:
                best, best_j = v, j
        tp = best >= iou_threshold and best_j not in claimed[i]
        if tp:
            claimed[i].add(best_j)
        out.append((score, tp))
    return out


def average_precision(detections, truths, iou_threshold=0.5):
    """All-point interpolated AP; ``None`` when there is no ground truth at all.

    Precision is made monotone from the right and integrated over every recall
    step.  Arithmetic is exact (rationals), so the result is the correctly
    rounded value of the integral.
    """
    npos = sum(len(t) for t in truths)
    if npos == 0:
        return None
    ranked = match_detections(detections, truths, iou_threshold)
    tp = fp = 0
    prec, rec_steps = [], []
    for _, is_tp in ranked:
        tp += is_tp
        fp += not is_tp
        prec.append(Fraction(tp, tp + fp))
        rec_steps.append(bool(is_tp))
    # monotone envelope from the right
    for k in range(len(prec) - 2, -1, -1):
        prec[k] = max(prec[k], prec[k + 1])
    ap = sum((p for p, step in zip(prec, rec_steps) if step), Fraction(0)) / npos
    return float(ap)


# -- ground truth and detection ---------------------------------------------------------------


def _detect(detector, images, threshold, mode):
    pred = detector.predict(images)
    dets = pred.detections(threshold, mode)
    return [nms(d, detector.nms_iou) for d in dets]


def pseudo_ground_truth(detector, images, gt_confidence=0.5, mode="obj_cls", batch_size=32):
    """Per image list of xyxy tuples of confident clean detections (post NMS)."""
    out = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            for dets in _detect(detector, images[start:start + batch_size], gt_confidence, mode):
                out.append([d.box.as_tuple() for d in dets])
    return out


def jpeg_roundtrip(images, quality=75):
    """Encode every image as baseline JPEG at ``quality`` and decode it again."""
    out = []
    for img in images:
        arr = (img.clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255).round().astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        with Image.open(buf) as im:
            dec = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        out.append(torch.from_numpy(dec).permute(2, 0, 1))
    return torch.stack(out).to(images.dtype)


# -- evaluation -------------------------------------------------------------------------------


def _prepare_patch(patch, kind, ratio, protocol, repeat, index):
    if kind == "tc_mean":
        return toroidal_crop(patch, rng=stream(protocol.seed, "eval", "toroidal", repeat, index))
    if kind == "oc":
        return occlude(patch, ratio, stream(protocol.seed, "eval", "occlusion", repeat, index))
    return patch


def _attacked_images(patch, images, truths, offset, kind, ratio, protocol, repeat):
    out = []
    for k in range(images.shape[0]):
        index = offset + k
        p = _prepare_patch(patch, kind, ratio, protocol, repeat, index)
        if kind == "original":
            img = attach(images[k], p, truths[k], protocol.placement)
        else:
            # EOT, TC, OC and JPEG share the transform stream of each image
            img = attach(images[k], p, truths[k], protocol.placement, protocol.transforms,
                         stream(protocol.seed, "eval", "eot", repeat, index))
        out.append(img)
    out = torch.stack(out)
    if kind == "jpeg":
        out = jpeg_roundtrip(out, protocol.jpeg_quality)
    return out


def column_ap(patch, detector, images, truths, kind, protocol, ratio=0.0, repeat=0):
    """AP of one setting; ``truths`` must already exclude images without ground truth."""
    chunks = [(s, min(s + protocol.batch_size, images.shape[0]))
              for s in range(0, images.shape[0], protocol.batch_size)]

    def run(chunk):
        s, e = chunk
        with torch.no_grad():
            adv = _attacked_images(patch, images[s:e], truths[s:e], s, kind, ratio, protocol, repeat)
            return _detect(detector, adv, protocol.score_threshold, protocol.obj_score_mode)

    if protocol.jobs > 1:
        with ThreadPoolExecutor(protocol.jobs) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    dets = [d for part in parts for d in part]
    scored = [[(x.obj_score, x.box.as_tuple()) for x in d] for d in dets]
    return average_precision(scored, truths, protocol.iou_threshold), scored


def evaluate(patch, detector, dataset, protocol=None, tc_trained=None):
    """Run every column of ``protocol`` for ``patch`` on ``dataset``."""
    protocol = protocol or EvalProtocol()
    images = dataset.images if hasattr(dataset, "images") else dataset
    truths_all = pseudo_ground_truth(detector, images, protocol.gt_confidence,
                                     protocol.obj_score_mode, protocol.batch_size)
    keep = [i for i, t in enumerate(truths_all) if t]
    images = images[keep]
    truths = [truths_all[i] for i in keep]
    report = EvalReport(columns={}, overall=None, images=len(keep),
                        excluded=len(truths_all) - len(keep), gt_boxes=sum(len(t) for t in truths),
                        protocol=protocol.to_dict())
    if report.excluded:
        report.flags.append(f"{report.excluded} images without confident clean detections excluded")
    if not keep:
        report.flags.append("no ground truth; AP not applicable")
        for name in protocol.column_names():
            report.columns[name] = None
        return report

    for kind in protocol.columns:
        if kind == "oc":
            for r in protocol.oc_ratios:
                ap, dets = column_ap(patch, detector, images, truths, "oc", protocol, ratio=r)
                report.columns[oc_name(r)] = ap
                report.detections[oc_name(r)] = dets
        elif kind == "tc_mean":
            if tc_trained is False:
                report.flags.append("TC_MEAN evaluated on a patch not trained with toroidal cropping")
            aps = []
            for rep in range(protocol.repeats):
                ap, dets = column_ap(patch, detector, images, truths, "tc_mean", protocol, repeat=rep)
                aps.append(ap)
                if rep == 0:
                    report.detections["TC_MEAN"] = dets
            report.columns["TC_MEAN"] = float(np.mean(aps))
            report.tc_range = (min(aps), max(aps))
        else:
            ap, dets = column_ap(patch, detector, images, truths, kind, protocol)
            report.columns[kind.upper()] = ap
            report.detections[kind.upper()] = dets
    report.overall = overall(report.columns)
    if report.overall is None:
        report.flags.append("Overall undefined: no column besides ORIGINAL")
    return report


def tiling_variation(patch, tiles=2):
    """Mean neighbour difference across tile seams vs inside tiles, for a ``tiles x tiles`` tiling.

    Each horizontally or vertically adjacent pixel pair contributes the sum
    over channels of its absolute difference.  Returns ``(seam, interior)``; a
    seamlessly expandable patch has ``seam`` close to ``interior``.
    """
    rgb = patch.rgb if isinstance(patch, Patch) else patch
    rgb = rgb.detach().to(torch.float64)
    h, w = rgb.shape[-2:]
    big = rgb.repeat(1, tiles, tiles)
    dx = (big[:, :, 1:] - big[:, :, :-1]).abs().sum(0)       # pair (x, x+1)
    dy = (big[:, 1:, :] - big[:, :-1, :]).abs().sum(0)       # pair (y, y+1)
    seam_x = torch.zeros(dx.shape[-1], dtype=torch.bool)
    seam_x[w - 1::w] = True
    seam_y = torch.zeros(dy.shape[0], dtype=torch.bool)
    seam_y[h - 1::h] = True
    seam = torch.cat([dx[:, seam_x].flatten(), dy[seam_y, :].flatten()])
    inner = torch.cat([dx[:, ~seam_x].flatten(), dy[~seam_y, :].flatten()])
    return float(seam.mean()), float(inner.mean())


def overall(columns):
    vals = [v for k, v in columns.items() if k != "ORIGINAL" and v is not None]
    return float(np.mean(vals)) if vals else None


def clean_ap(detector, dataset, protocol=None):
    """AP of the unattacked images against their own pseudo ground truth."""
    protocol = protocol or EvalProtocol()
    images = dataset.images if hasattr(dataset, "images") else dataset
    truths = pseudo_ground_truth(detector, images, protocol.gt_confidence, protocol.obj_score_mode,
                                 protocol.batch_size)
    with torch.no_grad():
        dets = []
        for s in range(0, images.shape[0], protocol.batch_size):
            dets += _detect(detector, images[s:s + protocol.batch_size], protocol.score_threshold,
                            protocol.obj_score_mode)
    scored = [[(x.obj_score, x.box.as_tuple()) for x in d] for d in dets]
    return average_precision(scored, truths, protocol.iou_threshold)


def degradation_sweep(patch, detector, dataset, ratios, protocol=None, csv_path=None):
    """AP under occlusion for each ratio; returns ``[(ratio, AP)]`` and optionally writes CSV."""
    ratios = [float(r) for r in ratios]
    if any(not 0 <= r <= 1 for r in ratios) or ratios != sorted(ratios):
        raise ValueError("ratios must be ascending values in [0, 1]")
    protocol = protocol or EvalProtocol()
    proto = EvalProtocol(**{**_protocol_fields(protocol), "columns": ("oc",), "oc_ratios": tuple(ratios)})
    report = evaluate(patch, detector, dataset, proto)
    curve = [(r, report.columns[oc_name(r)]) for r in ratios]
    if csv_path is not None:
        write_curve_csv(csv_path, {"patch": curve})
    return curve


def write_curve_csv(path, curves):
    """``curves``: label -> [(ratio, AP)]; one row per (label, ratio)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "ratio", "ap"])
        for label, curve in curves.items():
            for r, ap in curve:
                w.writerow([label, f"{r:g}", _fmt(ap)])
    return path


def _protocol_fields(protocol):
    return {k: getattr(protocol, k) for k in protocol.__dataclass_fields__}


def attack_success_rate(frames, truths, conf_threshold=0.5, iou_threshold=0.5):
    """Fraction of frames in which the person is not correctly detected.

    A frame counts as correctly detected when some detection has confidence
    >= ``conf_threshold`` and IoU >= ``iou_threshold`` with the frame's ground
    truth.  ``frames`` holds per-frame lists of :class:`Detection` or
    ``(confidence, box)`` pairs; ``truths`` one box (or list of boxes) per frame.
    """
    if len(frames) == 0:
        raise ValueError("attack_success_rate needs at least one frame")
    if len(frames) != len(truths):
        raise ValueError("frames and truths differ in length")
    fooled = 0
    for dets, gt in zip(frames, truths):
        gts = [gt] if len(gt) == 4 and not hasattr(gt[0], "__len__") else list(gt)
        hit = False
        for d in dets:
            conf, box = (d.obj_score, d.box) if isinstance(d, Detection) else d
            if conf >= conf_threshold and max((iou(box, g) for g in gts), default=0.0) >= iou_threshold:
                hit = True
                break
        fooled += not hit
    return fooled / len(frames)


# -- baseline comparison ----------------------------------------------------------------------

COMPARISON_ROWS = ("vanilla", "has", "cutout", "gridmask", "random_erasing", "decouple")


def comparison_config(base, row):
    """Derive the training config of one comparison row from ``base``."""
    from dataclasses import replace
    from .scheduler import StrategyMode
    if row == "vanilla":
        return replace(base, mask_mode="none", strategy=StrategyMode.none())
    if row == "decouple":
        return replace(base, mask_mode="decouple")
    return replace(base, mask_mode=row, strategy=StrategyMode.none(), border_shift=False)


def baseline_comparison(base_config, train_set, test_set, detector, protocol=None, seeds=(0,),
                        rows=COMPARISON_ROWS, area=90000, out_dir=None, progress=None,
                        columns=("eot", "oc")):
    """Train one patch per row and evaluate it; returns ``{row: [EvalReport per seed]}``.

    ``area`` rescales every trained patch to that many pixels before
    evaluation (``None`` keeps the trained size).  The table reports EOT and
    the occlusion columns, so Overall is their mean; pass ``columns=None`` to
    keep the columns of ``protocol``.
    """
    from dataclasses import replace
    from .trainer import run_training
    protocol = protocol or EvalProtocol()
    if columns is not None:
        protocol = EvalProtocol(**{**_protocol_fields(protocol), "columns": tuple(columns)})
    table = {}
    for row in rows:
        table[row] = []
        for seed in seeds:
            cfg = replace(comparison_config(base_config, row), seed=seed)
            run_dir = Path(out_dir) / f"{row}_seed{seed}" if out_dir else None
            patch, _ = run_training(cfg, train_set, detector, out_dir=run_dir)
            if area:
                patch = resize_to_area(patch, area)
            report = evaluate(patch, detector, test_set, protocol, tc_trained=cfg.tc_training)
            table[row].append(report)
            if progress:
                progress(row, seed, report)
    return table


def comparison_rows(table):
    """Mean over seeds of every column, one dict per row, in table order."""
    rows = []
    for name, reports in table.items():
        cols = {}
        for rep in reports:
            for k, v in rep.columns.items():
                cols.setdefault(k, []).append(v)
        row = {"row": name}
        row.update({k: float(np.mean(v)) for k, v in cols.items()})
        row["Overall"] = float(np.mean([r.overall for r in reports]))
        rows.append(row)
    return rows


def write_table_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0].keys()) if rows else ["row"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([r[k] if k == "row" else _fmt(r[k]) for k in keys])
    return path
