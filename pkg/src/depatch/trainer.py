"""Patch optimization loop.

One step: take the current patch, erase blocks (decoupling mask with border
shift, a baseline mask, or nothing), optionally take a toroidal crop, attach
it with per-box EoT/TPS to every labeled person, run the detector, and take
an Adam step on the attack objective.  RGB is clamped to [0, 1] after the
step.

Randomness for step ``s`` of epoch ``e`` comes from named streams keyed by
``(seed, name, e, s)``, so a run resumed from a checkpoint replays exactly
the draws of an uninterrupted run.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .detector import load_detector
from .masks import BaselineMaskMode, border_shift, decouple_mask, sample_baseline_mask, sample_shift
from .objective import ObjectiveWeights, image_candidates, load_palette, total_objective
from .patch import Patch, save_patch
from .rng import stream
from .scheduler import NO_MASK, StrategyMode, schedule
from .transforms import PlacementRule, TransformSpec, attach, toroidal_crop

log = logging.getLogger(__name__)

MASK_MODES = ("decouple", "none", "has", "cutout", "gridmask", "random_erasing")


@dataclass
class TrainConfig:
    patch_size: tuple = (300, 300)          # (height, width)
    epochs: int = 2000
    lr: float = 0.03
    betas: tuple = (0.9, 0.999)
    batch_size: int = 8
    batches_per_epoch: Optional[int] = None
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    strategy: StrategyMode = field(default_factory=StrategyMode)
    transforms: TransformSpec = field(default_factory=TransformSpec)
    placement: PlacementRule = field(default_factory=PlacementRule)
    tc_training: bool = False
    border_shift: bool = True
    mask_mode: str = "decouple"
    baseline_params: dict = field(default_factory=dict)
    mask_per_image: bool = False
    selection: str = "acc"                  # "acc" (accuracy score) or "max_obj"
    obj_score_mode: str = "obj_cls"
    candidate_threshold: float = 0.1
    param_mode: str = "clamp"               # "clamp" or "sigmoid"
    init_mean: float = 0.5
    init_std: float = 0.25
    seed: int = 0
    checkpoint_every: int = 0
    detector: str = "toy"
    palette: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = ObjectiveWeights(**self.weights)
        if isinstance(self.strategy, dict):
            self.strategy = StrategyMode(**self.strategy)
        if isinstance(self.transforms, dict):
            self.transforms = TransformSpec(**self.transforms)
        if isinstance(self.placement, dict):
            self.placement = PlacementRule(**self.placement)
        self.patch_size = tuple(int(v) for v in self.patch_size)
        self.betas = tuple(float(b) for b in self.betas)
        if min(self.patch_size) < 2:
            raise ValueError("patch_size must be at least 2x2")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr >= 0 are required")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.selection not in ("acc", "max_obj"):
            raise ValueError("selection must be 'acc' or 'max_obj'")
        if self.param_mode not in ("clamp", "sigmoid"):
            raise ValueError("param_mode must be 'clamp' or 'sigmoid'")
        if self.mask_mode not in ("decouple", "none"):
            BaselineMaskMode(self.mask_mode, dict(self.baseline_params))

    def to_dict(self):
        d = asdict(self)
        d["strategy"] = self.strategy.to_dict()
        d["transforms"] = self.transforms.to_dict()
        d["patch_size"] = list(self.patch_size)
        d["betas"] = list(self.betas)
        return d

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def init_patch(size, rng, mean=0.5, std=0.25):
    """Gaussian-noise patch clipped to [0, 1], fully opaque."""
    h, w = (size, size) if isinstance(size, int) else size
    if h < 2 or w < 2:
        raise ValueError(f"patch must be at least 2x2, got {h}x{w}")
    rgb = np.clip(rng.normal(mean, std, size=(3, h, w)), 0.0, 1.0).astype(np.float32)
    return Patch.opaque(torch.from_numpy(rgb))


class PatchState:
    """The optimized variable plus its optimizer."""

    def __init__(self, patch, config):
        self.config = config
        rgb = patch.rgb.detach().clone()
        if config.param_mode == "sigmoid":
            rgb = torch.logit(rgb.clamp(1e-4, 1 - 1e-4))
        self.param = rgb.requires_grad_(True)
        self.optimizer = torch.optim.Adam([self.param], lr=config.lr, betas=config.betas)

    def rgb(self):
        return torch.sigmoid(self.param) if self.config.param_mode == "sigmoid" else self.param

    def patch(self):
        return Patch.opaque(self.rgb().detach().clone())

    def state_dict(self):
        return {"param": self.param.detach().clone(), "optimizer": self.optimizer.state_dict()}

    def load_state_dict(self, state):
        with torch.no_grad():
            self.param.copy_(state["param"])
        self.optimizer.load_state_dict(state["optimizer"])


def _masked_patch(rgb, config, n, r, mask_rng, shift_rng):
    h, w = rgb.shape[-2:]
    if config.mask_mode == "none" or (config.mask_mode == "decouple" and (n, r) == NO_MASK):
        return Patch.opaque(rgb)
    if config.mask_mode == "decouple":
        mask = decouple_mask(w, h, n, r, mask_rng, shift=False)
        if config.border_shift:
            mask = border_shift(mask, sample_shift(w, h, shift_rng))
    else:
        mask = sample_baseline_mask(BaselineMaskMode(config.mask_mode, dict(config.baseline_params)),
                                    w, h, mask_rng)
    return Patch(rgb, torch.from_numpy(mask).to(rgb).unsqueeze(0))


def train_step(state, images, boxes, n, r, config, detector, palette, epoch, step):
    """One optimization step.  Returns a LossBreakdown, or None when the batch has no person."""
    if sum(len(b) for b in boxes) == 0:
        return None
    seed = config.seed
    mask_rng = stream(seed, "mask", epoch, step)
    shift_rng = stream(seed, "shift", epoch, step)
    tf_rng = stream(seed, "transforms", epoch, step)
    tc_rng = stream(seed, "toroidal", epoch, step)

    rgb = state.rgb()
    count = len(boxes) if config.mask_per_image else 1
    patches = []
    for _ in range(count):
        p = _masked_patch(rgb, config, n, r, mask_rng, shift_rng)
        if config.tc_training:
            p = toroidal_crop(p, rng=tc_rng)
        patches.append(p)

    adv = attach(images, patches if config.mask_per_image else patches[0], boxes,
                 config.placement, config.transforms, tf_rng)
    pred = detector.predict(adv)
    cands = image_candidates(pred, boxes, config.candidate_threshold, config.obj_score_mode)
    loss = total_objective(patches if count > 1 else patches[0], cands, config.weights, palette,
                           selection=config.selection)

    state.optimizer.zero_grad()
    loss.total.backward()
    state.optimizer.step()
    if config.param_mode == "clamp":
        with torch.no_grad():
            state.param.clamp_(0.0, 1.0)
    return loss


def _latest_checkpoint(out_dir):
    ckpts = sorted((Path(out_dir) / "checkpoints").glob("epoch_*.pt"))
    return ckpts[-1] if ckpts else None


class Manifest:
    """Append-only JSON-lines run log."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = []

    def append(self, record):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def truncate(self, count):
        self.records = self.records[:count]
        if self.path is not None:
            self.path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records))

    @classmethod
    def read(cls, path):
        m = cls(path)
        if m.path.exists():
            m.records = [json.loads(l) for l in m.path.read_text().splitlines() if l.strip()]
        return m


def run_training(config, dataset, detector=None, out_dir=None, resume=False, progress=None):
    """Optimize a patch on ``dataset``; returns ``(patch, manifest_records)``.

    With ``out_dir`` the manifest, checkpoints and ``patch.png`` are written
    there; ``resume=True`` continues from the newest checkpoint.
    """
    detector = detector or load_detector(config.detector)
    palette = load_palette(config.palette)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl" if out_dir else None

    state = PatchState(init_patch(config.patch_size, stream(config.seed, "init"),
                                  config.init_mean, config.init_std), config)
    start = 0
    ckpt = _latest_checkpoint(out_dir) if (out_dir and resume) else None
    if ckpt is not None:
        saved = torch.load(ckpt, weights_only=False)
        state.load_state_dict(saved["state"])
        start = saved["epoch"] + 1
        manifest = Manifest.read(manifest_path)
        manifest.truncate(saved["manifest_records"])
        log.info("resumed from %s at epoch %d", ckpt, start)
    else:
        if manifest_path and manifest_path.exists():
            manifest_path.unlink()
        manifest = Manifest(manifest_path)
        manifest.append({"type": "config", "version": __version__, "config": config.to_dict(),
                         "config_hash": config.config_hash(), "dataset_size": len(dataset),
                         "flags": {"pds_stages": "equal split, 4 r sub-steps",
                                   "lr_schedule": "constant", "mask_per_image": config.mask_per_image}})

    sched_rng = None
    for epoch in range(start, config.epochs):
        if config.strategy.is_random:
            sched_rng = stream(config.seed, "schedule", epoch)
        n, r = schedule(epoch, config.epochs, config.strategy, sched_rng)
        order = stream(config.seed, "order", epoch).permutation(len(dataset))
        sums, steps, skipped = {}, 0, 0
        for step, (images, boxes) in enumerate(dataset.batches(config.batch_size, order,
                                                                config.batches_per_epoch)):
            loss = train_step(state, images, boxes, n, r, config, detector, palette, epoch, step)
            if loss is None:
                skipped += 1
                continue
            for k, v in loss.as_dict().items():
                if k in ("l_acc", "l_nps", "l_tv", "total", "evaded"):
                    sums[k] = sums.get(k, 0.0) + v
            steps += 1
        rec = {"type": "epoch", "epoch": epoch, "n": n, "r": r, "steps": steps, "skipped": skipped}
        rec.update({k: v / max(steps, 1) for k, v in sums.items()})
        rec["alpha"], rec["beta"] = config.weights.alpha, config.weights.beta
        manifest.append(rec)
        if progress:
            progress(rec)
        if out_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            _save_checkpoint(out_dir, state, epoch, config, manifest)

    patch = state.patch()
    if out_dir:
        save_patch(out_dir / "patch.png", patch, epoch=config.epochs, config_hash=config.config_hash())
    return patch, manifest.records


def _save_checkpoint(out_dir, state, epoch, config, manifest):
    ckdir = out_dir / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    png = save_patch(ckdir / f"epoch_{epoch:05d}.png", state.patch(), epoch=epoch,
                     config_hash=config.config_hash())
    path = ckdir / f"epoch_{epoch:05d}.pt"
    torch.save({"epoch": epoch, "state": state.state_dict(),
                "manifest_records": len(manifest.records) + 1}, path)
    manifest.append({"type": "checkpoint", "epoch": epoch, "patch": str(png.relative_to(out_dir)),
                     "state": str(path.relative_to(out_dir))})
    return path
