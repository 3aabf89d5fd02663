"""Person datasets: in-memory container, on-disk layout and importers.

On-disk layout of a normalized dataset::

    <root>/images/<name>.png
    <root>/<split>.jsonl     one line per image:
                             {"file": "images/<name>.png", "boxes": [[cx, cy, w, h], ...]}

Boxes are person boxes in normalized center/size coordinates.  Images are
resized to the detector input size when loaded.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np
import torch
from PIL import Image

from . import synthetic
from .rng import stream

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class PersonDataset:
    images: torch.Tensor                  # (N, 3, S, S) float32 in [0, 1]
    boxes: List[np.ndarray]               # per image (M, 4) pixel xyxy person boxes
    files: List[str] = field(default_factory=list)

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_size(self):
        return tuple(self.images.shape[-2:])

    def subset(self, idx):
        idx = list(idx)
        files = [self.files[i] for i in idx] if self.files else []
        return PersonDataset(self.images[idx], [self.boxes[i] for i in idx], files)

    def split(self, n_first):
        return self.subset(range(n_first)), self.subset(range(n_first, len(self)))

    def batches(self, batch_size, order=None, limit=None):
        order = np.arange(len(self)) if order is None else np.asarray(order)
        count = 0
        for start in range(0, len(order), batch_size):
            if limit is not None and count >= limit:
                return
            idx = order[start:start + batch_size].tolist()
            yield self.images[idx], [self.boxes[i] for i in idx]
            count += 1

    def save(self, root, split="train"):
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        s = self.images.shape[-1], self.images.shape[-2]
        lines = []
        for i in range(len(self)):
            name = self.files[i] if self.files else f"images/{split}_{i:05d}.png"
            arr = (self.images[i].permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
            Image.fromarray(arr).save(root / name)
            b = np.asarray(self.boxes[i], dtype=np.float64).reshape(-1, 4)
            norm = [[(x1 + x2) / 2 / s[0], (y1 + y2) / 2 / s[1], (x2 - x1) / s[0], (y2 - y1) / s[1]]
                    for x1, y1, x2, y2 in b]
            lines.append(json.dumps({"file": name, "boxes": [[round(v, 6) for v in r] for r in norm]}))
        (root / f"{split}.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
        return root

    @classmethod
    def load(cls, root, split="train", size=160):
        root = Path(root)
        ann = root / f"{split}.jsonl"
        if not ann.exists():
            raise FileNotFoundError(f"annotation file {ann} not found")
        images, boxes, files = [], [], []
        for lineno, line in enumerate(ann.read_text().splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            with Image.open(root / rec["file"]) as im:
                im = im.convert("RGB").resize((size, size), Image.BILINEAR)
                images.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
            b = np.asarray(rec.get("boxes", []), dtype=np.float32).reshape(-1, 4)
            xyxy = np.stack([b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2,
                             b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2], 1) * size
            boxes.append(np.clip(xyxy, 0, size).astype(np.float32))
            files.append(rec["file"])
        if not images:
            raise ValueError(f"{ann} lists no images")
        return cls(torch.from_numpy(np.stack(images)), boxes, files)


def toy_dataset(count, seed=0, split="train", size=160, **scene_kwargs):
    """Synthetic person scenes; ``split`` names an independent random stream."""
    kwargs = {"n_persons": (1, 2), "height_range": (72, 135), "poster_prob": 0.0, **scene_kwargs}
    images, boxes, labels = synthetic.make_scenes(count, stream(seed, "toy-dataset", split),
                                                  size=size, **kwargs)
    persons = [b[lab == synthetic.PERSON] for b, lab in zip(boxes, labels)]
    return PersonDataset(torch.from_numpy(images), persons)


# -- importers -------------------------------------------------------------------------------


def _import_toy(src, dst, count=200, seed=0, split="train", **_):
    ds = toy_dataset(count, seed=seed, split=split)
    ds.save(dst, split)
    return len(ds)


def _find_images(src):
    return sorted(p for p in Path(src).rglob("*") if p.suffix.lower() in IMAGE_EXTS)


def _import_yolo(src, dst, split="train", person_class=0, **_):
    """YOLO txt layout: for every image ``x.png`` a ``x.txt`` with ``cls cx cy w h`` lines,
    either next to it or under a parallel ``labels/`` directory."""
    src, dst = Path(src), Path(dst)
    images = [p for p in _find_images(src) if "labels" not in p.parts]
    if not images:
        raise ValueError(f"no images found under {src}")
    (dst / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, img in enumerate(images):
        cand = [img.with_suffix(".txt"),
                img.parent.parent / "labels" / (img.stem + ".txt")]
        label = next((c for c in cand if c.exists()), None)
        boxes = []
        if label is not None:
            for row in label.read_text().split("\n"):
                parts = row.split()
                if len(parts) >= 5 and int(float(parts[0])) == person_class:
                    boxes.append([float(v) for v in parts[1:5]])
        name = f"images/{split}_{i:05d}.png"
        with Image.open(img) as im:
            im.convert("RGB").save(dst / name)
        lines.append(json.dumps({"file": name, "boxes": boxes}))
    (dst / f"{split}.jsonl").write_text("\n".join(lines) + "\n")
    return len(lines)


def _import_coco(src, dst, split="train", annotations=None, **_):
    """MS-COCO instances layout; only images containing the person category are kept."""
    src, dst = Path(src), Path(dst)
    ann_path = Path(annotations) if annotations else next(iter(sorted(src.rglob("instances*.json"))), None)
    if ann_path is None or not ann_path.exists():
        raise ValueError(f"no instances*.json annotation file found under {src}")
    coco = json.loads(ann_path.read_text())
    person_ids = {c["id"] for c in coco.get("categories", []) if c.get("name") == "person"}
    by_image = {}
    for a in coco.get("annotations", []):
        if a.get("category_id") in person_ids and not a.get("iscrowd", 0):
            by_image.setdefault(a["image_id"], []).append(a["bbox"])
    (dst / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    index = {p.name: p for p in _find_images(src)}
    for img in coco.get("images", []):
        if img["id"] not in by_image:
            continue
        path = index.get(Path(img["file_name"]).name)
        if path is None:
            continue
        w, h = img["width"], img["height"]
        boxes = [[(x + bw / 2) / w, (y + bh / 2) / h, bw / w, bh / h] for x, y, bw, bh in by_image[img["id"]]]
        name = f"images/{split}_{len(lines):05d}.png"
        with Image.open(path) as im:
            im.convert("RGB").save(dst / name)
        lines.append(json.dumps({"file": name, "boxes": [[round(v, 6) for v in b] for b in boxes]}))
    (dst / f"{split}.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    return len(lines)


IMPORTERS = {"toy": _import_toy, "yolo": _import_yolo, "coco": _import_coco}


def import_dataset(src, dst, fmt, **kwargs):
    """Convert ``src`` in format ``fmt`` into the normalized layout under ``dst``.

    Returns the number of images written.
    """
    if fmt not in IMPORTERS:
        raise ValueError(f"unknown dataset format {fmt!r}; supported formats: {', '.join(sorted(IMPORTERS))}")
    if fmt != "toy":
        src = Path(src)
        if not src.is_dir() or not any(src.iterdir()):
            raise ValueError(f"source directory {src} is missing or empty")
    return IMPORTERS[fmt](src, dst, **kwargs)
