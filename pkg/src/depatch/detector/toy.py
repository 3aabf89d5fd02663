"""A small anchor-free grid detector for desk-scale experiments.

Input is a (B, 3, 160, 160) batch in [0, 1].  Four stride-2 convolutions bring
it to a 10 x 10 grid; each cell predicts one box (center offset inside the
cell, width and height as fractions of the image), an objectness logit and
logits over two classes (person, other).

Checkpoint layout (little endian)::

    bytes 0-7    magic  b"DPTOYDET"
    bytes 8-11   uint32 format version (currently 1)
    bytes 12-15  uint32 N, length of the JSON header
    bytes 16-    N bytes UTF-8 JSON: {"arch": {...}, "meta": {...},
                 "tensors": [{"name", "dtype": "<f4", "shape", "offset", "nbytes"}]}
    then         raw tensor data; offsets are relative to the end of the header
"""
import json
import struct
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .base import DetectorAdapter, Predictions, register_detector

MAGIC = b"DPTOYDET"
VERSION = 1
DEFAULT_ARCH = {"input_size": 160, "grid": 10, "width": 16, "num_classes": 2}


class ToyNet(nn.Module):
    def __init__(self, input_size=160, grid=10, width=16, num_classes=2):
        super().__init__()
        if input_size % grid:
            raise ValueError("input_size must be a multiple of grid")
        stride = input_size // grid
        if stride != 16:
            raise ValueError("ToyNet is built for stride 16 (four stride-2 convolutions)")
        c = width
        self.input_size = input_size
        self.grid = grid
        self.num_classes = num_classes
        self.features = nn.Sequential(
            nn.Conv2d(3, c, 3, 2, 1), nn.LeakyReLU(0.1),
            nn.Conv2d(c, 2 * c, 3, 2, 1), nn.LeakyReLU(0.1),
            nn.Conv2d(2 * c, 4 * c, 3, 2, 1), nn.LeakyReLU(0.1),
            nn.Conv2d(4 * c, 4 * c, 3, 2, 1), nn.LeakyReLU(0.1),
            nn.Conv2d(4 * c, 4 * c, 3, 1, 1), nn.LeakyReLU(0.1),
            nn.Conv2d(4 * c, 4 * c, 3, 1, 1), nn.LeakyReLU(0.1),
        )
        self.head = nn.Conv2d(4 * c, 5 + num_classes, 1)

    def forward(self, x):
        """Raw head output, (B, 5 + C, grid, grid)."""
        return self.head(self.features(x))

    def decode(self, raw):
        b, _, g, _ = raw.shape
        stride = self.input_size / g
        raw = raw.permute(0, 2, 3, 1).reshape(b, g * g, -1)
        gy, gx = torch.meshgrid(torch.arange(g, dtype=raw.dtype), torch.arange(g, dtype=raw.dtype),
                                indexing="ij")
        gx, gy = gx.reshape(1, -1).to(raw.device), gy.reshape(1, -1).to(raw.device)
        cx = (gx + torch.sigmoid(raw[..., 0])) * stride
        cy = (gy + torch.sigmoid(raw[..., 1])) * stride
        w = torch.sigmoid(raw[..., 2]) * self.input_size
        h = torch.sigmoid(raw[..., 3]) * self.input_size
        boxes = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], -1)
        return boxes, torch.sigmoid(raw[..., 4]), torch.softmax(raw[..., 5:], -1)


def save_checkpoint(path, net, meta=None):
    arch = {"input_size": net.input_size, "grid": net.grid,
            "width": net.features[0].out_channels, "num_classes": net.num_classes}
    tensors, blobs, offset = [], [], 0
    for name, t in net.state_dict().items():
        data = t.detach().cpu().numpy().astype("<f4").tobytes()
        tensors.append({"name": name, "dtype": "<f4", "shape": list(t.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"arch": arch, "meta": meta or {}, "tensors": tensors},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
        for blob in blobs:
            fh.write(blob)
    return path


def read_checkpoint(source):
    """Parse a checkpoint (path or bytes); returns (arch, meta, state_dict)."""
    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError("not a toy detector checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    state = {}
    for t in header["tensors"]:
        raw = data[base + t["offset"]: base + t["offset"] + t["nbytes"]]
        state[t["name"]] = torch.from_numpy(np.frombuffer(raw, dtype=t["dtype"]).reshape(t["shape"]).copy())
    return header["arch"], header["meta"], state


def bundled_checkpoint():
    return resources.files("depatch").joinpath("data/toy_detector.bin")


def load_net(path=None):
    src = Path(path).read_bytes() if path is not None else bundled_checkpoint().read_bytes()
    arch, meta, state = read_checkpoint(src)
    net = ToyNet(**arch)
    net.load_state_dict(state)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net, meta


@register_detector("toy")
class ToyDetector(DetectorAdapter):
    """Adapter around :class:`ToyNet`; loads the bundled weights by default."""
    name = "toy"
    person_class = 0
    nms_iou = 0.5

    def __init__(self, checkpoint=None, net=None, dtype=torch.float32):
        if net is None:
            net, self.meta = load_net(checkpoint)
        else:
            self.meta = {}
        self.net = net.to(dtype)
        self.input_size = (net.input_size, net.input_size)

    def predict(self, images):
        self.check_input(images)
        boxes, obj, probs = self.net.decode(self.net(images.to(next(self.net.parameters()).dtype)))
        return Predictions(boxes, obj, probs, self.person_class)


# -- training ---------------------------------------------------------------------------------


def build_targets(boxes_list, labels_list, input_size=160, grid=10):
    """Dense per-cell targets: (obj (B, G*G), box (B, G*G, 4), cls (B, G*G))."""
    b = len(boxes_list)
    stride = input_size / grid
    obj = torch.zeros(b, grid * grid)
    box = torch.zeros(b, grid * grid, 4)
    cls = torch.zeros(b, grid * grid, dtype=torch.long)
    for i, (boxes, labels) in enumerate(zip(boxes_list, labels_list)):
        for (x1, y1, x2, y2), lab in zip(boxes, labels):
            cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
            gx = min(int(cx // stride), grid - 1)
            gy = min(int(cy // stride), grid - 1)
            k = gy * grid + gx
            obj[i, k] = 1.0
            box[i, k] = torch.tensor([cx / stride - gx, cy / stride - gy,
                                      (x2 - x1) / input_size, (y2 - y1) / input_size])
            cls[i, k] = int(lab)
    return obj, box, cls


def detector_loss(net, images, targets):
    obj_t, box_t, cls_t = targets
    raw = net(images)
    b, _, g, _ = raw.shape
    raw = raw.permute(0, 2, 3, 1).reshape(b, g * g, -1)
    pos = obj_t > 0
    loss_obj = F.binary_cross_entropy_with_logits(raw[..., 4], obj_t, reduction="sum") / b
    if pos.any():
        pred_box = torch.sigmoid(raw[..., :4])[pos]
        loss_box = 5.0 * F.smooth_l1_loss(pred_box, box_t[pos], beta=0.05, reduction="sum") / b
        loss_cls = F.cross_entropy(raw[..., 5:][pos], cls_t[pos], reduction="sum") / b
    else:
        loss_box = loss_cls = raw.sum() * 0
    return loss_obj + loss_box + loss_cls


def train_toy_detector(seed=0, num_images=6000, epochs=25, batch_size=32, lr=2e-3,
                       log=print, **arch):
    """Train a fresh ToyNet on procedurally generated scenes.  Deterministic given ``seed``."""
    from .. import synthetic
    from ..rng import stream

    torch.manual_seed(seed)
    net = ToyNet(**{**DEFAULT_ARCH, **arch})
    images, boxes, labels = synthetic.make_scenes(
        num_images, stream(seed, "toy-detector", "scenes"), n_persons=(0, 2),
        height_range=(40, 135), size=net.input_size)
    images = torch.from_numpy(images)
    targets = build_targets(boxes, labels, net.input_size, net.grid)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs)
    order_rng = stream(seed, "toy-detector", "order")
    for epoch in range(epochs):
        net.train()
        perm = torch.from_numpy(order_rng.permutation(num_images))
        total = 0.0
        for start in range(0, num_images, batch_size):
            idx = perm[start:start + batch_size]
            x = images[idx]
            flip = torch.from_numpy(order_rng.random(len(idx)) < 0.5)
            x = torch.where(flip[:, None, None, None], x.flip(-1), x)
            tgt = _flip_targets(targets, idx, flip, net.grid)
            loss = detector_loss(net, x, tgt)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        log(f"toy detector epoch {epoch + 1}/{epochs} loss {total / num_images:.4f}")
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def _flip_targets(targets, idx, flip, grid):
    obj, box, cls = (t[idx] for t in targets)
    if not flip.any():
        return obj, box, cls
    obj_f = obj.view(-1, grid, grid).flip(-1).reshape(obj.shape)
    cls_f = cls.view(-1, grid, grid).flip(-1).reshape(cls.shape)
    box_f = box.view(-1, grid, grid, 4).flip(2).reshape(box.shape).clone()
    box_f[..., 0] = torch.where(obj_f > 0, 1.0 - box_f[..., 0], box_f[..., 0])
    sel = flip[:, None]
    return (torch.where(sel, obj_f, obj), torch.where(sel[..., None], box_f, box),
            torch.where(sel, cls_f, cls))
