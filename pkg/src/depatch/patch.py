"""The patch container and its on-disk format.

A patch is an RGB tensor in [0, 1] plus a single-channel alpha tensor.  Alpha
1 means opaque; alpha 0 marks an erased (transparent) pixel.  Erasure is
always carried by alpha and never written into the RGB values.

On disk a patch is a lossless 8-bit RGBA PNG plus a JSON sidecar.  The sidecar
also stores the exact float32 tensors, so ``load_patch(save_patch(p))`` is
bitwise identical to ``p`` even for values off the 8-bit grid.
"""
import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

SIDECAR_FORMAT = "depatch-patch/1"


@dataclass
class Patch:
    rgb: torch.Tensor    # (3, H, W)
    alpha: torch.Tensor  # (1, H, W)

    def __post_init__(self):
        if self.rgb.dim() != 3 or self.rgb.shape[0] != 3:
            raise ValueError(f"rgb must be (3, H, W), got {tuple(self.rgb.shape)}")
        if self.alpha.dim() == 2:
            self.alpha = self.alpha.unsqueeze(0)
        if self.alpha.shape != (1,) + tuple(self.rgb.shape[1:]):
            raise ValueError(
                f"alpha shape {tuple(self.alpha.shape)} does not match rgb {tuple(self.rgb.shape)}")

    @classmethod
    def opaque(cls, rgb):
        return cls(rgb, torch.ones_like(rgb[:1]))

    @property
    def height(self):
        return self.rgb.shape[1]

    @property
    def width(self):
        return self.rgb.shape[2]

    @property
    def size(self):
        """(height, width)"""
        return self.height, self.width

    def premultiplied(self):
        return self.rgb * self.alpha

    def with_alpha(self, alpha):
        alpha = torch.as_tensor(alpha, dtype=self.rgb.dtype, device=self.rgb.device)
        if alpha.dim() == 2:
            alpha = alpha.unsqueeze(0)
        return Patch(self.rgb, alpha)

    def detach(self):
        return Patch(self.rgb.detach(), self.alpha.detach())

    def clone(self):
        return Patch(self.rgb.clone(), self.alpha.clone())

    def to(self, *args, **kwargs):
        return Patch(self.rgb.to(*args, **kwargs), self.alpha.to(*args, **kwargs))


def _sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def _to_png_array(patch):
    rgba = torch.cat([patch.rgb, patch.alpha], 0).detach().cpu().clamp(0, 1)
    return np.round(rgba.permute(1, 2, 0).numpy() * 255.0).astype(np.uint8)


def _encode(t):
    arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4"))
    return base64.b64encode(arr.tobytes()).decode("ascii")


def _decode(text, shape):
    arr = np.frombuffer(base64.b64decode(text), dtype="<f4").reshape(shape)
    return torch.from_numpy(arr.astype(np.float32))


def save_patch(path, patch, **meta):
    """Write ``patch`` to ``path`` (PNG) and ``path + '.json'`` (sidecar).

    Extra keyword arguments (epoch, config_hash, ...) are stored in the sidecar.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    png = _to_png_array(patch)
    Image.fromarray(png, mode="RGBA").save(path, format="PNG")
    sidecar = {
        "format": SIDECAR_FORMAT,
        "alpha": "1 = opaque, 0 = erased (transparent when attached)",
        "height": patch.height,
        "width": patch.width,
        "png_sha256": hashlib.sha256(png.tobytes()).hexdigest(),
        "rgb_f32": _encode(patch.rgb),
        "alpha_f32": _encode(patch.alpha),
        **meta,
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return path


def load_patch(path, exact=True):
    """Load a patch written by :func:`save_patch`, or any RGB/RGBA image.

    With a matching sidecar and ``exact=True`` the float32 tensors are
    restored bit for bit; otherwise the 8-bit PNG values are used.
    Raises ``ValueError`` for unreadable files.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGBA"), dtype=np.uint8)
    except Exception as exc:  # PIL raises a zoo of exception types
        raise ValueError(f"cannot read patch image {path}: {exc}") from exc

    side = _sidecar_path(path)
    if exact and side.exists():
        meta = json.loads(side.read_text())
        if meta.get("png_sha256") == hashlib.sha256(arr.tobytes()).hexdigest():
            h, w = meta["height"], meta["width"]
            return Patch(_decode(meta["rgb_f32"], (3, h, w)), _decode(meta["alpha_f32"], (1, h, w)))

    t = torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()
    return Patch(t[:3].contiguous(), t[3:].contiguous())


def resize_to_area(patch, area=90000):
    """Rescale so that width*height is as close to ``area`` as possible, keeping aspect."""
    import torch.nn.functional as F

    h, w = patch.size
    scale = (area / float(h * w)) ** 0.5
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    if (nh, nw) == (h, w):
        return patch
    rgba = torch.cat([patch.rgb, patch.alpha], 0).unsqueeze(0)
    out = F.interpolate(rgba, size=(nh, nw), mode="bilinear", align_corners=False)[0]
    return Patch(out[:3].clamp(0, 1), out[3:].clamp(0, 1))
