"""Procedural toy scenes: person-like glyphs on textured backgrounds.

Used to train the bundled toy detector and as the desk-scale attack dataset.
Everything is drawn with numpy from an explicit generator, so a seed fixes
the dataset bit for bit.

Class ids: 0 = person, 1 = vehicle-like distractor.
"""
import numpy as np
from scipy import ndimage

PERSON = 0
OTHER = 1

_SKIN = np.array([[0.98, 0.84, 0.71], [0.90, 0.72, 0.56], [0.76, 0.57, 0.42],
                  [0.55, 0.38, 0.26], [0.36, 0.24, 0.16]], dtype=np.float32)


def _smooth_field(rng, size, cells, channels=3):
    coarse = rng.random((cells, cells, channels)).astype(np.float32)
    zoom = (size / cells, size / cells, 1)
    return np.clip(ndimage.zoom(coarse, zoom, order=1, mode="nearest")[:size, :size], 0, 1)


def _background(rng, size):
    base = _smooth_field(rng, size, int(rng.integers(2, 7)))
    detail = _smooth_field(rng, size, int(rng.integers(8, 20)))
    mix = rng.uniform(0.1, 0.4)
    img = (1 - mix) * base + mix * detail
    # muted palette, random overall tint and contrast
    img = 0.5 + (img - 0.5) * rng.uniform(0.3, 1.0) + rng.uniform(-0.15, 0.15, size=3)
    return np.clip(img, 0, 1).astype(np.float32)


def _rect(img, x1, y1, x2, y2, color):
    h, w = img.shape[:2]
    x1, x2 = int(max(0, round(x1))), int(min(w, round(x2)))
    y1, y2 = int(max(0, round(y1))), int(min(h, round(y2)))
    if x2 > x1 and y2 > y1:
        img[y1:y2, x1:x2] = color
    return x1, y1, x2, y2


def _ellipse(img, cx, cy, rx, ry, color):
    h, w = img.shape[:2]
    y, x = np.ogrid[:h, :w]
    inside = ((x + 0.5 - cx) / max(rx, 0.5)) ** 2 + ((y + 0.5 - cy) / max(ry, 0.5)) ** 2 <= 1.0
    img[inside] = color


def _texture(rng, h, w, color):
    """Clothing texture of size (h, w, 3) built around ``color``."""
    kind = rng.integers(0, 6)
    other = rng.random(3).astype(np.float32)
    if kind == 0:
        return np.broadcast_to(color, (h, w, 3)).copy()
    if kind in (1, 2):
        period = int(rng.integers(2, 8))
        idx = np.arange(h if kind == 1 else w) // period % 2
        stripe = np.where(idx[:, None] == 0, color, other)
        return (np.broadcast_to(stripe[:, None, :], (h, w, 3)) if kind == 1
                else np.broadcast_to(stripe[None, :, :], (h, w, 3))).copy()
    if kind == 3:
        period = int(rng.integers(3, 9))
        chk = ((np.arange(h)[:, None] // period + np.arange(w)[None, :] // period) % 2)[..., None]
        return np.where(chk == 0, color, other).astype(np.float32)
    if kind == 4:
        cells = int(rng.integers(2, 6))
        return _smooth_field(rng, max(h, w), cells)[:h, :w]
    return np.clip(color + rng.normal(0, 0.25, size=(h, w, 3)), 0, 1).astype(np.float32)


def _poster(rng, side):
    """A random square print: pixel noise, blocky noise or smooth noise."""
    kind = rng.integers(0, 3)
    if kind == 0:
        return rng.random((side, side, 3)).astype(np.float32)
    if kind == 1:
        cells = int(rng.integers(2, 9))
        coarse = rng.random((cells, cells, 3)).astype(np.float32)
        rep = int(np.ceil(side / cells))
        return np.kron(coarse, np.ones((rep, rep, 1), dtype=np.float32))[:side, :side]
    return _smooth_field(rng, side, int(rng.integers(2, 10)))


def draw_person(img, x0, y0, h, rng, poster_prob=0.5):
    """Draw a person glyph with top-left (x0, y0) and height ``h``; returns its xyxy box."""
    w = h * rng.uniform(0.38, 0.46)
    skin = _SKIN[rng.integers(0, len(_SKIN))] * rng.uniform(0.9, 1.1)
    shirt = rng.random(3).astype(np.float32)
    pants = (rng.random(3) * rng.uniform(0.2, 0.8)).astype(np.float32)
    hair = (rng.random(3) * 0.35).astype(np.float32)

    # legs
    spread = rng.uniform(-0.04, 0.06) * w
    _rect(img, x0 + 0.23 * w - spread, y0 + 0.55 * h, x0 + 0.48 * w, y0 + h, pants)
    _rect(img, x0 + 0.52 * w, y0 + 0.55 * h, x0 + 0.77 * w + spread, y0 + h, pants)
    # arms (sleeves + hands)
    for ax1, ax2 in ((0.0, 0.17), (0.83, 1.0)):
        _rect(img, x0 + ax1 * w, y0 + 0.18 * h, x0 + ax2 * w, y0 + 0.46 * h, shirt)
        _rect(img, x0 + ax1 * w, y0 + 0.46 * h, x0 + ax2 * w, y0 + 0.53 * h, skin)
    # torso
    tx1, ty1, tx2, ty2 = _rect(img, x0 + 0.18 * w, y0 + 0.16 * h, x0 + 0.82 * w, y0 + 0.57 * h, shirt)
    if tx2 > tx1 and ty2 > ty1:
        img[ty1:ty2, tx1:tx2] = _texture(rng, ty2 - ty1, tx2 - tx1, shirt)
    if rng.random() < poster_prob:
        side = int(round(h * rng.uniform(0.15, 0.3)))
        cx = x0 + w * rng.uniform(0.4, 0.6)
        cy = y0 + h * rng.uniform(0.32, 0.45)
        px1, py1 = int(round(cx - side / 2)), int(round(cy - side / 2))
        poster = _poster(rng, max(side, 1))
        H, W = img.shape[:2]
        ys, xs = slice(max(py1, 0), min(py1 + side, H)), slice(max(px1, 0), min(px1 + side, W))
        img[ys, xs] = poster[ys.start - py1:ys.stop - py1, xs.start - px1:xs.stop - px1]
    # head
    rx, ry = 0.07 * h, 0.085 * h
    _ellipse(img, x0 + 0.5 * w, y0 + ry, rx, ry, skin)
    _ellipse(img, x0 + 0.5 * w, y0 + 0.6 * ry, rx * 1.02, ry * 0.62, hair)
    return (x0, y0, x0 + w, y0 + h)


def draw_vehicle(img, x0, y0, w, rng):
    h = w * rng.uniform(0.35, 0.5)
    body = rng.random(3).astype(np.float32)
    _rect(img, x0, y0 + 0.35 * h, x0 + w, y0 + 0.8 * h, body)
    _rect(img, x0 + 0.2 * w, y0, x0 + 0.75 * w, y0 + 0.4 * h, body)
    _rect(img, x0 + 0.27 * w, y0 + 0.08 * h, x0 + 0.68 * w, y0 + 0.35 * h,
          np.clip(body * 0.4 + 0.5, 0, 1))
    for cx in (0.22, 0.78):
        _ellipse(img, x0 + cx * w, y0 + 0.8 * h, 0.1 * w, 0.2 * h, np.full(3, 0.08, np.float32))
    return (x0, y0, x0 + w, y0 + h)


def draw_clutter(img, rng):
    size = img.shape[0]
    color = rng.random(3).astype(np.float32)
    cx, cy = rng.uniform(0, size, 2)
    a, b = rng.uniform(3, 22, 2)
    if rng.random() < 0.5:
        _rect(img, cx - a, cy - b, cx + a, cy + b, color)
    else:
        _ellipse(img, cx, cy, a, b, color)


def _overlaps(box, boxes, limit=0.1):
    x1, y1, x2, y2 = box
    for b in boxes:
        iw = min(x2, b[2]) - max(x1, b[0])
        ih = min(y2, b[3]) - max(y1, b[1])
        if iw > 0 and ih > 0 and iw * ih > limit * min((x2 - x1) * (y2 - y1), (b[2] - b[0]) * (b[3] - b[1])):
            return True
    return False


def make_scene(rng, size=160, n_persons=(1, 2), height_range=(64, 130),
               vehicle_prob=0.35, clutter=(0, 5), poster_prob=0.5):
    """Render one scene.

    Returns ``(image, boxes, labels)`` with ``image`` float32 (size, size, 3) in
    [0, 1] and ``boxes`` an (N, 4) float array of pixel xyxy.
    """
    img = _background(rng, size)
    for _ in range(int(rng.integers(clutter[0], clutter[1] + 1))):
        draw_clutter(img, rng)
    boxes, labels = [], []
    if rng.random() < vehicle_prob:
        w = rng.uniform(50, 100)
        box = (rng.uniform(0, size - w), rng.uniform(size * 0.3, size - 0.5 * w), 0, 0)
        box = draw_vehicle(img, box[0], box[1], w, rng)
        boxes.append(box)
        labels.append(OTHER)
    want = int(rng.integers(n_persons[0], n_persons[1] + 1))
    for _ in range(want):
        for _attempt in range(20):
            h = rng.uniform(*height_range)
            w_est = 0.46 * h
            x0 = rng.uniform(0, size - w_est)
            y0 = rng.uniform(0, size - h)
            if not _overlaps((x0, y0, x0 + w_est, y0 + h), boxes):
                break
        else:
            continue
        boxes.append(draw_person(img, x0, y0, h, rng, poster_prob))
        labels.append(PERSON)
    img = np.clip(img + rng.normal(0, 0.015, img.shape), 0, 1).astype(np.float32)
    boxes = np.array(boxes, dtype=np.float32).reshape(-1, 4)
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, size)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, size)
    return img, boxes, np.array(labels, dtype=np.int64)


def make_scenes(count, rng, **kwargs):
    """Render ``count`` scenes; returns (images (N, 3, S, S) float32, list of boxes, list of labels)."""
    images, boxes, labels = [], [], []
    for _ in range(count):
        im, b, lab = make_scene(rng, **kwargs)
        images.append(im.transpose(2, 0, 1))
        boxes.append(b)
        labels.append(lab)
    return np.stack(images), boxes, labels
