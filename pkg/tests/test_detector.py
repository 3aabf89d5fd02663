import copy
import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from depatch import synthetic
from depatch.detector import (BBox, Detection, DetectorAdapter, Predictions, best_iou, box_iou,
                              iou, load_detector, nms, register_detector, registered_detectors)
from depatch.detector.toy import (MAGIC, ToyDetector, ToyNet, bundled_checkpoint, read_checkpoint,
                                  save_checkpoint)
from depatch.rng import stream


def raster_iou(a, b, scale=4):
    """IoU by counting sub-pixel cells on a grid (boxes with integer corners)."""
    grid = np.zeros((2, 40 * scale, 40 * scale), dtype=bool)
    for k, (x1, y1, x2, y2) in enumerate((a, b)):
        grid[k, int(y1 * scale):int(y2 * scale), int(x1 * scale):int(x2 * scale)] = True
    inter = np.logical_and(grid[0], grid[1]).sum()
    union = np.logical_or(grid[0], grid[1]).sum()
    return inter / union if union else 0.0


def det(box, score):
    return Detection(BBox(*box), score, (1.0, 0.0), score)


# -- boxes and IoU ----------------------------------------------------------------------------


def test_iou_basic_cases():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0
    assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(2 / 6)
    assert raster_iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(2 / 6)


def test_iou_zero_area():
    assert iou((1, 1, 1, 5), (0, 0, 4, 4)) == 0.0


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(0, 39), min_size=8, max_size=8))
def test_iou_matches_raster_oracle(c):
    a = (min(c[0], c[1]), min(c[2], c[3]), max(c[0], c[1]), max(c[2], c[3]))
    b = (min(c[4], c[5]), min(c[6], c[7]), max(c[4], c[5]), max(c[6], c[7]))
    assert iou(a, b) == pytest.approx(raster_iou(a, b), abs=1e-12)
    assert float(box_iou(torch.tensor([a]), torch.tensor([b]))[0, 0]) == pytest.approx(iou(a, b), abs=1e-12)


def test_best_iou():
    assert best_iou((0, 0, 2, 2), []) == 0.0
    assert best_iou((0, 0, 2, 2), [(5, 5, 6, 6), (1, 0, 3, 2)]) == pytest.approx(1 / 3)


def test_bbox_conversions():
    b = BBox.from_cxcywh(0.5, 0.5, 0.2, 0.4, width=100, height=50)
    assert b.as_tuple() == pytest.approx((40, 15, 60, 35))
    assert b.to_cxcywh(100, 50) == pytest.approx((0.5, 0.5, 0.2, 0.4))
    assert BBox(-5, 3, 120, 40).clip(100, 50).as_tuple() == (0, 3, 100, 40)
    assert not BBox(3, 3, 3, 9).valid


# -- NMS --------------------------------------------------------------------------------------


def test_nms_single():
    d = [det((0, 0, 5, 5), 0.7)]
    assert nms(d, 0.5) == d


def test_nms_duplicate_boxes():
    kept = nms([det((0, 0, 5, 5), 0.8), det((0, 0, 5, 5), 0.9)], 0.5)
    assert [k.obj_score for k in kept] == [0.9]


def test_nms_keeps_separated_boxes():
    boxes = [(0, 0, 10, 10), (6, 0, 16, 10), (0, 7, 10, 17)]
    for a, b in itertools.combinations(boxes, 2):
        assert iou(a, b) < 0.5
    assert len(nms([det(b, s) for b, s in zip(boxes, (0.9, 0.8, 0.7))], 0.5)) == 3


def test_nms_threshold_validation():
    with pytest.raises(ValueError):
        nms([], 0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30), st.integers(2, 12),
                          st.integers(2, 12), st.floats(0.01, 1.0)), max_size=12),
       st.floats(0.1, 0.9))
def test_nms_properties(raw, thr):
    dets = [det((x, y, x + w, y + h), s) for x, y, w, h, s in raw]
    kept = nms(dets, thr)
    assert all(any(k is d for d in dets) for k in kept)
    for a, b in itertools.combinations(kept, 2):
        assert iou(a.box, b.box) <= thr


# -- registry and predictions -----------------------------------------------------------------


def test_registry_has_toy():
    assert "toy" in registered_detectors()
    with pytest.raises(KeyError):
        load_detector("yolov2-not-installed")


def test_register_custom_adapter():
    @register_detector("constant-test")
    class Constant(DetectorAdapter):
        name = "constant-test"
        input_size = (16, 16)

        def predict(self, images):
            b = images.shape[0]
            return Predictions(torch.tensor([[[0.0, 0.0, 8.0, 8.0]]]).expand(b, 1, 4),
                               torch.full((b, 1), 0.9), torch.tensor([[[0.8, 0.2]]]).expand(b, 1, 2))

    d = load_detector("constant-test")
    out = d.detect(torch.zeros(2, 3, 16, 16), threshold=0.5)
    assert [len(x) for x in out] == [1, 1]
    assert out[0][0].obj_score == pytest.approx(0.72)


def test_obj_score_modes():
    p = Predictions(torch.zeros(1, 1, 4), torch.tensor([[0.5]]), torch.tensor([[[0.4, 0.6]]]))
    assert float(p.obj_scores("obj_cls")) == pytest.approx(0.2)
    assert float(p.obj_scores("obj")) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        p.obj_scores("cls")


# -- toy detector -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy():
    return load_detector("toy")


def test_checkpoint_header():
    data = bundled_checkpoint().read_bytes()
    assert data[:8] == MAGIC
    arch, meta, state = read_checkpoint(data)
    assert arch["input_size"] == 160 and arch["grid"] == 10
    assert set(state) == set(ToyNet(**arch).state_dict())


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    net = ToyNet()
    path = save_checkpoint(tmp_path / "t.bin", net, {"note": "x"})
    arch, meta, state = read_checkpoint(path)
    assert meta == {"note": "x"}
    for k, v in net.state_dict().items():
        assert torch.equal(state[k], v)


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"NOTMAGIC" + bytes(20))
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "bad.bin")


def test_wrong_input_size(toy):
    with pytest.raises(ValueError):
        toy.predict(torch.zeros(1, 3, 100, 100))


def test_blank_image_no_confident_detections(toy):
    assert toy.detect(torch.zeros(2, 3, 160, 160), threshold=0.5) == [[], []]


def test_single_glyph_detected(toy):
    g = stream(123, "glyph-test")
    hits = 0
    for _ in range(20):
        img, boxes, labels = synthetic.make_scene(g, n_persons=(1, 1), vehicle_prob=0.0)
        gt = boxes[labels == synthetic.PERSON][0]
        dets = toy.detect(torch.from_numpy(img).permute(2, 0, 1)[None], threshold=0.5)[0]
        hits += any(iou(d.box, gt) >= 0.5 for d in dets)
    assert hits >= 19


def test_batch_determinism(toy):
    img, _, _ = synthetic.make_scene(stream(5, "det"))
    x = torch.from_numpy(img).permute(2, 0, 1)[None].expand(2, -1, -1, -1).contiguous()
    a, b = toy.detect(x, threshold=0.1)
    assert [(d.box, d.obj_score) for d in a] == [(d.box, d.obj_score) for d in b]


def test_class_probs_simplex(toy):
    img, _, _ = synthetic.make_scene(stream(6, "det"))
    pred = toy.predict(torch.from_numpy(img).permute(2, 0, 1)[None])
    assert torch.allclose(pred.class_probs.sum(-1), torch.ones(1, 100), atol=1e-5)


def test_gradient_to_input_matches_fd(toy):
    net64 = ToyDetector(net=copy.deepcopy(toy.net), dtype=torch.float64)
    img, _, _ = synthetic.make_scene(stream(7, "det"), n_persons=(1, 1))
    x = torch.from_numpy(img).permute(2, 0, 1)[None].to(torch.float64).requires_grad_(True)
    net64.predict(x).objectness.sum().backward()
    g = x.grad
    crop = [(c, y, xx) for c in range(3) for y in range(70, 78) for xx in range(76, 84)]
    h = 1e-6
    worst = 0.0
    with torch.no_grad():
        for c, y, xx in crop[::7]:
            e = torch.zeros_like(x)
            e[0, c, y, xx] = h
            fd = (net64.predict(x + e).objectness.sum() - net64.predict(x - e).objectness.sum()) / (2 * h)
            worst = max(worst, abs(float(fd) - float(g[0, c, y, xx])) / max(abs(float(fd)), 1e-6))
    assert worst < 1e-3


def test_gradient_is_local(toy):
    x = torch.rand(1, 3, 160, 160, requires_grad=True)
    obj = toy.predict(x).objectness
    obj[0, 0].backward()   # top-left cell
    g = x.grad[0].abs().sum(0)
    assert float(g[:, 120:].sum()) == 0.0 and float(g[120:, :].sum()) == 0.0
    assert float(g[:16, :16].sum()) > 0.0
