import json

import numpy as np
import pytest
import torch

from depatch.data import toy_dataset
from depatch.detector import load_detector
from depatch.objective import load_palette
from depatch.patch import load_patch
from depatch.rng import stream
from depatch.scheduler import StrategyMode
from depatch.transforms import TransformSpec
from depatch.trainer import (Manifest, PatchState, TrainConfig, _masked_patch, init_patch,
                             run_training, train_step)

PLACE = {"relative_size": 0.45, "anchor": 0.45}


@pytest.fixture(scope="module")
def detector():
    return load_detector("toy")


@pytest.fixture(scope="module")
def data():
    return toy_dataset(16, seed=11)


def small(**kw):
    base = dict(patch_size=(16, 16), epochs=3, batch_size=4, batches_per_epoch=1, placement=PLACE)
    base.update(kw)
    return TrainConfig(**base)


def test_init_patch_statistics():
    p = init_patch(300, stream(0, "init"))
    m = float(p.rgb.mean())
    assert 0.45 <= m <= 0.55
    assert float(p.rgb.min()) >= 0 and float(p.rgb.max()) <= 1
    assert torch.equal(p.alpha, torch.ones(1, 300, 300))
    with pytest.raises(ValueError):
        init_patch(1, stream(0, "init"))


def test_config_validation_and_hash():
    a, b = small(), small()
    assert a.config_hash() == b.config_hash()
    assert small(seed=1).config_hash() != a.config_hash()
    for bad in ({"mask_mode": "dropout"}, {"selection": "best"}, {"param_mode": "tanh"},
                {"epochs": -1}, {"patch_size": (1, 8)},
                {"mask_mode": "cutout", "baseline_params": {"side_fraction": 3.0}}):
        with pytest.raises(ValueError):
            small(**bad)
    cfg = TrainConfig(strategy={"mode": "none"}, weights={"w": 2.0})
    assert cfg.strategy == StrategyMode.none() and cfg.weights.w == 2.0
    json.dumps(cfg.to_dict())


def test_masked_patch_modes():
    rgb = torch.rand(3, 12, 12)
    none = _masked_patch(rgb, small(mask_mode="none"), 2, 0.5, stream(0, "m"), stream(0, "s"))
    assert torch.equal(none.alpha, torch.ones(1, 12, 12))
    dec = _masked_patch(rgb, small(), 3, 0.5, stream(0, "m"), stream(0, "s"))
    assert set(dec.alpha.unique().tolist()) <= {0.0, 1.0}
    assert torch.equal(dec.rgb, rgb)
    cut = _masked_patch(rgb, small(mask_mode="cutout"), 0, 0.0, stream(0, "m"), stream(0, "s"))
    assert float(cut.alpha.min()) == 0.0


def test_lr_zero_leaves_patch_unchanged(detector, data):
    cfg = small(lr=0.0)
    state = PatchState(init_patch(16, stream(0, "init")), cfg)
    before = state.rgb().detach().clone()
    images, boxes = next(data.batches(4))
    assert train_step(state, images, boxes, 2, 0.2, cfg, detector, load_palette(), 0, 0) is not None
    assert torch.equal(state.rgb().detach(), before)


def test_clamp_keeps_values_in_range(detector, data):
    cfg = small(lr=5.0)
    state = PatchState(init_patch(16, stream(0, "init")), cfg)
    images, boxes = next(data.batches(4))
    for step in range(3):
        train_step(state, images, boxes, 2, 0.2, cfg, detector, load_palette(), 0, step)
        rgb = state.rgb().detach()
        assert float(rgb.min()) >= 0.0 and float(rgb.max()) <= 1.0


def test_sigmoid_parametrization_in_range(detector, data):
    cfg = small(param_mode="sigmoid", lr=1.0)
    state = PatchState(init_patch(16, stream(0, "init")), cfg)
    images, boxes = next(data.batches(4))
    train_step(state, images, boxes, 2, 0.2, cfg, detector, load_palette(), 0, 0)
    rgb = state.rgb()
    assert 0.0 < float(rgb.min()) and float(rgb.max()) < 1.0


def test_batch_without_persons_is_skipped(detector):
    cfg = small()
    state = PatchState(init_patch(16, stream(0, "init")), cfg)
    empty = [np.zeros((0, 4), np.float32)] * 2
    assert train_step(state, torch.rand(2, 3, 160, 160), empty, 2, 0.2, cfg, detector,
                      load_palette(), 0, 0) is None


def test_one_step_is_deterministic(detector, data):
    cfg = small()
    out = []
    for _ in range(2):
        state = PatchState(init_patch(16, stream(0, "init")), cfg)
        images, boxes = next(data.batches(4))
        loss = train_step(state, images, boxes, 3, 0.3, cfg, detector, load_palette(), 0, 0)
        out.append((state.rgb().detach().clone(), float(loss.total)))
    assert torch.equal(out[0][0], out[1][0]) and out[0][1] == out[1][1]


def test_zero_epochs_returns_initial_patch(detector, data):
    patch, recs = run_training(small(epochs=0), data, detector)
    assert torch.equal(patch.rgb, init_patch((16, 16), stream(0, "init")).rgb)
    assert [r["type"] for r in recs] == ["config"]


def test_manifest_bookkeeping(detector, data, tmp_path):
    cfg = small(epochs=4, batches_per_epoch=2)
    patch, recs = run_training(cfg, data, detector, out_dir=tmp_path)
    epochs = [r for r in recs if r["type"] == "epoch"]
    assert [r["epoch"] for r in epochs] == [0, 1, 2, 3]
    for r in epochs:
        assert r["steps"] + r["skipped"] == 2
        assert r["total"] == pytest.approx(r["l_acc"] + r["alpha"] * r["l_nps"] + r["beta"] * r["l_tv"],
                                           rel=1e-5)
    assert [(r["n"], r["r"]) for r in epochs][0] == (2, 0.2)
    assert Manifest.read(tmp_path / "manifest.jsonl").records == recs
    assert recs[0]["config_hash"] == cfg.config_hash()
    assert torch.equal(load_patch(tmp_path / "patch.png").rgb, patch.rgb)


def test_resume_matches_uninterrupted_run(detector, data, tmp_path):
    cfg = small(epochs=4, checkpoint_every=2)
    full, full_recs = run_training(cfg, data, detector, out_dir=tmp_path / "a")
    # simulate an interruption after epoch 1: drop the later checkpoint, then resume
    import shutil
    shutil.copytree(tmp_path / "a", tmp_path / "b")
    (tmp_path / "b" / "checkpoints" / "epoch_00003.pt").unlink()
    resumed, recs = run_training(cfg, data, detector, out_dir=tmp_path / "b", resume=True)
    assert torch.equal(resumed.rgb, full.rgb)
    assert recs == full_recs
    assert (tmp_path / "b" / "manifest.jsonl").read_text() == (tmp_path / "a" / "manifest.jsonl").read_text()


def test_training_reduces_objective(detector):
    data = toy_dataset(8, seed=5)
    cfg = small(patch_size=(32, 32), epochs=200, batch_size=8, mask_mode="none",
                strategy=StrategyMode.none(), transforms=TransformSpec.identity())
    _, recs = run_training(cfg, data, detector)
    acc = [r["l_acc"] for r in recs if r["type"] == "epoch"]
    assert np.mean(acc[-20:]) < np.mean(acc[:20])


def test_per_image_masks_differ(detector, data):
    cfg = small(mask_per_image=True)
    state = PatchState(init_patch(16, stream(0, "init")), cfg)
    images, boxes = next(data.batches(4))
    loss = train_step(state, images, boxes, 4, 0.5, cfg, detector, load_palette(), 0, 0)
    assert loss is not None and loss.images == 4
