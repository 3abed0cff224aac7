import json

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from robox import numerics as nx
from robox.geometry import tight_box
from robox.model import ModelConfig, RoBoxModel
from robox.training import (
    DivergenceError,
    FrozenParameterError,
    PretrainConfig,
    TrainConfig,
    gen_dataset,
    load_split,
    pretrain,
    prior_stacks,
    train_robox,
)
from robox.training.data import AREA_RANGE, make_example
from robox.training.train import HeadBatch, robox_loss


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    man = gen_dataset(root, 40, seed=3)
    return man


def test_gen_dataset_is_bit_deterministic(tmp_path, small_set):
    other = gen_dataset(tmp_path / "again", 40, seed=3)
    assert other.read_bytes() == small_set.read_bytes()
    for name in ("images/s00007.png", "masks/s00031.png"):
        assert (other.parent / name).read_bytes() == (small_set.parent / name).read_bytes()


def test_manifest_splits_and_masks(small_set):
    m = json.loads(small_set.read_text())
    splits = [s["split"] for s in m["samples"]]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (24, 4, 12)
    for s in m["samples"]:
        mask = np.asarray(Image.open(small_set.parent / s["mask"]))
        assert set(np.unique(mask)) <= {0, 255} and mask.shape == (64, 64)


def test_generated_targets_valid():
    four = ndimage.generate_binary_structure(2, 1)
    for i in range(150):
        img8, mask, _ = make_example(11, i)
        assert mask.any()
        assert ndimage.label(mask, structure=four)[1] == 1
        b = tight_box(mask)
        assert AREA_RANGE[0] <= b.area / 64 ** 2 <= AREA_RANGE[1]
        img = img8 / 255.0
        ring = ndimage.binary_dilation(mask, iterations=3) & ~ndimage.binary_dilation(mask, iterations=1)
        bright = img[ring & (np.abs(img - np.median(img[ring])) < 0.3)]
        # foreground/background separation survives noise and texture
        assert abs(img[mask].mean() - np.median(bright)) >= 0.2 - 0.05


def test_count_validation(tmp_path):
    with pytest.raises(ValueError):
        gen_dataset(tmp_path, 5)


def test_load_split_round_trip(small_set):
    tr = load_split(small_set, "train")
    assert len(tr) == 24 and tr.images.shape == (24, 64, 64)
    assert tr.images.min() >= 0 and tr.images.max() <= 1
    for i in range(len(tr)):
        assert np.array_equal(tr.boxes[i], tight_box(tr.masks[i]).as_array())
    with pytest.raises(ValueError):
        load_split(small_set, "nope")


def test_prior_stack_cache(small_set):
    va = load_split(small_set, "val")
    a = prior_stacks(va)
    assert any((small_set.parent / "cache").iterdir())
    assert np.array_equal(a, prior_stacks(va))
    assert np.array_equal(a, prior_stacks(va, cache=False))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ValueError):
        TrainConfig(offset_steps=0)
    assert TrainConfig.from_dict({"epochs": 3}).epochs == 3
    assert PretrainConfig.from_dict({"max_epochs": 2}).max_epochs == 2


def test_pretrain_is_deterministic_and_finite(small_set, tmp_path):
    tr, va = load_split(small_set, "train"), load_split(small_set, "val")
    cfg = PretrainConfig(max_epochs=1, batch=12, seed=4)
    runs = []
    for k in range(2):
        m = RoBoxModel(ModelConfig())
        recs = pretrain(m, tr, va, cfg, tmp_path / f"log{k}.jsonl")
        runs.append(recs)
        assert all(np.isfinite(r["loss"]) for r in recs)
    assert runs[0] == runs[1]
    assert (tmp_path / "log0.jsonl").read_bytes() == (tmp_path / "log1.jsonl").read_bytes()


def test_pretrain_divergence_aborts(small_set):
    tr, va = load_split(small_set, "train"), load_split(small_set, "val")
    tr.images[:] = np.nan
    with pytest.raises(DivergenceError):
        pretrain(RoBoxModel(ModelConfig()), tr, va, PretrainConfig(max_epochs=1, batch=12))


def _head_run(small_set, tmp_path, **kw):
    tr, va = load_split(small_set, "train"), load_split(small_set, "val")
    m = RoBoxModel(ModelConfig())
    cfg = TrainConfig(epochs=2, batch=8, seed=1, **kw)
    return m, train_robox(m, tr, va, prior_stacks(tr), prior_stacks(va), cfg, tmp_path / "heads.jsonl")


def test_train_robox_freezes_base(small_set, tmp_path):
    m0 = RoBoxModel(ModelConfig())
    base_before = {n: p.data.copy() for n, p in m0.base_parameters()}
    heads_before = {n: p.data.copy() for n, p in m0.head_parameters()}
    m, recs = _head_run(small_set, tmp_path)
    for n, p in m.base_parameters():
        assert np.array_equal(p.data, base_before[n])
        assert p.requires_grad or n == "prompt.freqs"
    assert any(not np.array_equal(p.data, heads_before[n]) for n, p in m.head_parameters())
    assert len(recs) == 2 and {"val_l_o", "val_l_p", "val_dice", "loss"} <= set(recs[0])
    assert all(np.isfinite(r["loss"]) for r in recs)


def test_train_robox_optimizer_holds_heads_only(small_set, tmp_path, monkeypatch):
    seen = {}
    real_init = nx.AdamW.__init__

    def spy(self, params, **kw):
        seen["ids"] = {id(p) for p in params}
        real_init(self, params, **kw)

    monkeypatch.setattr(nx.AdamW, "__init__", spy)
    m, _ = _head_run(small_set, tmp_path)
    assert seen["ids"] == {id(p) for _, p in m.head_parameters()}


def test_train_robox_detects_base_mutation(small_set, tmp_path, monkeypatch):
    real_step = nx.AdamW.step
    holder = {}

    def tamper(self):
        real_step(self)
        holder["m"].decoder.iou_token.data[0, 0] += 1.0

    tr, va = load_split(small_set, "train"), load_split(small_set, "val")
    holder["m"] = m = RoBoxModel(ModelConfig())
    monkeypatch.setattr(nx.AdamW, "step", tamper)
    with pytest.raises(FrozenParameterError):
        train_robox(m, tr, va, prior_stacks(tr), prior_stacks(va), TrainConfig(epochs=1, batch=8))


def test_train_robox_options_run(small_set, tmp_path):
    for kw in ({"mask_supervision": "selected"}, {"lp_reduction": "sum", "lp_squared": True},
               {"freeze_point_targets": True}, {"offset_steps": 3, "detach_refined_box": False}):
        _, recs = _head_run(small_set, tmp_path, **kw)
        assert all(np.isfinite(r["loss"]) for r in recs)


def test_chained_offset_loss(small_set):
    tr = load_split(small_set, "train").subset(np.arange(4))
    m = RoBoxModel(ModelConfig())
    with nx.no_grad():
        f_img = m.encode_image(tr.images).data
    boxes0 = tr.boxes + np.array([2.0, -1.0, 3.0, 1.0])
    hb = HeadBatch(f_img, boxes0, tr.boxes, tr.masks, prior_stacks(tr))
    # fresh heads predict zero offsets, so every chained step sees the same box
    _, one, _ = robox_loss(m, hb, TrainConfig())
    _, three, _ = robox_loss(m, hb, TrainConfig(offset_steps=3))
    assert one["l_o"] == pytest.approx(three["l_o"], abs=1e-12)
    rng = np.random.default_rng(0)
    m.prm.fc.weight.data[:] = rng.normal(size=m.prm.fc.weight.shape) * 0.5
    _, one, _ = robox_loss(m, hb, TrainConfig())
    _, three, _ = robox_loss(m, hb, TrainConfig(offset_steps=3))
    assert one["l_o"] != three["l_o"]
