import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foodenergy import io
from foodenergy.dataset import (
    EatingOccasion,
    ShapeClass,
    SyntheticSceneConfig,
    augment_fourfold,
    generate_synthetic,
    load_manifest,
    prune,
    read_manifest,
    regularize_image,
    save_manifest,
    split,
)
from foodenergy.density import FoodItemAnnotation, flip, summation_decode
from foodenergy.exceptions import ParseError, PlacementFailure, TooFewInstances, ValidationError

from conftest import block_occasion


def assert_same_occasions(a, b):
    assert [o.id for o in a] == [o.id for o in b]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        assert [(i.label, i.kcal) for i in x.items] == [(i.label, i.kcal) for i in y.items]
        for i, j in zip(x.items, y.items):
            np.testing.assert_array_equal(i.mask, j.mask)


# -- manifest ---------------------------------------------------------------

def test_manifest_roundtrip(tmp_path):
    occs = [block_occasion("a"), block_occasion("b", kcals=(10.5, 20.25))]
    path = save_manifest(occs, tmp_path)
    loaded = load_manifest(path)
    assert_same_occasions(occs, loaded)
    assert [o.total_kcal for o in loaded] == [450.0, 30.75]


def test_manifest_schema_and_relative_paths(tmp_path):
    path = save_manifest([block_occasion("a")], tmp_path)
    doc = json.load(open(path))
    assert doc["version"] == 1
    entry = doc["occasions"][0]
    assert entry["id"] == "a" and entry["image"] == "images/a.png"
    assert entry["items"][0] == {"label": "item0", "kcal": 300.0, "mask": "masks/a_0.png"}


def _edit_manifest(path, fn):
    doc = json.load(open(path))
    fn(doc)
    json.dump(doc, open(path, "w"))


def test_missing_kcal_is_validation_error(tmp_path):
    path = save_manifest([block_occasion("a"), block_occasion("b")], tmp_path)
    _edit_manifest(path, lambda d: d["occasions"][1]["items"][0].pop("kcal"))
    with pytest.raises(ValidationError) as err:
        load_manifest(path)
    assert err.value.occasion_id == "b" and err.value.item_index == 0


def test_gray_mask_pixel_is_validation_error(tmp_path):
    path = save_manifest([block_occasion("a")], tmp_path)
    mask = np.asarray(io.read_mask_png(tmp_path / "masks/a_1.png"), dtype=np.uint8) * 255
    mask[0, 0] = 128
    io.write_gray_png(tmp_path / "masks/a_1.png", mask)
    with pytest.raises(ValidationError, match="128") as err:
        load_manifest(path)
    assert err.value.occasion_id == "a" and err.value.item_index == 1
    occs, failures = read_manifest(path)
    assert occs == [] and "a" in failures


@pytest.mark.parametrize("text", ["{not json", '{"version": 2, "occasions": []}', '{"version": 1}'])
def test_malformed_manifest_is_parse_error(tmp_path, text):
    (tmp_path / "m.json").write_text(text)
    with pytest.raises(ParseError):
        load_manifest(tmp_path / "m.json")


def test_manifest_resizes_to_target(tmp_path):
    path = save_manifest([block_occasion("a", size=16)], tmp_path)
    (occ,) = load_manifest(path, target_size=8)
    assert occ.image.shape == (8, 8, 3)
    assert all(item.mask.shape == (8, 8) for item in occ.items)


# -- pruning ----------------------------------------------------------------

def test_prune_reports_missing_kcal():
    occs = [block_occasion(str(i)) for i in range(5)]
    occs[2].items[0].kcal = None
    kept, rejected = prune(occs)
    assert len(kept) == 4
    assert rejected == {"2": "missing kcal"}


def test_prune_identity_on_valid():
    occs = [block_occasion(str(i)) for i in range(3)]
    kept, rejected = prune(occs)
    assert kept == occs and rejected == {}


def test_prune_overlapping_masks():
    occ = block_occasion("x")
    occ.items[1].mask[:, 1] = True  # stripe 0 covers columns 0-1
    kept, rejected = prune([occ])
    assert kept == [] and "overlapping masks" in rejected["x"]


def test_prune_other_reasons():
    empty = block_occasion("e"); empty.items[0].mask[:] = False
    negative = block_occasion("n"); negative.items[0].kcal = -3.0
    none = EatingOccasion("z", np.zeros((4, 4, 3), np.uint8), [])
    _, rejected = prune([empty, negative, none])
    assert rejected == {"e": "empty mask", "n": "non-positive kcal", "z": "no items"}


# -- regularization ---------------------------------------------------------

def test_regularize_downsizes_and_keeps_masks_binary():
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, size=(512, 512, 3), dtype=np.uint8)
    mask = np.zeros((512, 512), dtype=bool)
    mask[100:300, 50:400] = True
    out, (m,) = regularize_image(image, [mask], 256)
    assert out.shape == (256, 256, 3) and out.dtype == np.uint8
    assert m.dtype == bool and m.shape == (256, 256)
    assert m.sum() == pytest.approx(mask.sum() / 4, rel=0.02)


def test_regularize_identity_at_target():
    image = np.arange(256 * 256 * 3, dtype=np.uint8).reshape(256, 256, 3)
    mask = np.eye(256, dtype=bool)
    out, (m,) = regularize_image(image, [mask], 256)
    np.testing.assert_array_equal(out, image)
    np.testing.assert_array_equal(m, mask)


def test_regularize_non_square():
    image = np.zeros((300, 400, 3), dtype=np.uint8)
    image[:, 200:] = 255
    mask = np.zeros((300, 400), dtype=bool)
    mask[:, :200] = True
    out, (m,) = regularize_image(image, [mask], 256)
    assert out.shape == (256, 256, 3)
    # left half stays the mask, right half stays white after aspect distortion
    assert m[:, :127].all() and not m[:, 129:].any()
    assert (out[:, 130:] == 255).all() and (out[:, :126] == 0).all()


def test_regularize_rejects_tiny_target():
    with pytest.raises(ValueError):
        regularize_image(np.zeros((16, 16, 3), np.uint8), [], 4)


# -- splitting --------------------------------------------------------------

def test_split_sizes_for_175():
    parts = split([f"m{i}" for i in range(175)], seed=0)
    assert (len(parts.train), len(parts.val), len(parts.test)) == (123, 17, 35)


def test_split_deterministic_and_seed_dependent():
    ids = [f"m{i}" for i in range(50)]
    assert split(ids, 1) == split(ids, 1)
    a, b = split(ids, 1), split(ids, 2)
    assert a.train != b.train
    assert (len(a.train), len(a.val), len(a.test)) == (len(b.train), len(b.val), len(b.test))


def test_split_too_few():
    with pytest.raises(TooFewInstances):
        split(["a", "b"], 0)


@given(st.integers(3, 400), st.integers(0, 2**32 - 1))
def test_split_partition_property(n, seed):
    ids = [f"m{i}" for i in range(n)]
    parts = split(ids, seed)
    together = parts.train + parts.val + parts.test
    assert sorted(together) == sorted(ids)
    assert len(parts.test) == math.floor(0.2 * n) and len(parts.val) == math.floor(0.1 * n)


# -- augmentation -----------------------------------------------------------

def test_fourfold_variants(occasion):
    variants = augment_fourfold(occasion)
    assert len(variants) == 4
    assert len({v.id for v in variants}) == 4
    assert {v.total_kcal for v in variants} == {occasion.total_kcal}
    for v in variants:
        assert prune([v])[1] == {}


def test_fourfold_density_follows_flip(scenes):
    for occ in scenes[:10]:
        ident, h, v, hv = augment_fourfold(occ)
        np.testing.assert_array_equal(ident.density_map(), occ.density_map())
        np.testing.assert_array_equal(h.density_map(), flip(occ.density_map(), "horizontal"))
        np.testing.assert_array_equal(v.density_map(), flip(occ.density_map(), "vertical"))
        np.testing.assert_array_equal(hv.image, flip(flip(occ.image, "horizontal"), "vertical"))
        assert summation_decode(hv.density_map()) == summation_decode(occ.density_map())


def test_fourfold_leaves_original_untouched(occasion):
    before = occasion.image.copy()
    augment_fourfold(occasion)
    np.testing.assert_array_equal(occasion.image, before)


# -- synthetic scenes -------------------------------------------------------

def test_synthetic_kcal_is_density_times_area():
    palette = (ShapeClass("blob", (200, 40, 40), 0.5),)
    scenes = generate_synthetic(SyntheticSceneConfig(n_scenes=30, image_size=64, palette=palette,
                                                     items_per_scene=(1, 1), seed=5))
    for occ in scenes:
        (item,) = occ.items
        assert item.kcal == 0.5 * item.area
    # 900 foreground pixels at 0.5 kCal/px
    assert 0.5 * 900 == 450.0


def test_synthetic_masks_match_rendered_colors(scenes):
    for occ in scenes[:10]:
        plate = np.array([228, 228, 222])
        for item in occ.items:
            # shape pixels sit well away from the plate color
            assert np.abs(occ.image[item.mask].astype(int) - plate).sum(axis=1).min() > 30


def test_synthetic_deterministic():
    cfg = SyntheticSceneConfig(n_scenes=5, image_size=32, seed=11)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert_same_occasions(a, b)
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))


def test_synthetic_survive_manifest_roundtrip(tmp_path):
    scenes = generate_synthetic(SyntheticSceneConfig(n_scenes=200, image_size=64, seed=2))
    assert prune(scenes)[1] == {}
    assert all(1 <= len(o.items) <= 4 for o in scenes)
    loaded = load_manifest(save_manifest(scenes, tmp_path))
    assert_same_occasions(scenes, loaded)


def test_synthetic_placement_failure():
    cfg = SyntheticSceneConfig(n_scenes=1, image_size=32, items_per_scene=(6, 6),
                               extent=(0.3, 0.4), max_retries=20)
    with pytest.raises(PlacementFailure):
        generate_synthetic(cfg)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_synthetic_always_valid(seed):
    scenes = generate_synthetic(SyntheticSceneConfig(n_scenes=3, image_size=32, seed=seed))
    assert prune(scenes)[1] == {}
