import numpy as np
import pytest

from ssgrpo.core import box_iou
from ssgrpo.embed import synthetic_similarity
from ssgrpo.errors import InvalidConfig
from ssgrpo.synth import (
    SynthConfig,
    _query_for,
    generate_dataset,
    generate_scene,
    phrase_class,
    resolve_phrase,
)

from conftest import make_scene


def test_scene_deterministic():
    cfg = SynthConfig()
    assert generate_scene(cfg, np.random.default_rng(5)) == generate_scene(cfg, np.random.default_rng(5))


def test_dataset_deterministic():
    cfg = SynthConfig(num_samples=20, seed=3)
    assert generate_dataset(cfg) == generate_dataset(cfg)
    assert generate_dataset(cfg) != generate_dataset(SynthConfig(num_samples=20, seed=4))


def test_scene_bounds_and_overlap():
    cfg = SynthConfig(distractor_rate=0.5)
    for i in range(1000):
        scene = generate_scene(cfg, np.random.default_rng([99, i]))
        assert cfg.min_objects <= len(scene.objects) <= cfg.max_objects
        rects = [o.rect for o in scene.objects]
        for r in rects:
            assert r.within(cfg.width, cfg.height)
        for a in range(len(rects)):
            for b in range(a + 1, len(rects)):
                assert box_iou(rects[a], rects[b]) <= 0.3


def test_single_object_query():
    scene = make_scene([("mass", [3, 3, 20, 20]), ("nodule", [30, 30, 50, 50])])
    assert _query_for(scene, scene.objects[0]) == "mass"


def test_left_right_query():
    scene = make_scene([("mass", [0, 0, 20, 20]), ("mass", [40, 0, 60, 20])])
    assert _query_for(scene, scene.objects[0]) == "left mass"
    assert _query_for(scene, scene.objects[1]) == "right mass"


def test_phrase_class():
    classes = ("mass", "nodule")
    assert phrase_class("mass", classes) == "mass"
    assert phrase_class("right nodule", classes) == "nodule"
    assert phrase_class("upper mass", classes) is None
    assert phrase_class("opacity", classes) is None


@pytest.mark.parametrize("rate", [0.0, 0.3, 1.0])
def test_every_phrase_resolves_uniquely(rate):
    cfg = SynthConfig(num_samples=300, distractor_rate=rate, seed=1)
    n_qualified = 0
    for s in generate_dataset(cfg):
        found = resolve_phrase(s.image.scene, s.phrase)
        assert len(found) == 1 and found[0].rect == s.gt_box
        n_qualified += " " in s.phrase
    if rate == 1.0:
        assert n_qualified == 300
    if rate == 0.0:
        assert n_qualified == 0


def test_oracle_compatibility():
    cfg = SynthConfig(num_samples=500, distractor_rate=0.5, seed=2)
    for s in generate_dataset(cfg):
        cls = phrase_class(s.phrase, s.image.scene.classes)
        assert synthetic_similarity(s.image.scene, s.gt_box, cls) >= 0.9


def test_ids_and_sizes():
    ds = generate_dataset(SynthConfig(num_samples=12, seed=7))
    assert [s.id for s in ds][:2] == ["syn-7-00", "syn-7-01"]
    assert all((s.width, s.height) == (64, 64) for s in ds)


@pytest.mark.parametrize(
    "field,value",
    [
        ("classes", []),
        ("num_samples", 0),
        ("distractor_rate", 1.5),
        ("min_objects", 0),
        ("max_object_size", 100),
        ("max_objects", 9),
    ],
)
def test_invalid_config_names_field(field, value):
    with pytest.raises(InvalidConfig) as err:
        SynthConfig.from_dict({field: value})
    assert field in str(err.value)


def test_config_round_trip():
    cfg = SynthConfig(num_samples=5, seed=11, distractor_rate=0.7)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg
