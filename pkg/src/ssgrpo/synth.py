"""Symbolic labeled-rectangle scenes and grounding datasets built from them.

Scenes carry no pixels. The semantic oracle only needs geometry and class
labels, which keeps every reward exactly computable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ssgrpo.core import BBox, GroundingSample, ImageRef, box_area, box_iou, intersection_area
from ssgrpo.errors import GenerationExhausted, InvalidConfig

DEFAULT_CLASSES = ("mass", "nodule", "opacity", "effusion", "pneumothorax", "consolidation")
QUALIFIERS = ("left", "right")

MAX_PAIR_IOU = 0.3
# Cap on overlap / smaller-area between two objects. Keeps a target's own box
# dominated by its class (similarity >= 0.9 with up to three neighbours).
MAX_PAIR_COVER = 0.25
SCENE_ATTEMPTS = 50


@dataclass(frozen=True)
class SceneObject:
    class_name: str
    rect: BBox


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    objects: tuple[SceneObject, ...]
    classes: tuple[str, ...]

    def __post_init__(self):
        for obj in self.objects:
            if not obj.rect.within(self.width, self.height):
                raise ValueError(f"object {obj} outside {self.width}x{self.height} scene")
            if obj.class_name not in self.classes:
                raise ValueError(f"object class {obj.class_name!r} not in vocabulary")

    def rects_of(self, class_name: str) -> list[BBox]:
        return [o.rect for o in self.objects if o.class_name == class_name]


@dataclass
class SynthConfig:
    num_samples: int = 16
    width: int = 64
    height: int = 64
    classes: tuple[str, ...] = DEFAULT_CLASSES
    min_objects: int = 2
    max_objects: int = 4
    min_object_size: int = 20
    max_object_size: int = 36
    distractor_rate: float = 0.3
    seed: int = 0
    max_retries: int = 200

    def validate(self) -> None:
        for name in ("num_samples", "width", "height", "min_objects", "max_objects",
                     "min_object_size", "max_object_size", "max_retries"):
            if getattr(self, name) <= 0:
                raise InvalidConfig(name, "must be positive")
        if len(self.classes) == 0:
            raise InvalidConfig("classes", "must name at least one class")
        if len(set(self.classes)) != len(self.classes):
            raise InvalidConfig("classes", "class names must be distinct")
        if self.min_objects > self.max_objects:
            raise InvalidConfig("min_objects", "exceeds max_objects")
        if self.min_object_size > self.max_object_size:
            raise InvalidConfig("min_object_size", "exceeds max_object_size")
        if self.max_object_size > min(self.width, self.height):
            raise InvalidConfig("max_object_size", "larger than the scene")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise InvalidConfig("distractor_rate", "must lie in [0, 1]")
        # every object other than a distractor needs its own class
        if self.max_objects > len(self.classes):
            raise InvalidConfig("max_objects", "exceeds the number of classes")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(sorted(unknown)[0], "unknown field")
        d = dict(d)
        if "classes" in d:
            if not isinstance(d["classes"], list) or not all(isinstance(c, str) for c in d["classes"]):
                raise InvalidConfig("classes", "must be a list of strings")
            d["classes"] = tuple(d["classes"])
        for name, value in d.items():
            if name == "classes":
                continue
            expected = float if name == "distractor_rate" else int
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise InvalidConfig(name, f"expected a number, got {value!r}")
            if expected is int and not float(value).is_integer():
                raise InvalidConfig(name, "expected an integer")
            d[name] = expected(value)
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "width": self.width,
            "height": self.height,
            "classes": list(self.classes),
            "min_objects": self.min_objects,
            "max_objects": self.max_objects,
            "min_object_size": self.min_object_size,
            "max_object_size": self.max_object_size,
            "distractor_rate": self.distractor_rate,
            "seed": self.seed,
            "max_retries": self.max_retries,
        }


def _random_rect(cfg: SynthConfig, rng: np.random.Generator) -> BBox:
    w = int(rng.integers(cfg.min_object_size, cfg.max_object_size + 1))
    h = int(rng.integers(cfg.min_object_size, cfg.max_object_size + 1))
    x1 = int(rng.integers(0, cfg.width - w + 1))
    y1 = int(rng.integers(0, cfg.height - h + 1))
    return BBox(x1, y1, x1 + w, y1 + h)


def _compatible(rect: BBox, placed: list[BBox]) -> bool:
    for other in placed:
        if box_iou(rect, other) > MAX_PAIR_IOU:
            return False
        smaller = min(box_area(rect), box_area(other))
        if intersection_area(rect, other) > MAX_PAIR_COVER * smaller:
            return False
    return True


def _center_x2(b: BBox) -> int:
    # twice the center x, kept integral for exact comparison
    return b.x1 + b.x2


def _place(cfg: SynthConfig, rng: np.random.Generator, labels, with_distractor: bool) -> list[BBox]:
    placed: list[BBox] = []
    for i in range(len(labels)):
        for _ in range(cfg.max_retries):
            rect = _random_rect(cfg, rng)
            if not _compatible(rect, placed):
                continue
            if with_distractor and i == 1 and _center_x2(rect) == _center_x2(placed[0]):
                continue
            placed.append(rect)
            break
        else:
            break  # settle for fewer objects
    return placed


def generate_scene(cfg: SynthConfig, rng: np.random.Generator) -> Scene:
    """Sample a scene whose first object is the anchor for a query.

    With probability ``distractor_rate`` the second object shares the anchor's
    class and has a different center x. All remaining objects take distinct
    classes other than the anchor's, so the anchor class names either one
    object or a left/right pair.
    """
    n_target = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    with_distractor = bool(rng.random() < cfg.distractor_rate)
    anchor = cfg.classes[int(rng.integers(len(cfg.classes)))]
    others = [c for c in cfg.classes if c != anchor]
    others = [others[i] for i in rng.permutation(len(others))]

    labels = [anchor]
    if with_distractor:
        labels.append(anchor)
    labels.extend(others)
    min_needed = 2 if with_distractor else 1
    labels = labels[:n_target]
    if len(labels) < min_needed:
        raise GenerationExhausted("not enough classes for the requested object count")

    required = max(min_needed, cfg.min_objects)
    for _ in range(SCENE_ATTEMPTS):
        placed = _place(cfg, rng, labels, with_distractor)
        if len(placed) >= required:
            break
    else:
        raise GenerationExhausted(
            f"could not place {required} objects in {SCENE_ATTEMPTS} scene attempts"
        )
    objects = tuple(SceneObject(label, rect) for label, rect in zip(labels, placed))
    return Scene(cfg.width, cfg.height, objects, tuple(cfg.classes))


def phrase_class(phrase: str, classes) -> Optional[str]:
    """Class named by a phrase, ignoring a leading left/right qualifier."""
    if phrase in classes:
        return phrase
    head, _, rest = phrase.partition(" ")
    if head in QUALIFIERS and rest in classes:
        return rest
    return None


def resolve_phrase(scene: Scene, phrase: str) -> list[SceneObject]:
    """Every object of ``scene`` that ``phrase`` could refer to."""
    cls = phrase_class(phrase, scene.classes)
    if cls is None:
        return []
    candidates = [o for o in scene.objects if o.class_name == cls]
    head = phrase.split(" ", 1)[0]
    if phrase == cls:
        return candidates
    if len(candidates) < 2:
        return []
    key = (lambda o: _center_x2(o.rect))
    extreme = min(candidates, key=key) if head == "left" else max(candidates, key=key)
    ties = [o for o in candidates if key(o) == key(extreme)]
    return ties


def _query_for(scene: Scene, target: SceneObject) -> str:
    same = [o for o in scene.objects if o.class_name == target.class_name]
    if len(same) == 1:
        return target.class_name
    other = same[0] if same[1] is target else same[1]
    side = "left" if _center_x2(target.rect) < _center_x2(other.rect) else "right"
    return f"{side} {target.class_name}"


def generate_dataset(cfg: SynthConfig) -> list[GroundingSample]:
    """One grounding sample per scene, deterministic in ``cfg.seed``."""
    cfg.validate()
    samples = []
    width = len(str(cfg.num_samples - 1))
    for i in range(cfg.num_samples):
        rng = np.random.default_rng([cfg.seed, i])
        scene = generate_scene(cfg, rng)
        same = [o for o in scene.objects if o.class_name == scene.objects[0].class_name]
        target = same[int(rng.integers(len(same)))]
        phrase = _query_for(scene, target)
        samples.append(
            GroundingSample(
                id=f"syn-{cfg.seed}-{i:0{width}d}",
                image=ImageRef.from_scene(scene),
                phrase=phrase,
                gt_box=target.rect,
                width=scene.width,
                height=scene.height,
            )
        )
    return samples
