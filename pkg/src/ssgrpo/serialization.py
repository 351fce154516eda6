"""On-disk formats: dataset JSONL, checkpoints, training logs.

Everything is UTF-8 JSON written with compact separators and a fixed key
order, so identical content always produces identical bytes. Floats use
Python's shortest round-trip repr, which reloads bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ssgrpo.core import BBox, GroundingSample, ImageRef
from ssgrpo.errors import CheckpointVersionError, DataError, InvalidConfig
from ssgrpo.grpo import StepRecord, TrainConfig, TrainState
from ssgrpo.policy import PolicyParams, SlotSpec
from ssgrpo.synth import Scene, SceneObject

FORMAT_VERSION = 1


def dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def write_text_atomic(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# --- samples -------------------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    return {
        "width": scene.width,
        "height": scene.height,
        "classes": list(scene.classes),
        "objects": [{"class": o.class_name, "box": o.rect.to_list()} for o in scene.objects],
    }


def scene_from_dict(d: dict) -> Scene:
    return Scene(
        width=int(d["width"]),
        height=int(d["height"]),
        objects=tuple(SceneObject(o["class"], BBox.of(o["box"])) for o in d["objects"]),
        classes=tuple(d["classes"]),
    )


def sample_to_dict(s: GroundingSample) -> dict:
    if s.image.kind == ImageRef.SYNTHETIC:
        image = {"kind": ImageRef.SYNTHETIC, "scene": scene_to_dict(s.image.scene)}
    else:
        image = {"kind": ImageRef.FILE, "path": s.image.path}
    return {
        "id": s.id,
        "image": image,
        "phrase": s.phrase,
        "box": s.gt_box.to_list(),
        "width": s.width,
        "height": s.height,
    }


def sample_from_dict(d: dict) -> GroundingSample:
    img = d["image"]
    if img["kind"] == ImageRef.SYNTHETIC:
        image = ImageRef.from_scene(scene_from_dict(img["scene"]))
    elif img["kind"] == ImageRef.FILE:
        image = ImageRef.from_path(img["path"])
    else:
        raise DataError(f"unknown image kind {img['kind']!r}")
    return GroundingSample(
        id=str(d["id"]),
        image=image,
        phrase=d["phrase"],
        gt_box=BBox.of(d["box"]),
        width=int(d["width"]),
        height=int(d["height"]),
    )


def dataset_to_jsonl(samples: Iterable[GroundingSample]) -> str:
    return "".join(dumps(sample_to_dict(s)) + "\n" for s in samples)


def read_dataset(path) -> list[GroundingSample]:
    samples, seen = [], set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                s = sample_from_dict(json.loads(line))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad sample: {exc}") from exc
            if s.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate sample id {s.id!r}")
            seen.add(s.id)
            samples.append(s)
    if not samples:
        raise DataError(f"{path}: dataset is empty")
    return samples


def write_dataset(samples: Iterable[GroundingSample], path) -> None:
    write_text_atomic(Path(path), dataset_to_jsonl(samples))


# --- checkpoints ---------------------------------------------------------


def config_hash(cfg: TrainConfig, spec: SlotSpec) -> str:
    """Hash of everything that must match for a resume; ``steps`` is excluded."""
    d = cfg.to_dict()
    d.pop("steps")
    payload = dumps({"config": d, "slot_spec": spec.to_dict()})
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _array_to_dict(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _array_from_dict(d: dict) -> np.ndarray:
    data = np.array(d["data"], dtype=np.float64)
    shape = tuple(int(n) for n in d["shape"])
    if data.size != math.prod(shape):
        raise DataError(f"array data of length {data.size} does not fit shape {shape}")
    return data.reshape(shape)


def _params_to_dict(p: PolicyParams) -> dict:
    return {"template": _array_to_dict(p.template), "coords": _array_to_dict(p.coords)}


def _params_from_dict(d: dict, spec: SlotSpec, ids: tuple[str, ...]) -> PolicyParams:
    return PolicyParams(spec, ids, _array_from_dict(d["template"]), _array_from_dict(d["coords"]))


def checkpoint_to_text(state: TrainState, cfg: TrainConfig) -> str:
    spec = state.params_current.spec
    doc = {
        "format_version": FORMAT_VERSION,
        "step": state.step,
        "config_hash": config_hash(cfg, spec),
        "config": cfg.to_dict(),
        "slot_spec": spec.to_dict(),
        "sample_ids": list(state.params_current.sample_ids),
        "params": {
            "current": _params_to_dict(state.params_current),
            "old": _params_to_dict(state.params_old),
            "ref": _params_to_dict(state.params_ref),
        },
        # member streams derive from (seed, step, member), so this is the full RNG state
        "rng": {"seed": state.seed, "step": state.step},
    }
    return dumps(doc) + "\n"


def save_checkpoint(state: TrainState, cfg: TrainConfig, path) -> None:
    write_text_atomic(Path(path), checkpoint_to_text(state, cfg))


def checkpoint_from_text(text: str) -> tuple[TrainState, TrainConfig]:
    doc = json.loads(text)
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format_version {version!r} is not supported (expected {FORMAT_VERSION})"
        )
    cfg = TrainConfig.from_dict(doc["config"])
    spec = SlotSpec.from_dict(doc["slot_spec"])
    if config_hash(cfg, spec) != doc["config_hash"]:
        raise DataError("checkpoint config hash does not match its config")
    ids = tuple(doc["sample_ids"])
    p = doc["params"]
    state = TrainState(
        params_current=_params_from_dict(p["current"], spec, ids),
        params_old=_params_from_dict(p["old"], spec, ids),
        params_ref=_params_from_dict(p["ref"], spec, ids),
        step=int(doc["step"]),
        seed=int(doc["rng"]["seed"]),
    )
    if int(doc["rng"]["step"]) != state.step:
        raise DataError("checkpoint rng step disagrees with step counter")
    return state, cfg


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    return checkpoint_from_text(Path(path).read_text(encoding="utf-8"))


# --- logs ----------------------------------------------------------------


def log_header(cfg: TrainConfig, spec: SlotSpec, extra: Optional[dict] = None) -> str:
    header = {"format_version": FORMAT_VERSION, "type": "header", "config": cfg.to_dict(),
              "slot_spec": spec.to_dict()}
    if extra:
        header.update(extra)
    return dumps(header) + "\n"


def record_line(record: StepRecord) -> str:
    return dumps(record.to_dict()) + "\n"


def parse_record(line: str) -> StepRecord:
    d = json.loads(line)
    rec = StepRecord(**d)
    values = [v for k, v in d.items() if k != "step"]
    if not all(math.isfinite(v) for v in values):
        raise DataError(f"non-finite field in log record {d}")
    if not 0.0 <= rec.clipped_fraction <= 1.0:
        raise DataError(f"clipped_fraction out of range in {d}")
    return rec


def read_log(path) -> tuple[dict, list[StepRecord]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty log")
    header = json.loads(lines[0])
    if header.get("type") != "header":
        raise DataError(f"{path}: first line is not a log header")
    return header, [parse_record(l) for l in lines[1:] if l.strip()]


def load_config_file(path) -> dict:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidConfig(str(path), f"not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise InvalidConfig(str(path), "config must be a JSON object")
    return d
