"""Acc@0.5 / mIoU evaluation and mask-to-box conversion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ssgrpo.core import BBox, GroundingSample, box_iou
from ssgrpo.errors import EmptyInput, LengthMismatch, RaggedGrid
from ssgrpo.parsing import extract_answer_box
from ssgrpo.policy import PolicyParams, bin_center, greedy_decode

ACC_THRESHOLD = 0.5


@dataclass(frozen=True)
class SampleResult:
    id: str
    iou: float
    hit: bool


@dataclass(frozen=True)
class EvalReport:
    n: int
    acc: float
    miou: float
    per_sample: tuple[SampleResult, ...]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "acc": self.acc,
            "miou": self.miou,
            "per_sample": [{"id": r.id, "iou": r.iou, "hit": r.hit} for r in self.per_sample],
        }


def evaluate(
    preds: Sequence[Optional[BBox]], gts: Sequence[BBox], ids: Optional[Sequence[str]] = None
) -> EvalReport:
    """Missing predictions count as IoU 0; a hit needs IoU strictly above 0.5."""
    if ids is None:
        ids = [str(i) for i in range(len(gts))]
    if not (len(preds) == len(gts) == len(ids)):
        raise LengthMismatch(f"{len(preds)} predictions, {len(gts)} ground truths, {len(ids)} ids")
    if not gts:
        raise EmptyInput("nothing to evaluate")
    results = []
    for sid, pred, gt in zip(ids, preds, gts):
        iou = box_iou(pred, gt) if pred is not None else 0.0
        results.append(SampleResult(sid, iou, iou > ACC_THRESHOLD))
    n = len(results)
    acc = sum(r.hit for r in results) / n
    miou = sum(r.iou for r in results) / n
    return EvalReport(n, acc, miou, tuple(results))


def evaluate_policy(params: PolicyParams, dataset: Sequence[GroundingSample]) -> EvalReport:
    preds = [extract_answer_box(greedy_decode(params, s).text) for s in dataset]
    return evaluate(preds, [s.gt_box for s in dataset], [s.id for s in dataset])


def uniform_baseline_acc(dataset: Sequence[GroundingSample], bins: int) -> float:
    """Exact expected Acc of a uniform slot policy, by enumerating all bin tuples.

    The template slot is irrelevant: every shipped template exposes the answer
    box to extraction, so only the B**4 coordinate tuples are enumerated.
    """
    if not dataset:
        raise EmptyInput("nothing to evaluate")
    total = 0.0
    for s in dataset:
        xs = np.array([bin_center(b, bins, s.width) for b in range(bins)])
        ys = np.array([bin_center(b, bins, s.height) for b in range(bins)])
        xa, ya, xb, yb = np.meshgrid(xs, ys, xs, ys, indexing="ij")
        x1, x2 = np.minimum(xa, xb), np.maximum(xa, xb)
        y1, y2 = np.minimum(ya, yb), np.maximum(ya, yb)
        g = s.gt_box
        iw = np.clip(np.minimum(x2, g.x2) - np.maximum(x1, g.x1), 0, None)
        ih = np.clip(np.minimum(y2, g.y2) - np.maximum(y1, g.y1), 0, None)
        inter = iw * ih
        union = (x2 - x1) * (y2 - y1) + (g.x2 - g.x1) * (g.y2 - g.y1) - inter
        iou = np.divide(inter, union, out=np.zeros(union.shape), where=union > 0)
        total += float((iou > ACC_THRESHOLD).mean())
    return total / len(dataset)


def mask_to_box(mask) -> Optional[BBox]:
    """Tight box around the true cells of a row-major boolean grid."""
    rows = list(mask)
    if rows and len({len(r) for r in rows}) > 1:
        raise RaggedGrid("mask rows have different lengths")
    grid = np.asarray(rows, dtype=bool)
    if grid.size == 0 or not grid.any():
        return None
    ys, xs = np.nonzero(grid)
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def rasterize(box: BBox, width: int, height: int) -> np.ndarray:
    grid = np.zeros((height, width), dtype=bool)
    grid[box.y1:box.y2, box.x1:box.x2] = True
    return grid
