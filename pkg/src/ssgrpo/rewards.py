"""Per-completion format, spatial, and semantic rewards."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from ssgrpo.core import BBox, GroundingSample, ImageRef, box_area, box_iou
from ssgrpo.embed import SimilarityProvider
from ssgrpo.parsing import check_format, extract_answer_box

IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class RewardWeights:
    format: float = 1.0
    spatial: float = 1.0
    semantic: float = 1.0


@dataclass(frozen=True)
class RewardBreakdown:
    format: int
    spatial: int
    semantic: float
    total: float
    iou: float = 0.0

    def to_dict(self) -> dict:
        return {
            "format": self.format,
            "spatial": self.spatial,
            "semantic": self.semantic,
            "total": self.total,
        }


def format_reward(text: str) -> int:
    return int(check_format(text))


def spatial_reward(pred: Optional[BBox], gt: BBox, threshold: float = IOU_THRESHOLD) -> int:
    # strictly greater: IoU exactly at the threshold does not count
    return int(pred is not None and box_iou(pred, gt) > threshold)


def clamp_similarity(cosine: float) -> float:
    """Map a cosine in [-1, 1] onto a reward in [0, 1]."""
    return max(0.0, min(1.0, cosine))


def semantic_reward(
    image: ImageRef, pred: Optional[BBox], phrase: str, provider: SimilarityProvider
) -> float:
    if pred is None or box_area(pred) == 0:
        return 0.0
    return clamp_similarity(provider.similarity(image, pred, phrase))


def total_reward(
    completion_text: str,
    sample: GroundingSample,
    provider: SimilarityProvider,
    weights: RewardWeights = RewardWeights(),
    iou_threshold: float = IOU_THRESHOLD,
) -> RewardBreakdown:
    """Score one completion. ``total`` is the weighted sum (plain sum by default)."""
    fmt = format_reward(completion_text)
    pred = extract_answer_box(completion_text)
    iou = box_iou(pred, sample.gt_box) if pred is not None else 0.0
    spatial = int(pred is not None and iou > iou_threshold)
    semantic = semantic_reward(sample.image, pred, sample.phrase, provider)
    total = weights.format * fmt + weights.spatial * spatial + weights.semantic * semantic
    return RewardBreakdown(fmt, spatial, semantic, total, iou)
