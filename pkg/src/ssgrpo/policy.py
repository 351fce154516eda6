"""Slot-factorized categorical policy with exact log-probabilities.

Each sample owns five independent categorical slots: a surface template
(``M`` choices) and the four box coordinates (``B`` bins each). A completion
is the chosen template instantiated with the bin-center pixel coordinates,
sorted so the box is well ordered. Everything the GRPO objective needs,
log-probabilities and their gradients, is available in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from ssgrpo.core import BBox, GroundingSample
from ssgrpo.errors import ChoiceOutOfRange, UnknownSample
from ssgrpo.parsing import check_format

MAX_COMPLETION_CHARS = 256
N_COORDS = 4

VALID_TEMPLATE = (
    "<think>The described finding lies in the region [{x1}, {y1}, {x2}, {y2}].</think> "
    '<answer>{{"box": [{x1}, {y1}, {x2}, {y2}]}}</answer>'
)
# answer lacks the braces required by the structure pattern
UNBRACED_TEMPLATE = (
    "<think>The described finding lies in the region [{x1}, {y1}, {x2}, {y2}].</think> "
    "<answer>[{x1}, {y1}, {x2}, {y2}]</answer>"
)
DEFAULT_TEMPLATES = (VALID_TEMPLATE, UNBRACED_TEMPLATE)


@dataclass(frozen=True)
class SlotSpec:
    bins: int = 16
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    valid_templates: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be at least 2")
        if len(self.templates) < 2:
            raise ValueError("need at least two surface templates")
        valid = []
        for i, t in enumerate(self.templates):
            for name in ("{x1}", "{y1}", "{x2}", "{y2}"):
                if name not in t:
                    raise ValueError(f"template {i} lacks placeholder {name}")
            if check_format(t.format(x1=1, y1=2, x2=3, y2=4)):
                valid.append(i)
        if not valid or len(valid) == len(self.templates):
            raise ValueError("need at least one format-valid and one format-invalid template")
        object.__setattr__(self, "valid_templates", tuple(valid))

    @property
    def slot_sizes(self) -> tuple[int, ...]:
        return (len(self.templates),) + (self.bins,) * N_COORDS

    def audit(self, max_extent: int) -> int:
        """Longest possible completion for images up to ``max_extent`` pixels.

        Raises if any template could exceed the completion length budget.
        """
        if self.bins > max_extent:
            raise ValueError(f"{self.bins} bins cannot map distinctly onto {max_extent} pixels")
        longest = 0
        for i, t in enumerate(self.templates):
            n = len(t.format(x1=max_extent, y1=max_extent, x2=max_extent, y2=max_extent))
            if n > MAX_COMPLETION_CHARS:
                raise ValueError(f"template {i} renders {n} > {MAX_COMPLETION_CHARS} characters")
            longest = max(longest, n)
        return longest

    def to_dict(self) -> dict:
        return {"bins": self.bins, "templates": list(self.templates)}

    @classmethod
    def from_dict(cls, d: dict) -> "SlotSpec":
        return cls(bins=int(d["bins"]), templates=tuple(d["templates"]))


@dataclass(frozen=True)
class PolicyParams:
    """Logits for every sample: ``template`` is (N, M), ``coords`` is (N, 4, B).

    Treated as immutable; updates go through :meth:`add` and return a copy.
    Gradients use the same type.
    """

    spec: SlotSpec
    sample_ids: tuple[str, ...]
    template: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        n = len(self.sample_ids)
        if self.template.shape != (n, len(self.spec.templates)):
            raise ValueError(f"template logits shape {self.template.shape} mismatch")
        if self.coords.shape != (n, N_COORDS, self.spec.bins):
            raise ValueError(f"coordinate logits shape {self.coords.shape} mismatch")
        if len(set(self.sample_ids)) != n:
            raise ValueError("duplicate sample ids")
        object.__setattr__(self, "_rows", {sid: i for i, sid in enumerate(self.sample_ids)})

    @classmethod
    def uniform(cls, spec: SlotSpec, sample_ids: Sequence[str]) -> "PolicyParams":
        n = len(sample_ids)
        return cls(
            spec,
            tuple(sample_ids),
            np.zeros((n, len(spec.templates))),
            np.zeros((n, N_COORDS, spec.bins)),
        )

    def row(self, sample_id: str) -> int:
        try:
            return self._rows[sample_id]
        except KeyError:
            raise UnknownSample(sample_id) from None

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(self.spec, self.sample_ids, np.zeros_like(self.template), np.zeros_like(self.coords))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.spec, self.sample_ids, self.template.copy(), self.coords.copy())

    def add(self, other: "PolicyParams", scale: float = 1.0) -> "PolicyParams":
        return PolicyParams(
            self.spec,
            self.sample_ids,
            self.template + scale * other.template,
            self.coords + scale * other.coords,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([self.template.ravel(), self.coords.ravel()])

    def with_flat(self, x: np.ndarray) -> "PolicyParams":
        k = self.template.size
        return PolicyParams(
            self.spec,
            self.sample_ids,
            x[:k].reshape(self.template.shape).copy(),
            x[k:].reshape(self.coords.shape).copy(),
        )

    def slot_logits(self, sample_id: str) -> list[np.ndarray]:
        r = self.row(sample_id)
        return [self.template[r]] + [self.coords[r, j] for j in range(N_COORDS)]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.template).all() and np.isfinite(self.coords).all())


@dataclass(frozen=True)
class Completion:
    sample_id: str
    slots: tuple[int, int, int, int, int]
    text: str
    logprob_old: float
    box: BBox


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def bin_center(b: int, bins: int, extent: int) -> int:
    """Pixel of bin ``b``: (b + 0.5) * extent / bins, rounded half up."""
    return ((2 * b + 1) * extent + bins) // (2 * bins)


def nearest_bin(coord: int, bins: int, extent: int) -> int:
    """Bin whose center is closest to ``coord``; ties go to the lower bin."""
    dists = [abs(bin_center(b, bins, extent) - coord) for b in range(bins)]
    return int(np.argmin(dists))


def slots_to_box(slots: Sequence[int], sample: GroundingSample, bins: int) -> BBox:
    _, bx1, by1, bx2, by2 = slots
    xa, xb = bin_center(bx1, bins, sample.width), bin_center(bx2, bins, sample.width)
    ya, yb = bin_center(by1, bins, sample.height), bin_center(by2, bins, sample.height)
    return BBox(min(xa, xb), min(ya, yb), max(xa, xb), max(ya, yb))


def render_completion(slots: Sequence[int], sample: GroundingSample, spec: SlotSpec) -> str:
    box = slots_to_box(slots, sample, spec.bins)
    return spec.templates[slots[0]].format(x1=box.x1, y1=box.y1, x2=box.x2, y2=box.y2)


def _check_slots(params: PolicyParams, slots: Sequence[int]) -> None:
    if len(slots) != N_COORDS + 1:
        raise ChoiceOutOfRange(f"expected {N_COORDS + 1} slot values, got {len(slots)}")
    for v, size in zip(slots, params.spec.slot_sizes):
        if not 0 <= v < size:
            raise ChoiceOutOfRange(f"slot value {v} outside [0, {size})")


def make_completion(params: PolicyParams, sample: GroundingSample, slots: Sequence[int]) -> Completion:
    """Completion for explicit slot values, with log-prob under ``params``."""
    slots = tuple(int(s) for s in slots)
    _check_slots(params, slots)
    text = render_completion(slots, sample, params.spec)
    lp = _log_prob_slots(params, sample.id, slots)
    return Completion(sample.id, slots, text, lp, slots_to_box(slots, sample, params.spec.bins))


def sample_completion(params: PolicyParams, sample: GroundingSample, rng: np.random.Generator) -> Completion:
    logits = params.slot_logits(sample.id)
    u = rng.random(len(logits))
    slots = []
    for z, ui in zip(logits, u):
        cdf = np.cumsum(_softmax(z))
        idx = int(np.searchsorted(cdf, ui * cdf[-1], side="right"))
        slots.append(min(idx, len(z) - 1))
    return make_completion(params, sample, slots)


def _log_prob_slots(params: PolicyParams, sample_id: str, slots: Sequence[int]) -> float:
    logits = params.slot_logits(sample_id)
    return float(sum(_log_softmax(z)[v] for z, v in zip(logits, slots)))


def log_prob(params: PolicyParams, c: Completion, sample: Optional[GroundingSample] = None) -> float:
    _check_slots(params, c.slots)
    return _log_prob_slots(params, c.sample_id, c.slots)


def log_prob_grad(params: PolicyParams, c: Completion, sample: Optional[GroundingSample] = None) -> PolicyParams:
    """d log pi(c) / d logits: one-hot(choice) - softmax per slot, zero elsewhere."""
    _check_slots(params, c.slots)
    r = params.row(c.sample_id)
    grad = params.zeros_like()
    t = -_softmax(params.template[r])
    t[c.slots[0]] += 1.0
    grad.template[r] = t
    for j in range(N_COORDS):
        g = -_softmax(params.coords[r, j])
        g[c.slots[j + 1]] += 1.0
        grad.coords[r, j] = g
    return grad


def greedy_decode(params: PolicyParams, sample: GroundingSample) -> Completion:
    # np.argmax returns the first maximum, so ties go to the lowest index
    slots = [int(np.argmax(z)) for z in params.slot_logits(sample.id)]
    return make_completion(params, sample, slots)


def enumerate_slots(spec: SlotSpec) -> Iterator[tuple[int, ...]]:
    """Every slot tuple, template-major."""
    return np.ndindex(*spec.slot_sizes)
