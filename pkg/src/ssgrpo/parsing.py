"""Completion format checks, box extraction, and prompts that ask for boxes inside the reasoning."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from ssgrpo.core import BBox, GroundingSample
from ssgrpo.patterns import BOX_PATTERN, STRUCTURE_PATTERN

STRUCTURE_RE = re.compile(STRUCTURE_PATTERN, re.DOTALL)
BOX_RE = re.compile(BOX_PATTERN)
ANSWER_SPAN_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
THINK_SPAN_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL)

QUESTION_SLOT = "{question}"

DEFAULT_SYSTEM_TEXT = (
    "A conversation between User and Assistant. The user gives a medical image and a "
    "referring expression, and the Assistant localizes the described region. The "
    "Assistant first thinks about the reasoning process and then provides the answer. "
    "The reasoning process and answer are enclosed within <think> </think> and "
    "<answer> </answer> tags, respectively. The answer must contain the bounding box "
    'as JSON, e.g. <answer>{"box": [x1, y1, x2, y2]}</answer>.'
)

DEFAULT_CHAIN_OF_BOX = (
    "Whenever you mention a region of the image while thinking, "
    "append its bounding box coordinates [x1, y1, x2, y2] right after the region text."
)

DEFAULT_QUESTION_TEXT = "Locate the region described by: " + QUESTION_SLOT


@dataclass(frozen=True)
class PromptTemplate:
    system_text: str = DEFAULT_SYSTEM_TEXT
    chain_of_box_instruction: str = DEFAULT_CHAIN_OF_BOX
    question_text: str = DEFAULT_QUESTION_TEXT

    def __post_init__(self):
        if self.question_text.count(QUESTION_SLOT) != 1:
            raise ValueError(f"question_text must contain {QUESTION_SLOT} exactly once")


@dataclass(frozen=True)
class ParsedCompletion:
    format_ok: bool
    answer_box: Optional[BBox]
    think_boxes: list[BBox] = field(default_factory=list)


def _to_box(match: re.Match) -> Optional[BBox]:
    x1, y1, x2, y2 = (int(g) for g in match.groups())
    if x1 > x2 or y1 > y2:
        return None
    return BBox(x1, y1, x2, y2)


def check_format(text: str) -> bool:
    """True iff ``text`` matches both the structure and the box pattern."""
    return STRUCTURE_RE.search(text) is not None and BOX_RE.search(text) is not None


def extract_answer_box(text: str) -> Optional[BBox]:
    """First coordinate quadruple inside the first ``<answer>`` span.

    Quadruples with ``x1 > x2`` or ``y1 > y2`` count as unparseable.
    """
    span = ANSWER_SPAN_RE.search(text)
    if span is None:
        return None
    m = BOX_RE.search(span.group(1))
    if m is None:
        return None
    return _to_box(m)


def extract_think_boxes(text: str) -> list[BBox]:
    span = THINK_SPAN_RE.search(text)
    if span is None:
        return []
    boxes = (_to_box(m) for m in BOX_RE.finditer(span.group(1)))
    return [b for b in boxes if b is not None]


def parse_completion(text: str) -> ParsedCompletion:
    return ParsedCompletion(
        format_ok=check_format(text),
        answer_box=extract_answer_box(text),
        think_boxes=extract_think_boxes(text),
    )


def render_prompt(sample: GroundingSample, template: PromptTemplate = PromptTemplate()) -> str:
    question = template.question_text.replace(QUESTION_SLOT, sample.phrase)
    return "\n".join([template.system_text, template.chain_of_box_instruction, question])
