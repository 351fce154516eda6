"""Completion-format regular expressions, kept verbatim in one place.

Conformance fixtures compare these strings byte for byte, so do not
reformat them.
"""

STRUCTURE_PATTERN = r"<think>.*?</think>\s*<answer>.*?\{.*\[\d+,\s*\d+,\s*\d+,\s*\d+\].*\}.*?</answer>"

BOX_PATTERN = r"\[(\d+),\s*(\d+),\s*(\d+),\s*(\d+)\]"
