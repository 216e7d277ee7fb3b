from __future__ import annotations

import re
from typing import List

_WORD = re.compile(r"[^\W_]+")


def tokenize_words(text: str) -> List[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _WORD.findall(text.lower())


def ascii_ratio(text: str) -> float:
    letters = [ch for ch in text if not ch.isspace()]
    if not letters:
        return 0.0
    return sum(ch.isascii() for ch in letters) / len(letters)
