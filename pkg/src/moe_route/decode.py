"""Greedy CTC decoding and token error scoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Hypothesis:
    tokens: tuple
    seconds: float = 0.0


def collapse_path(path, blank: int) -> tuple:
    """Collapse adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(int(p))
        prev = p
    return tuple(out)


def greedy_ctc_decode(logits) -> Hypothesis:
    arr = np.asarray(getattr(logits, "data", logits))
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ValueError(f"greedy_ctc_decode: need T x V logits with V >= 2, got {arr.shape}")
    blank = arr.shape[1] - 1
    path = arr.argmax(axis=1)
    return Hypothesis(tokens=collapse_path(path, blank))


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    a, b = list(a), list(b)
    if len(a) > len(b):
        a, b = b, a
    row = list(range(len(a) + 1))
    for j, y in enumerate(b, start=1):
        prev_diag = row[0]
        row[0] = j
        for i, x in enumerate(a, start=1):
            cur = row[i]
            row[i] = min(prev_diag + (x != y), row[i - 1] + 1, cur + 1)
            prev_diag = cur
    return row[-1]


def word_error_rate(ref, hyp) -> float:
    """Edit errors divided by reference length. Synthetic tokens stand in
    for words, so this is a token error rate reported under the usual name."""
    ref = list(ref)
    if not ref:
        raise ValueError("word_error_rate: empty reference")
    hyp = list(getattr(hyp, "tokens", hyp))
    return edit_distance(ref, hyp) / len(ref)


def aggregate_error_rate(pairs) -> dict:
    """Total errors over total reference tokens for (ref, hyp) pairs."""
    errors = 0
    tokens = 0
    for ref, hyp in pairs:
        ref = list(ref)
        if not ref:
            raise ValueError("aggregate_error_rate: empty reference")
        errors += edit_distance(ref, list(getattr(hyp, "tokens", hyp)))
        tokens += len(ref)
    return {"errors": errors, "tokens": tokens,
            "wer": errors / tokens if tokens else 0.0}
