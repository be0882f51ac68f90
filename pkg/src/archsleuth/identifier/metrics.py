"""Edit distance and label error rate."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def edit_distance(p: Sequence, q: Sequence) -> int:
    """Levenshtein distance (unit-cost insert, delete, substitute)."""
    p, q = list(p), list(q)
    prev = np.arange(len(q) + 1)
    for i, a in enumerate(p, start=1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, b in enumerate(q, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a != b))
        prev = cur
    return int(prev[-1])


def label_error_rate(preds: Sequence[Sequence], oracles: Sequence[Sequence]) -> float:
    """Mean over samples of ED(prediction, oracle) / |oracle|."""
    if len(preds) != len(oracles):
        raise ValueError(f"{len(preds)} predictions for {len(oracles)} oracle sequences")
    if not oracles:
        raise ValueError("empty corpus")
    total = 0.0
    for i, (h, z) in enumerate(zip(preds, oracles)):
        if len(z) == 0:
            raise ValueError(f"oracle sequence {i} is empty")
        total += edit_distance(h, z) / len(z)
    return total / len(oracles)


def per_sample_ler(preds: Sequence[Sequence], oracles: Sequence[Sequence]) -> np.ndarray:
    return np.array([edit_distance(h, z) / len(z) for h, z in zip(preds, oracles)])
