"""Caption-frequency baseline: no visual input at all.

Emits the most frequent training caption for the sample's destination
kind (falling back to the globally most frequent caption for unseen
kinds).  Frequency ties break on the lexicographically smallest token-id
tuple so the baseline is fully deterministic.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .data import Sample


def _most_common(captions: list[tuple[int, ...]]) -> list[int]:
    counts = Counter(captions)
    best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return list(best[0])


@dataclass
class FrequencyBaseline:
    by_kind: dict[str, list[int]]
    fallback: list[int]

    def generate(self, sample: Sample) -> list[int]:
        return list(self.by_kind.get(sample.destination_kind, self.fallback))


def fit_frequency_baseline(train: list[Sample]) -> FrequencyBaseline:
    if not train:
        raise ValueError("cannot fit the baseline on an empty training set")
    per_kind: dict[str, list[tuple[int, ...]]] = {}
    everything: list[tuple[int, ...]] = []
    for s in train:
        cap = tuple(s.caption_train)
        per_kind.setdefault(s.destination_kind, []).append(cap)
        everything.append(cap)
    return FrequencyBaseline(
        by_kind={k: _most_common(v) for k, v in per_kind.items()},
        fallback=_most_common(everything))
