"""Synthetic concise -> intended prompt corpora for the edge completer.

The intended prompts come from the deterministic mock completer run over the
shipped location profiles, so a corpus is a reproducible function of
(size, seed, profiles).
"""

from __future__ import annotations

import json
import random
from pathlib import Path

from .edge_node import EdgeFineTuneSample, ProfileStore
from .model_backend import MockBackend

CONCISE_TOPICS = (
    "best libraries",
    "cheap hotels",
    "coffee shops",
    "museums open",
    "night market",
    "bike rental",
    "quiet parks",
    "local food",
    "late bookstores",
    "gyms near me",
    "train station",
    "live music",
)


def generate_corpus(n: int = 4000, seed: int = 0, profiles: ProfileStore | None = None) -> list[EdgeFineTuneSample]:
    profiles = profiles if profiles is not None else ProfileStore.builtin()
    if not len(profiles):
        raise ValueError("corpus generation needs at least one location profile")
    rng = random.Random(seed)
    mock = MockBackend(seed)
    ids = sorted(profiles)
    out = []
    for _ in range(n):
        prof = profiles[rng.choice(ids)]
        concise = rng.choice(CONCISE_TOPICS)
        intended = mock.complete(concise, prof.facts, prof.max_facts_per_prompt).text
        out.append(EdgeFineTuneSample(concise, intended, prof.bs_id))
    return out


def write_corpus(samples: list[EdgeFineTuneSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"concise": s.concise, "intended": s.intended, "bs_id": s.bs_id}) + "\n")


def read_corpus(path: str | Path) -> list[EdgeFineTuneSample]:
    with open(path, encoding="utf-8") as fh:
        return [EdgeFineTuneSample(**json.loads(line)) for line in fh if line.strip()]
