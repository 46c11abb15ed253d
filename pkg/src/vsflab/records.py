"""Per-run artifacts shared by the sampler and the evaluation harness."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .data import Prompt, ToyImage, oracle_classify
from .guidance import GuidanceSpec


@dataclass
class RunRecord:
    """One sampled image plus everything needed to score and inspect it.

    ``neg_maps`` has shape ``(steps, layers, rows, cols)`` for VSF runs with a
    non-empty negative prompt and is None otherwise.
    """

    spec: GuidanceSpec
    pos: Prompt
    neg: Prompt | None
    seed: int
    steps: int
    image: ToyImage
    neg_maps: np.ndarray | None = None
    positive: int | None = None
    negative: int | None = None
    quality: float | None = None
    run_id: str = field(default="")

    def __post_init__(self):
        if not self.run_id:
            self.run_id = run_id_for(self.spec, self.pos, self.neg, self.seed, self.steps)

    @property
    def scored(self):
        return self.positive is not None


def run_id_for(spec, pos, neg, seed, steps):
    key = repr((sorted(spec.as_dict().items()), pos.ids, None if neg is None else neg.ids, seed, steps))
    return hashlib.sha1(key.encode()).hexdigest()[:12]


def negated_attribute(neg):
    """``("color", name)`` or ``("shape", name)`` named by a negative prompt."""
    if neg is None:
        return None
    if neg.color is not None:
        return ("color", neg.color)
    if neg.shape is not None:
        return ("shape", neg.shape)
    return None


def score_image(pixels, pos, neg):
    """Binary positive/negative scores and the quality proxy for one image."""
    result = oracle_classify(pixels)
    return score_from_oracle(result, pos, neg)


def score_from_oracle(result, pos, neg):
    if pos.shape is not None:
        positive = int(result.shape == pos.shape)
    elif pos.color is not None:
        positive = int(pos.color in result.colors)
    else:
        positive = int(result.shape is not None)
    attr = negated_attribute(neg)
    if attr is None:
        negative = 1
    elif attr[0] == "color":
        negative = int(attr[1] not in result.colors)
    else:
        negative = int(result.shape != attr[1])
    return positive, negative, result.quality


__all__ = ["RunRecord", "run_id_for", "negated_attribute", "score_image", "score_from_oracle"]
