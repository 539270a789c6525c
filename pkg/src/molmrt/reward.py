"""Composite per-candidate reward: validity + gated similarity + exactness.

    total = w_v * [valid] + w_s * Sim * [valid] + w_e * [exact]

Validity gates everything: an unparseable or valence-breaking candidate
scores 0 on all terms, including the string-level edit similarity.
Exactness means canonical-form equality, not byte equality of the raw
strings.
"""

from __future__ import annotations

from dataclasses import dataclass

from .molgraph import PRESERVE, STRIP, analyze, canonicalize
from .similarity import SimilarityFunction


class CorruptGroundTruth(ValueError):
    """The reference string itself fails to parse or validate."""


@dataclass(frozen=True)
class RewardWeights:
    w_v: float = 0.1
    w_s: float = 0.5
    w_e: float = 0.4

    def validate(self) -> "RewardWeights":
        if min(self.w_v, self.w_s, self.w_e) < 0:
            raise ValueError("reward weights must be >= 0")
        if self.w_v + self.w_s + self.w_e > 1.0 + 1e-12:
            raise ValueError("reward weights must sum to at most 1")
        return self


DEFAULT_WEIGHTS = RewardWeights()


@dataclass(frozen=True)
class RewardBreakdown:
    valid: bool
    exact: bool
    sim: float
    total: float


def compose_total(valid: bool, sim: float, exact: bool,
                  weights: RewardWeights) -> float:
    if not valid:
        return 0.0
    return weights.w_v + weights.w_s * sim + (weights.w_e if exact else 0.0)


def _canonical_under(s: str, stereo: str) -> str | None:
    an = analyze(s)
    if not an.valid:
        return None
    if stereo == PRESERVE:
        return an.canonical
    return canonicalize(an.graph, stereo=stereo)


def compute_reward(pred: str, truth_canonical: str,
                   sim_fn: SimilarityFunction,
                   weights: RewardWeights = DEFAULT_WEIGHTS,
                   stereo: str = PRESERVE) -> RewardBreakdown:
    """Score one candidate against a canonical reference.

    valid: pred parses and passes valence; exact: canonical forms match
    under the stereo mode; sim: sim_fn(pred, truth), zeroed when invalid.
    Raises CorruptGroundTruth when the reference itself is broken.
    """
    if stereo not in (PRESERVE, STRIP):
        raise ValueError(f"unknown stereo mode {stereo!r}")
    truth_c = _canonical_under(truth_canonical, stereo)
    if truth_c is None:
        raise CorruptGroundTruth(
            f"reference does not validate: {truth_canonical!r}")
    pred_c = _canonical_under(pred, stereo)
    if pred_c is None:
        return RewardBreakdown(valid=False, exact=False, sim=0.0, total=0.0)
    exact = pred_c == truth_c
    sim = sim_fn.evaluate(pred, truth_canonical)
    sim = min(1.0, max(0.0, sim))
    total = compose_total(True, sim, exact, weights)
    return RewardBreakdown(valid=True, exact=exact, sim=sim, total=total)


def compute_rewards_batch(preds: list[str], truth: str,
                          sim_fn: SimilarityFunction,
                          weights: RewardWeights = DEFAULT_WEIGHTS,
                          stereo: str = PRESERVE) -> list[RewardBreakdown]:
    """Element-wise compute_reward; output order matches input order."""
    return [compute_reward(p, truth, sim_fn, weights, stereo) for p in preds]
