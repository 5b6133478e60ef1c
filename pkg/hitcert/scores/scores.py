"""
Conformity Scores Module
Symmetric test-position statistics V computed from predictor scores
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np
from scipy.stats import rankdata

from hitcert.core.errors import InputError

logger = logging.getLogger(__name__)

DEFAULT_LLR_EPSILON = 1e-12


class ScoreKind(str, Enum):
    MAX_POOL = "max"
    SUM_PRED = "sum"
    RANK_SUM = "ranksum"
    LOG_LIKELIHOOD_RATIO = "llr"
    MIN_POOL = "min"
    MEAN_PRED = "mean"


@dataclass(frozen=True)
class ScoreStatistic:
    """
    A conformity score V that depends only on the multiset of test occupants

    Larger V means stronger evidence that a hit is among the test entries.
    """

    kind: ScoreKind = ScoreKind.MAX_POOL
    clamp_epsilon: float = DEFAULT_LLR_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "kind", ScoreKind(self.kind))
        if not 0 < self.clamp_epsilon < 0.5:
            raise InputError(f"clamp_epsilon must lie in (0, 0.5), got {self.clamp_epsilon}")

    @classmethod
    def from_name(cls, name: str, clamp_epsilon: float = DEFAULT_LLR_EPSILON) -> "ScoreStatistic":
        try:
            return cls(ScoreKind(name.lower()), clamp_epsilon)
        except ValueError:
            choices = ", ".join(k.value for k in ScoreKind)
            raise InputError(f"unknown score '{name}' (choose from {choices})")

    @property
    def name(self) -> str:
        return self.kind.value

    def transform(self, pooled_scores) -> np.ndarray:
        """
        Per-element contribution of every pooled entry

        MaxPool/MinPool/SumPred/MeanPred use the raw prediction, RankSum the
        average rank among all pooled values, LogLikelihoodRatio the clamped
        log-odds. The contributions are computed once per pooled array and
        reused across all draws.
        """
        values = np.asarray(pooled_scores, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise InputError("pooled_scores must be a nonempty 1-d sequence")
        if not np.all(np.isfinite(values)):
            raise InputError("pooled_scores must be finite")

        if self.kind == ScoreKind.RANK_SUM:
            return rankdata(values, method="average")
        if self.kind == ScoreKind.LOG_LIKELIHOOD_RATIO:
            if np.any((values < 0.0) | (values > 1.0)):
                raise InputError("log-likelihood-ratio score needs predictor scores in [0, 1]")
            eps = self.clamp_epsilon
            clamped = np.clip(values, eps, 1.0 - eps)
            return np.log(clamped) - np.log1p(-clamped)
        return values

    def reduce(self, contributions: np.ndarray) -> np.ndarray:
        """
        Combine gathered contributions of shape (draws, k) into V per draw

        Sums run over the sorted row so V is bitwise identical for every
        ordering of the same test occupants.
        """
        if self.kind == ScoreKind.MAX_POOL:
            return contributions.max(axis=1)
        if self.kind == ScoreKind.MIN_POOL:
            return contributions.min(axis=1)
        ordered = np.sort(contributions, axis=1)
        total = ordered.sum(axis=1)
        if self.kind == ScoreKind.MEAN_PRED:
            return total / contributions.shape[1]
        return total

    def evaluate_draws(self, pooled_scores, occupants: np.ndarray) -> np.ndarray:
        """
        V for many arrangements at once

        Args:
            pooled_scores: Predictor scores of the n0 + k pooled entries
            occupants: Integer array (draws, k) of pooled indices sitting in test positions

        Returns:
            Array of V values, one per draw
        """
        contributions = self.transform(pooled_scores)
        occupants = np.asarray(occupants)
        if occupants.ndim != 2 or occupants.shape[1] < 1:
            raise InputError("occupants must have shape (draws, k) with k >= 1")
        if occupants.min() < 0 or occupants.max() >= contributions.size:
            raise InputError("test position index out of range")
        return self.reduce(contributions[occupants])

    def evaluate(self, pooled_scores, test_positions: Iterable[int]) -> float:
        """
        V of a single arrangement

        Args:
            pooled_scores: Predictor scores of all n0 + k pooled entries
            test_positions: Distinct indices of the entries in test positions

        Returns:
            The score V
        """
        positions = [int(i) for i in test_positions]
        size = len(np.asarray(pooled_scores))
        if not positions:
            raise InputError("at least one test position is required")
        if len(set(positions)) != len(positions):
            raise InputError(f"test positions must be distinct, got {positions}")
        if min(positions) < 0 or max(positions) >= size:
            raise InputError(f"test position out of range for {size} pooled scores: {positions}")
        occupants = np.asarray(positions, dtype=np.intp).reshape(1, -1)
        return float(self.evaluate_draws(pooled_scores, occupants)[0])
