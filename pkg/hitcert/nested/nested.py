"""
Nested Design Module
Prefix p-values, backward monotonization and the first-crossing stopping rule
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from hitcert.core.core import CandidateBatch, LabeledPool, RngStream, map_keyed
from hitcert.core.errors import InputError
from hitcert.pvalue.pvalue import (
    DEFAULT_ENUMERATION_CAP,
    DEFAULT_PERMUTATIONS,
    InferenceInputs,
    deterministic_from_arrays,
    prepare_inputs,
    randomized_from_arrays,
)
from hitcert.scores.scores import ScoreStatistic
from hitcert.weights.weights import WeightFn

logger = logging.getLogger(__name__)


class DesignStatus(str, Enum):
    CERTIFIED = "certified"
    NOT_CONFIDENT_ENOUGH = "not_confident_enough"


@dataclass
class PValueProfile:
    """Raw prefix p-values p_1..p_N and their backward running maximum"""

    raw: List[float]
    monotone: List[float]
    alpha: float

    @property
    def size(self) -> int:
        return len(self.raw)

    def to_dict(self) -> Dict:
        return {"raw_p": list(self.raw), "monotone_p": list(self.monotone), "alpha": self.alpha}


@dataclass
class DesignOutcome:
    """Smallest certified prefix; n_hat = 0 means not confident enough"""

    n_hat: int
    shortlist: List[int] = field(default_factory=list)
    status: DesignStatus = DesignStatus.NOT_CONFIDENT_ENOUGH

    @property
    def certified(self) -> bool:
        return self.status == DesignStatus.CERTIFIED

    def to_dict(self) -> Dict:
        return {"n_hat": self.n_hat, "shortlist": list(self.shortlist), "status": self.status.value}


def _check_alpha(alpha: float):
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")


def monotonize(raw: Sequence[float]) -> List[float]:
    """
    Backward running maximum: monotone[k] = max(raw[k:])

    Raises:
        InputError: an entry lies outside [0, 1]
    """
    values = np.asarray(list(raw), dtype=np.float64)
    if values.size == 0:
        return []
    if np.any(~np.isfinite(values)) or np.any((values < 0.0) | (values > 1.0)):
        raise InputError(f"p-values must lie in [0, 1], got {values.tolist()}")
    return np.maximum.accumulate(values[::-1])[::-1].tolist()


def decide(profile: PValueProfile, alpha: Optional[float] = None) -> DesignOutcome:
    """
    Apply the stopping rule n_hat = min{k : monotone[k] <= alpha}

    A single profile serves any alpha; the default is the profile's own.
    """
    alpha = profile.alpha if alpha is None else alpha
    _check_alpha(alpha)
    for k, p in enumerate(profile.monotone, start=1):
        if p <= alpha:
            return DesignOutcome(n_hat=k, shortlist=list(range(k)), status=DesignStatus.CERTIFIED)
    return DesignOutcome(n_hat=0, shortlist=[], status=DesignStatus.NOT_CONFIDENT_ENOUGH)


def prefix_pvalues(inputs: InferenceInputs, stat: ScoreStatistic, B: int = DEFAULT_PERMUTATIONS,
                   rng: Optional[RngStream] = None, sampler: str = "subset",
                   method: str = "randomized", workers: int = 1,
                   enumeration_cap: int = DEFAULT_ENUMERATION_CAP) -> List[float]:
    """
    Raw p-value of every prefix k = 1..N

    Prefix k draws from rng.substream(k), so appending candidates never
    changes earlier p-values.
    """
    if method not in ("randomized", "deterministic"):
        raise InputError(f"unknown p-value method '{method}'")
    rng = rng or RngStream(0)

    def one_prefix(k: int) -> float:
        pooled = inputs.prefix(k)
        if method == "deterministic":
            return deterministic_from_arrays(pooled, stat, enumeration_cap)[0]
        return randomized_from_arrays(pooled, stat, B, rng.substream(k).generator(), sampler)

    return map_keyed(one_prefix, list(range(1, inputs.batch_size + 1)), workers)


def profile_from_inputs(inputs: InferenceInputs, stat: ScoreStatistic, alpha: float,
                        B: int = DEFAULT_PERMUTATIONS, rng: Optional[RngStream] = None,
                        **kwargs) -> PValueProfile:
    _check_alpha(alpha)
    raw = prefix_pvalues(inputs, stat, B, rng, **kwargs)
    return PValueProfile(raw=raw, monotone=monotonize(raw), alpha=alpha)


def design(pool: LabeledPool, batch: CandidateBatch, stat: ScoreStatistic, wfn: WeightFn,
           alpha: float = 0.1, B: int = DEFAULT_PERMUTATIONS, rng: Optional[RngStream] = None,
           sampler: str = "subset", method: str = "randomized", workers: int = 1,
           enumeration_cap: int = DEFAULT_ENUMERATION_CAP) -> Tuple[PValueProfile, DesignOutcome]:
    """
    Smallest prefix of the batch certified to contain a hit at level alpha

    Args:
        pool: Labeled calibration data
        batch: Candidates in generation order
        stat: Conformity score
        wfn: Density-ratio weight
        alpha: Error level in (0, 1)
        B: Permutations per prefix
        rng: Root stream; prefix k uses its substream k
        sampler: 'subset' or 'permutation'
        method: 'randomized' or 'deterministic' prefix p-values
        workers: Threads used for the prefix p-values

    Returns:
        (PValueProfile, DesignOutcome)
    """
    _check_alpha(alpha)
    inputs = prepare_inputs(pool, batch, wfn)
    profile = profile_from_inputs(
        inputs, stat, alpha, B, rng,
        sampler=sampler, method=method, workers=workers, enumeration_cap=enumeration_cap,
    )
    outcome = decide(profile)
    logger.info(
        f"design N={batch.size} alpha={alpha}: n_hat={outcome.n_hat} ({outcome.status.value}), "
        f"p_N={profile.monotone[-1]:.4g}"
    )
    return profile, outcome
