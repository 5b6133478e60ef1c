"""
Baselines Module
Comparison procedures: Bonferroni over one-sample p-values, certification
without pruning, unweighted design and the heuristic batch-size rule
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from hitcert.core.core import CandidateBatch, LabeledPool, RngStream
from hitcert.core.errors import InputError
from hitcert.nested.nested import DesignOutcome, PValueProfile, design
from hitcert.pvalue.pvalue import DEFAULT_PERMUTATIONS, one_sample_pvalues, prepare_inputs, randomized_from_arrays
from hitcert.scores.scores import ScoreStatistic
from hitcert.weights.weights import UniformWeights, WeightFn

logger = logging.getLogger(__name__)


class BaselineMethod(str, Enum):
    BONFERRONI = "bonferroni"
    CERTIFICATION_ONLY = "certonly"
    UNWEIGHTED = "unweighted"
    HEURISTIC = "heuristic"


@dataclass
class BaselineOutcome:
    method: BaselineMethod
    selected_indices: List[int] = field(default_factory=list)
    certified: bool = False
    n_required: Optional[int] = None
    p_values: Optional[List[float]] = None

    def to_dict(self) -> Dict:
        out = {
            "method": self.method.value,
            "selected_indices": list(self.selected_indices),
            "certified": self.certified,
        }
        if self.n_required is not None:
            out["n_required"] = self.n_required
        if self.p_values is not None:
            out["p_values"] = list(self.p_values)
        return out


def _check_alpha(alpha: float):
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")


def bonferroni_select(p_values: Sequence[float], alpha: float) -> BaselineOutcome:
    """Keep every candidate whose one-sample p-value is at most alpha / N"""
    _check_alpha(alpha)
    p = [float(v) for v in p_values]
    if not p:
        raise InputError("Bonferroni needs at least one candidate")
    threshold = alpha / len(p)
    selected = [j for j, v in enumerate(p) if v <= threshold]
    return BaselineOutcome(
        method=BaselineMethod.BONFERRONI,
        selected_indices=selected,
        certified=bool(selected),
        p_values=p,
    )


def bonferroni(pool: LabeledPool, batch: CandidateBatch, wfn: WeightFn, alpha: float = 0.1) -> BaselineOutcome:
    """Each candidate tested alone with the weighted one-sample p-value at level alpha / N"""
    return bonferroni_select(one_sample_pvalues(pool, batch, wfn).tolist(), alpha)


def certification_only(pool: LabeledPool, batch: CandidateBatch, stat: ScoreStatistic, wfn: WeightFn,
                       alpha: float = 0.1, B: int = DEFAULT_PERMUTATIONS,
                       rng: Optional[RngStream] = None, sampler: str = "subset") -> BaselineOutcome:
    """
    Certify the whole batch without pruning

    The p-value uses rng.substream(N), the stream design assigns to the full
    prefix, so both agree whenever design's last raw and monotone p-values match.
    """
    _check_alpha(alpha)
    rng = rng or RngStream(0)
    inputs = prepare_inputs(pool, batch, wfn)
    p = randomized_from_arrays(
        inputs.prefix(batch.size), stat, B, rng.substream(batch.size).generator(), sampler
    )
    certified = p <= alpha
    return BaselineOutcome(
        method=BaselineMethod.CERTIFICATION_ONLY,
        selected_indices=list(range(batch.size)) if certified else [],
        certified=certified,
        p_values=[p],
    )


def _meets(miss: float, n: int, alpha: float) -> bool:
    value = miss ** n
    return value <= alpha or math.isclose(value, alpha, rel_tol=1e-12)


def heuristic_batch_size(p_hat: float, alpha: float) -> int:
    """
    Smallest n with (1 - p_hat) ** n <= alpha, treating equality as success

    Raises:
        InputError: p_hat outside the open interval (0, 1)
    """
    _check_alpha(alpha)
    if not 0.0 < p_hat < 1.0:
        raise InputError(
            f"heuristic batch size is undefined for p_hat={p_hat}; "
            "it needs 0 < p_hat < 1, use certification instead"
        )
    miss = 1.0 - p_hat
    n = max(1, math.ceil(math.log(alpha) / math.log(miss)))
    while n > 1 and _meets(miss, n - 1, alpha):
        n -= 1
    while not _meets(miss, n, alpha):
        n += 1
    return n


def heuristic_design(batch: CandidateBatch, alpha: float = 0.1, p_hat: Optional[float] = None) -> BaselineOutcome:
    """
    Heuristic shortlist: the first n candidates with n from heuristic_batch_size

    p_hat defaults to the mean predictor score of the batch. The shortlist is
    empty when the rule asks for more candidates than were generated or when
    p_hat is degenerate.
    """
    p_hat = float(np.mean(batch.predictor_scores)) if p_hat is None else float(p_hat)
    try:
        n = heuristic_batch_size(p_hat, alpha)
    except InputError as e:
        logger.warning(str(e))
        return BaselineOutcome(method=BaselineMethod.HEURISTIC, n_required=None)
    selected = list(range(n)) if n <= batch.size else []
    return BaselineOutcome(
        method=BaselineMethod.HEURISTIC,
        selected_indices=selected,
        certified=bool(selected),
        n_required=n,
    )


def unweighted_design(pool: LabeledPool, batch: CandidateBatch, stat: ScoreStatistic, alpha: float = 0.1,
                      B: int = DEFAULT_PERMUTATIONS, rng: Optional[RngStream] = None,
                      **kwargs) -> Tuple[PValueProfile, DesignOutcome]:
    """design with w = 1, i.e. no covariate-shift correction"""
    return design(pool, batch, stat, UniformWeights(), alpha, B, rng, **kwargs)
