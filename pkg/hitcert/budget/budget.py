"""
Budget Allocation Module
Spread a fixed validation budget over many inputs by sweeping alpha and
deleting oversized shortlists
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

from hitcert.core.core import CandidateBatch, LabeledPool, RngStream, map_keyed
from hitcert.core.errors import InputError
from hitcert.nested.nested import PValueProfile, decide, profile_from_inputs
from hitcert.pvalue.pvalue import DEFAULT_PERMUTATIONS, prepare_inputs
from hitcert.scores.scores import ScoreStatistic
from hitcert.weights.weights import WeightFn

logger = logging.getLogger(__name__)


@dataclass
class AlphaRow:
    """Allocation at one alpha; E and D are fractions of the number of inputs"""

    alpha: float
    cost_before: int
    cost_after: int
    empty_fraction: float
    deleted_fraction: float
    estimated_positives: float
    deleted_inputs: List[int] = field(default_factory=list)
    sets: List[List[int]] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "alpha": self.alpha,
            "cost_before": self.cost_before,
            "cost_after": self.cost_after,
            "empty_fraction": self.empty_fraction,
            "deleted_fraction": self.deleted_fraction,
            "estimated_positives": self.estimated_positives,
            "deleted_inputs": list(self.deleted_inputs),
        }


@dataclass
class BudgetPlan:
    alpha_grid: List[float]
    total_budget: int
    per_input_cap: int
    chosen_alpha: float
    chosen_sets: List[List[int]]
    estimated_positives: float
    empty_fraction: float
    deleted_fraction: float
    rows: List[AlphaRow] = field(default_factory=list)

    @property
    def total_cost(self) -> int:
        return sum(len(s) for s in self.chosen_sets)

    def to_dict(self) -> Dict:
        return {
            "alpha_grid": list(self.alpha_grid),
            "total_budget": self.total_budget,
            "per_input_cap": self.per_input_cap,
            "chosen_alpha": self.chosen_alpha,
            "chosen_sets": [list(s) for s in self.chosen_sets],
            "estimated_positives": self.estimated_positives,
            "empty_fraction": self.empty_fraction,
            "deleted_fraction": self.deleted_fraction,
            "total_cost": self.total_cost,
            "rows": [r.to_dict() for r in self.rows],
        }


def allocate_sets(sets: Sequence[Sequence[int]], alpha: float, total_budget: int) -> AlphaRow:
    """
    Delete the largest shortlists until the total size fits the budget

    Equal sizes are deleted in input order. The estimate
    (1 - alpha) - E - D is reported as is, even when negative.
    """
    if total_budget < 1:
        raise InputError(f"total budget must be at least 1, got {total_budget}")
    kept = [list(s) for s in sets]
    T = len(kept)
    if T == 0:
        raise InputError("budget allocation needs at least one input")

    cost_before = sum(len(s) for s in kept)
    empty = sum(1 for s in kept if not s)
    cost = cost_before
    deleted = []
    for t in sorted(range(T), key=lambda i: (-len(kept[i]), i)):
        if cost <= total_budget or not kept[t]:
            break
        cost -= len(kept[t])
        kept[t] = []
        deleted.append(t)

    E = empty / T
    D = len(deleted) / T
    return AlphaRow(
        alpha=alpha,
        cost_before=cost_before,
        cost_after=cost,
        empty_fraction=E,
        deleted_fraction=D,
        estimated_positives=(1.0 - alpha) - E - D,
        deleted_inputs=deleted,
        sets=kept,
    )


def allocate(inputs: Sequence[Tuple[LabeledPool, CandidateBatch]], stat: ScoreStatistic,
             wfn_per_input: Union[WeightFn, Sequence[WeightFn]], alpha_grid: Sequence[float],
             total_budget: int, B: int = DEFAULT_PERMUTATIONS, rng: Optional[RngStream] = None,
             workers: int = 1, profiles: Optional[Sequence[PValueProfile]] = None) -> BudgetPlan:
    """
    Choose the alpha whose surviving shortlists maximize estimated positives

    Args:
        inputs: (calibration pool, candidate batch) per input
        stat: Conformity score
        wfn_per_input: One weight function, or one per input
        alpha_grid: Levels to sweep, each in (0, 1)
        total_budget: Maximum total number of candidates to validate
        B: Permutations per prefix p-value
        rng: Root stream; input t uses substream t
        workers: Threads across inputs
        profiles: Precomputed p-value profiles, one per input

    Returns:
        BudgetPlan for the best alpha, ties going to the smaller alpha
    """
    alphas = sorted(float(a) for a in alpha_grid)
    if not alphas or any(not 0.0 < a < 1.0 for a in alphas):
        raise InputError(f"alpha grid must be a nonempty subset of (0, 1), got {list(alpha_grid)}")
    if total_budget < 1:
        raise InputError(f"total budget must be at least 1, got {total_budget}")
    if not inputs:
        raise InputError("budget allocation needs at least one input")
    if isinstance(wfn_per_input, WeightFn):
        wfns = [wfn_per_input] * len(inputs)
    else:
        wfns = list(wfn_per_input)
        if len(wfns) != len(inputs):
            raise InputError(f"{len(wfns)} weight functions supplied for {len(inputs)} inputs")
    rng = rng or RngStream(0)

    if profiles is None:
        def one_input(t: int) -> PValueProfile:
            pool, batch = inputs[t]
            return profile_from_inputs(prepare_inputs(pool, batch, wfns[t]), stat, alphas[0], B, rng.substream(t))

        profiles = map_keyed(one_input, list(range(len(inputs))), workers)
    elif len(profiles) != len(inputs):
        raise InputError("one profile per input is required")

    rows = [
        allocate_sets([decide(p, a).shortlist for p in profiles], a, total_budget)
        for a in alphas
    ]
    best = rows[0]
    for row in rows[1:]:
        if row.estimated_positives > best.estimated_positives:
            best = row

    if best.estimated_positives <= 0:
        logger.warning(
            f"best estimated positives {best.estimated_positives:.3f} at alpha={best.alpha} "
            f"is not positive; budget {total_budget} is too small"
        )
    logger.info(
        f"budget {total_budget} over {len(inputs)} inputs: alpha*={best.alpha}, "
        f"P_hat={best.estimated_positives:.3f}, cost={best.cost_after}"
    )
    return BudgetPlan(
        alpha_grid=alphas,
        total_budget=int(total_budget),
        per_input_cap=max(batch.size for _, batch in inputs),
        chosen_alpha=best.alpha,
        chosen_sets=best.sets,
        estimated_positives=best.estimated_positives,
        empty_fraction=best.empty_fraction,
        deleted_fraction=best.deleted_fraction,
        rows=rows,
    )
