"""
Conformal P-Value Module
Weighted multi-sample conformal p-values for "no hit among the test entries":
randomized (Monte Carlo over permutations), exact subset enumeration, and the
one-sample weighted conformal p-value
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from hitcert.core.core import CandidateBatch, LabeledPool, RngStream, as_feature_matrix, require_valid
from hitcert.core.errors import EnumerationCapError, InputError
from hitcert.scores.scores import ScoreStatistic
from hitcert.weights.weights import WeightFn

logger = logging.getLogger(__name__)

DEFAULT_PERMUTATIONS = 2000
DEFAULT_ENUMERATION_CAP = 2_000_000
SAMPLERS = ("subset", "permutation")

# Above this many (draws x pooled) cells the samplers switch to per-draw calls
_VECTORIZED_CELL_LIMIT = 5_000_000
_ENUMERATION_CHUNK = 100_000


@dataclass(frozen=True)
class PermutationDraw:
    """One arrangement: pooled indices in test positions and their joint weight"""

    test_occupants: Tuple[int, ...]
    joint_weight: float


@dataclass
class CertificationResult:
    """Certification decision for one batch prefix"""

    p_value: float
    certified: bool
    alpha: float
    k: int
    b_used: int
    method: str = "randomized"

    def to_dict(self) -> Dict:
        return {
            "p_value": self.p_value,
            "certified": self.certified,
            "alpha": self.alpha,
            "k": self.k,
            "b_used": self.b_used,
            "method": self.method,
        }


@dataclass(frozen=True, eq=False)
class PooledArrays:
    """
    Inactive calibration entries followed by the k test entries

    Weights are divided by their maximum, which leaves every p-value
    unchanged and keeps joint weights in a safe floating range.
    """

    scores: np.ndarray
    weights: np.ndarray
    n0: int

    @property
    def size(self) -> int:
        return int(self.scores.size)

    @property
    def k(self) -> int:
        return self.size - self.n0

    def identity_occupants(self) -> np.ndarray:
        return np.arange(self.n0, self.size, dtype=np.intp).reshape(1, -1)

    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)


def _check_alpha(alpha: float):
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")


def _check_weights(weights: np.ndarray, label: str):
    if np.any(~np.isfinite(weights)) or np.any(weights <= 0):
        raise InputError(f"{label} weights must be positive and finite")


def pool_arrays(cal_scores, cal_weights, test_scores, test_weights) -> PooledArrays:
    """Assemble and normalize the pooled score/weight arrays"""
    cal_scores = np.asarray(cal_scores, dtype=np.float64).reshape(-1)
    test_scores = np.asarray(test_scores, dtype=np.float64).reshape(-1)
    cal_weights = np.asarray(cal_weights, dtype=np.float64).reshape(-1)
    test_weights = np.asarray(test_weights, dtype=np.float64).reshape(-1)

    if cal_scores.size == 0:
        raise InputError("no inactive calibration rows (n0 = 0)")
    if test_scores.size == 0:
        raise InputError("at least one test entry is required (k >= 1)")
    if cal_weights.size != cal_scores.size or test_weights.size != test_scores.size:
        raise InputError("every pooled entry needs exactly one weight")
    _check_weights(cal_weights, "calibration")
    _check_weights(test_weights, "candidate")

    scores = np.concatenate([cal_scores, test_scores])
    weights = np.concatenate([cal_weights, test_weights])
    weights = weights / weights.max()
    return PooledArrays(scores=scores, weights=weights, n0=int(cal_scores.size))


@dataclass(frozen=True, eq=False)
class InferenceInputs:
    """Scores and weights of a pool and a batch, evaluated once and sliced per prefix"""

    cal_scores: np.ndarray
    cal_weights: np.ndarray
    test_scores: np.ndarray
    test_weights: np.ndarray

    @property
    def batch_size(self) -> int:
        return int(self.test_scores.size)

    def prefix(self, k: int) -> PooledArrays:
        if not 1 <= k <= self.batch_size:
            raise InputError(f"prefix size k={k} outside [1, {self.batch_size}]")
        return pool_arrays(self.cal_scores, self.cal_weights, self.test_scores[:k], self.test_weights[:k])


def prepare_inputs(pool: LabeledPool, batch: CandidateBatch, wfn: WeightFn) -> InferenceInputs:
    """Validate the pair and evaluate predictor scores and weights once"""
    require_valid(pool, batch)
    cal_weights = np.asarray(wfn.evaluate(pool.inactive_features()), dtype=np.float64)
    test_weights = np.asarray(wfn.evaluate(batch.features), dtype=np.float64)
    _check_weights(cal_weights, "calibration")
    _check_weights(test_weights, "candidate")
    return InferenceInputs(
        cal_scores=pool.inactive_scores(),
        cal_weights=cal_weights,
        test_scores=np.asarray(batch.predictor_scores),
        test_weights=test_weights,
    )


def _subset_draws(m: int, k: int, draws: int, gen: np.random.Generator) -> np.ndarray:
    """Uniform k-subsets via a partial Fisher-Yates shuffle of each row"""
    if draws * m <= _VECTORIZED_CELL_LIMIT:
        idx = np.tile(np.arange(m, dtype=np.intp), (draws, 1))
        rows = np.arange(draws)
        for i in range(k):
            j = gen.integers(i, m, size=draws)
            chosen = idx[rows, j]
            idx[rows, j] = idx[rows, i]
            idx[rows, i] = chosen
        return idx[:, :k]
    return np.stack([gen.choice(m, size=k, replace=False) for _ in range(draws)]).astype(np.intp)


def _permutation_draws(m: int, k: int, draws: int, gen: np.random.Generator) -> np.ndarray:
    """Full uniform permutations; returns the entries landing in the last k (test) positions"""
    if draws * m <= _VECTORIZED_CELL_LIMIT:
        idx = np.tile(np.arange(m, dtype=np.intp), (draws, 1))
        return gen.permuted(idx, axis=1)[:, m - k:]
    return np.stack([gen.permutation(m)[m - k:] for _ in range(draws)]).astype(np.intp)


@dataclass(eq=False)
class PermutationSample:
    """
    The identity arrangement (row 0) plus B sampled arrangements

    Attributes:
        occupants: (B + 1, k) pooled indices in test positions
        scores: V for every arrangement
        log_joint_weights: log of the joint weight (normalized units)
    """

    occupants: np.ndarray
    scores: np.ndarray
    log_joint_weights: np.ndarray

    @property
    def draws(self) -> int:
        return int(self.occupants.shape[0] - 1)

    def joint_weights(self) -> np.ndarray:
        return np.exp(self.log_joint_weights - self.log_joint_weights.max())

    def draw(self, b: int) -> PermutationDraw:
        return PermutationDraw(
            test_occupants=tuple(int(i) for i in self.occupants[b]),
            joint_weight=float(np.exp(self.log_joint_weights[b])),
        )

    def pvalue(self) -> float:
        """Weighted share of arrangements scoring at least the identity (ties count)"""
        jw = self.joint_weights()
        exceed = self.scores >= self.scores[0]
        return float(min(1.0, jw[exceed].sum() / jw.sum()))


def joint_log_weights(log_weights: np.ndarray, occupants: np.ndarray) -> np.ndarray:
    """Sum of per-entry log weights over the test occupants of each arrangement"""
    return np.sort(log_weights[occupants], axis=1).sum(axis=1)


def sample_permutations(pooled: PooledArrays, stat: ScoreStatistic, B: int,
                        gen: np.random.Generator, sampler: str = "subset") -> PermutationSample:
    """Draw B arrangements uniformly and score them alongside the identity"""
    if B < 1:
        raise InputError(f"number of permutations B must be >= 1, got {B}")
    if sampler not in SAMPLERS:
        raise InputError(f"unknown sampler '{sampler}' (choose from {', '.join(SAMPLERS)})")

    draw = _subset_draws if sampler == "subset" else _permutation_draws
    sampled = draw(pooled.size, pooled.k, B, gen)
    occupants = np.vstack([pooled.identity_occupants(), sampled])
    return PermutationSample(
        occupants=occupants,
        scores=stat.evaluate_draws(pooled.scores, occupants),
        log_joint_weights=joint_log_weights(pooled.log_weights(), occupants),
    )


def randomized_from_arrays(pooled: PooledArrays, stat: ScoreStatistic, B: int,
                           gen: np.random.Generator, sampler: str = "subset") -> float:
    return sample_permutations(pooled, stat, B, gen, sampler).pvalue()


def deterministic_from_arrays(pooled: PooledArrays, stat: ScoreStatistic,
                              enumeration_cap: int = DEFAULT_ENUMERATION_CAP) -> Tuple[float, int]:
    """
    Exact p-value over every k-subset of the pooled entries

    Each subset stands for the same number of permutations, so that count
    cancels and subsets are weighted by their joint weight alone.

    Returns:
        (p-value, number of subsets enumerated)
    """
    m, k = pooled.size, pooled.k
    n_subsets = math.comb(m, k)
    if n_subsets > enumeration_cap:
        raise EnumerationCapError(n_subsets, enumeration_cap)

    contributions = stat.transform(pooled.scores)
    log_w = pooled.log_weights()
    # no subset outweighs the k heaviest entries
    shift = float(np.sort(log_w)[-k:].sum())
    identity = pooled.identity_occupants()
    v0 = float(stat.reduce(contributions[identity])[0])

    numerator = 0.0
    denominator = 0.0
    combos = itertools.combinations(range(m), k)
    while True:
        chunk = list(itertools.islice(combos, _ENUMERATION_CHUNK))
        if not chunk:
            break
        occupants = np.asarray(chunk, dtype=np.intp)
        v = stat.reduce(contributions[occupants])
        jw = np.exp(joint_log_weights(log_w, occupants) - shift)
        numerator += float(jw[v >= v0].sum())
        denominator += float(jw.sum())

    return float(min(1.0, numerator / denominator)), n_subsets


def randomized_pvalue(pool: LabeledPool, batch_prefix: CandidateBatch, stat: ScoreStatistic,
                      wfn: WeightFn, B: int = DEFAULT_PERMUTATIONS, rng: Optional[RngStream] = None,
                      alpha: float = 0.1, k: Optional[int] = None,
                      sampler: str = "subset") -> CertificationResult:
    """
    Randomized weighted conformal p-value for "none of the k candidates is a hit"

    Args:
        pool: Labeled calibration data (only label-0 rows are used)
        batch_prefix: Candidates; the first k rows are tested
        stat: Conformity score V
        wfn: Density-ratio weight
        B: Number of sampled arrangements
        rng: Random stream for the arrangements
        alpha: Certification level
        k: Prefix size, defaults to the whole batch
        sampler: 'subset' (uniform k-subsets) or 'permutation' (full shuffles)

    Returns:
        CertificationResult with certified = p_value <= alpha
    """
    _check_alpha(alpha)
    batch = batch_prefix.prefix(k) if k is not None else batch_prefix
    inputs = prepare_inputs(pool, batch, wfn)
    pooled = inputs.prefix(batch.size)
    rng = rng or RngStream(0)

    p = randomized_from_arrays(pooled, stat, B, rng.generator(), sampler)
    logger.debug(f"randomized p-value k={batch.size} B={B} p={p:.6g}")
    return CertificationResult(p_value=p, certified=p <= alpha, alpha=alpha, k=batch.size, b_used=B)


def deterministic_pvalue(pool: LabeledPool, batch_prefix: CandidateBatch, stat: ScoreStatistic,
                         wfn: WeightFn, alpha: float = 0.1, k: Optional[int] = None,
                         enumeration_cap: int = DEFAULT_ENUMERATION_CAP) -> CertificationResult:
    """Exact counterpart of randomized_pvalue; raises EnumerationCapError when too large"""
    _check_alpha(alpha)
    batch = batch_prefix.prefix(k) if k is not None else batch_prefix
    inputs = prepare_inputs(pool, batch, wfn)
    pooled = inputs.prefix(batch.size)

    p, n_subsets = deterministic_from_arrays(pooled, stat, enumeration_cap)
    return CertificationResult(
        p_value=p, certified=p <= alpha, alpha=alpha, k=batch.size,
        b_used=n_subsets, method="deterministic",
    )


def one_sample_pvalue(pool: LabeledPool, candidate, score: float, wfn: WeightFn) -> float:
    """
    Weighted conformal p-value of a single candidate

    p = [w(x) + sum_{i in I0} w(X_i) 1{mu(X_i) >= mu(x)}] / [w(x) + sum_{i in I0} w(X_i)]
    """
    if pool.n0 == 0:
        raise InputError("no inactive calibration rows (n0 = 0)")
    x = as_feature_matrix(candidate, pool.dimension)
    if x.shape[0] != 1:
        raise InputError(f"one_sample_pvalue takes a single candidate row, got {x.shape[0]}")
    cal_weights = np.asarray(wfn.evaluate(pool.inactive_features()), dtype=np.float64)
    test_weight = np.asarray(wfn.evaluate(x), dtype=np.float64)
    return _one_sample_from_arrays(pool.inactive_scores(), cal_weights, score, float(test_weight[0]))


def one_sample_pvalues(pool: LabeledPool, batch: CandidateBatch, wfn: WeightFn) -> np.ndarray:
    """one_sample_pvalue for every candidate of a batch, weights evaluated once"""
    inputs = prepare_inputs(pool, batch, wfn)
    return np.array([
        _one_sample_from_arrays(inputs.cal_scores, inputs.cal_weights, s, w)
        for s, w in zip(inputs.test_scores, inputs.test_weights)
    ])


def _one_sample_from_arrays(cal_scores, cal_weights, score: float, weight: float) -> float:
    pooled = pool_arrays(cal_scores, cal_weights, [score], [weight])
    cal_w = pooled.weights[:pooled.n0]
    test_w = float(pooled.weights[-1])
    exceed = pooled.scores[:pooled.n0] >= float(score)
    return float(min(1.0, (test_w + cal_w[exceed].sum()) / (test_w + cal_w.sum())))
