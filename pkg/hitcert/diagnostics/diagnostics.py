"""
Diagnostics Module
Weight-quality checks: covariate balance, validation under a group shift,
power-transform sensitivity and the estimated-weight robustness gap
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import entropy
from sklearn.metrics.pairwise import cosine_distances

from hitcert.core.core import CandidateBatch, LabeledPool, RngStream, map_keyed
from hitcert.core.errors import InputError
from hitcert.nested.nested import decide, profile_from_inputs
from hitcert.pvalue.pvalue import (
    DEFAULT_PERMUTATIONS,
    joint_log_weights,
    pool_arrays,
    prepare_inputs,
    randomized_from_arrays,
    sample_permutations,
)
from hitcert.scores.scores import ScoreStatistic
from hitcert.weights.weights import (
    DEFAULT_BANDWIDTH_GRID,
    WeightFn,
    build_ratio,
    effective_sample_size,
    power_transform,
)

logger = logging.getLogger(__name__)

DEFAULT_KL_BINS = 20
DEFAULT_GAMMA_GRID = (0.5, 1.0, 2.0, 3.0)


def kl_from_uniform(p_values: Sequence[float], bins: int = DEFAULT_KL_BINS) -> float:
    """
    KL divergence of a p-value histogram from Uniform(0, 1)

    Fixed equal-width bins on [0, 1] with one pseudo-count added to every bin.
    """
    p = np.asarray(list(p_values), dtype=np.float64)
    if p.size == 0:
        raise InputError("KL from uniform needs at least one p-value")
    if bins < 1:
        raise InputError(f"bins must be positive, got {bins}")
    counts, _ = np.histogram(np.clip(p, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    smoothed = counts + 1.0
    return float(entropy(smoothed / smoothed.sum(), np.full(bins, 1.0 / bins)))


def _rate(events: Sequence[bool]) -> float:
    return float(np.mean(events)) if len(events) else 0.0


# ---------------------------------------------------------------------------
# Balance check
# ---------------------------------------------------------------------------

@dataclass
class BalanceReport:
    """Per-feature mean imbalance between reweighted calibration and test rows"""

    per_feature_imbalance_before: List[float]
    per_feature_imbalance_after: List[float]
    per_feature_imbalance_after_normalized: List[float]
    aggregate: Dict[str, float]
    effective_sample_size: float
    n0: int

    def to_dict(self) -> Dict:
        return {
            "per_feature_imbalance_before": list(self.per_feature_imbalance_before),
            "per_feature_imbalance_after": list(self.per_feature_imbalance_after),
            "per_feature_imbalance_after_normalized": list(self.per_feature_imbalance_after_normalized),
            "aggregate": dict(self.aggregate),
            "effective_sample_size": self.effective_sample_size,
            "n0": self.n0,
        }


def _feature_table(features: np.ndarray, feature_maps: Optional[Sequence[Callable]]) -> np.ndarray:
    if not feature_maps:
        return np.asarray(features, dtype=np.float64)
    return np.array([[float(f(x)) for f in feature_maps] for x in features], dtype=np.float64)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    if np.array_equal(a, b):
        return 0.0
    return float(cosine_distances(a.reshape(1, -1), b.reshape(1, -1))[0, 0])


def balance_check(pool: LabeledPool, batch: CandidateBatch, wfn: WeightFn,
                  feature_maps: Optional[Sequence[Callable]] = None) -> BalanceReport:
    """
    Compare reweighted inactive calibration means with candidate means

    Args:
        pool: Calibration data; only label-0 rows enter the weighted mean
        batch: Candidates
        wfn: Weight under test
        feature_maps: Scalar functions of a feature vector (default: coordinates)

    Returns:
        BalanceReport with |(1/n0) sum w f - mean f| before (w = 1) and after
        weighting, the self-normalized variant and cosine distances of the mean vectors
    """
    cal = pool.inactive_features()
    if cal.shape[0] == 0:
        raise InputError("balance check needs at least one inactive calibration row")
    f_cal = _feature_table(cal, feature_maps)
    f_test = _feature_table(batch.features, feature_maps)
    w = np.asarray(wfn.evaluate(cal), dtype=np.float64)

    test_mean = f_test.mean(axis=0)
    plain_mean = f_cal.mean(axis=0)
    weighted_mean = (w[:, None] * f_cal).mean(axis=0)
    normalized_mean = (w @ f_cal) / w.sum()

    report = BalanceReport(
        per_feature_imbalance_before=np.abs(plain_mean - test_mean).tolist(),
        per_feature_imbalance_after=np.abs(weighted_mean - test_mean).tolist(),
        per_feature_imbalance_after_normalized=np.abs(normalized_mean - test_mean).tolist(),
        aggregate={
            "cosine_before": _cosine(plain_mean, test_mean),
            "cosine_after": _cosine(weighted_mean, test_mean),
            "cosine_after_normalized": _cosine(normalized_mean, test_mean),
        },
        effective_sample_size=effective_sample_size(w),
        n0=int(cal.shape[0]),
    )
    if report.effective_sample_size < 0.1 * report.n0:
        logger.warning(
            f"calibration weights are concentrated: effective sample size "
            f"{report.effective_sample_size:.1f} of n0={report.n0}"
        )
    return report


# ---------------------------------------------------------------------------
# Validation shift
# ---------------------------------------------------------------------------

@dataclass
class ValidationShiftReport:
    test_groups: List[str]
    n_calibration: int
    n_validation_batches: int
    kl_weighted: float
    kl_unweighted: float
    error_weighted: Dict[float, float]
    error_unweighted: Dict[float, float]
    bandwidths: Dict[str, float]
    p_values_weighted: List[float] = field(default_factory=list)
    p_values_unweighted: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "test_groups": list(self.test_groups),
            "n_calibration": self.n_calibration,
            "n_validation_batches": self.n_validation_batches,
            "kl_weighted": self.kl_weighted,
            "kl_unweighted": self.kl_unweighted,
            "error_weighted": {str(a): v for a, v in self.error_weighted.items()},
            "error_unweighted": {str(a): v for a, v in self.error_unweighted.items()},
            "bandwidths": dict(self.bandwidths),
            "p_values_weighted": list(self.p_values_weighted),
            "p_values_unweighted": list(self.p_values_unweighted),
        }


def validation_shift(pool: LabeledPool, group_key: Sequence, top_groups: int, stat: ScoreStatistic,
                     bandwidth_grid: Sequence[float] = DEFAULT_BANDWIDTH_GRID,
                     alpha_grid: Sequence[float] = (0.1, 0.2, 0.3), B: int = DEFAULT_PERMUTATIONS,
                     rng: Optional[RngStream] = None, batch_size: int = 1, folds: int = 5,
                     kl_bins: int = DEFAULT_KL_BINS, standardize: bool = True) -> ValidationShiftReport:
    """
    Check the weights on a labeled split that mimics the real shift

    The top_groups most frequent groups form the pseudo-test fold and the
    remaining rows the pseudo-calibration fold. KDE weights are fit across
    the folds, and the label-0 pseudo-test rows, taken batch_size at a time,
    receive null p-values with and without weighting.

    Groups must overlap in feature space. When membership is a hard function
    of the features the folds have disjoint support, no density ratio exists
    and both p-value sets degenerate alike.
    """
    groups = np.asarray([str(g) for g in group_key])
    if groups.shape != (pool.n,):
        raise InputError(f"group_key must have one entry per calibration row ({pool.n}), got {groups.size}")
    labels, counts = np.unique(groups, return_counts=True)
    if labels.size < 2:
        raise InputError("validation shift needs at least 2 distinct groups")
    if top_groups < 1:
        raise InputError(f"top_groups must be at least 1, got {top_groups}")
    if top_groups >= labels.size:
        logger.warning(f"top_groups={top_groups} leaves no calibration group; using {labels.size - 1}")
        top_groups = labels.size - 1
    if batch_size < 1:
        raise InputError(f"batch_size must be at least 1, got {batch_size}")

    ranked = sorted(zip(labels.tolist(), counts.tolist()), key=lambda gc: (-gc[1], gc[0]))
    test_groups = [g for g, _ in ranked[:top_groups]]
    test_mask = np.isin(groups, test_groups)

    scores = pool.predictor_scores
    if scores is None:
        raise InputError("validation shift needs predictor scores for calibration rows")
    cal_null = (~test_mask) & (pool.labels == 0)
    test_null = test_mask & (pool.labels == 0)
    if not cal_null.any():
        raise InputError("pseudo-calibration fold has an empty inactive set")
    if not test_null.any():
        raise InputError("pseudo-test fold has an empty inactive set")

    rng = rng or RngStream(0)
    wfn = build_ratio(pool.features[~test_mask], pool.features[test_mask],
                      bandwidth_grid, folds, rng.substream(0), standardize)

    cal_x = pool.features[cal_null]
    cal_s = scores[cal_null]
    cal_w = wfn.evaluate(cal_x)
    test_x = pool.features[test_null]
    test_s = scores[test_null]
    test_w = wfn.evaluate(test_x)

    starts = list(range(0, test_s.size, batch_size))
    draws = rng.substream(1)
    p_weighted, p_unweighted = [], []
    for j, start in enumerate(starts):
        chunk = slice(start, start + batch_size)
        pooled_w = pool_arrays(cal_s, cal_w, test_s[chunk], test_w[chunk])
        pooled_u = pool_arrays(cal_s, np.ones(cal_s.size), test_s[chunk], np.ones(test_s[chunk].size))
        p_weighted.append(randomized_from_arrays(pooled_w, stat, B, draws.substream(j).generator()))
        p_unweighted.append(randomized_from_arrays(pooled_u, stat, B, draws.substream(j).generator()))

    report = ValidationShiftReport(
        test_groups=test_groups,
        n_calibration=int(cal_null.sum()),
        n_validation_batches=len(starts),
        kl_weighted=kl_from_uniform(p_weighted, kl_bins),
        kl_unweighted=kl_from_uniform(p_unweighted, kl_bins),
        error_weighted={a: _rate([p <= a for p in p_weighted]) for a in alpha_grid},
        error_unweighted={a: _rate([p <= a for p in p_unweighted]) for a in alpha_grid},
        bandwidths={"p": wfn.model.bandwidth_p, "q": wfn.model.bandwidth_q},
        p_values_weighted=p_weighted,
        p_values_unweighted=p_unweighted,
    )
    logger.info(
        f"validation shift over groups {test_groups}: KL weighted={report.kl_weighted:.4f} "
        f"unweighted={report.kl_unweighted:.4f}"
    )
    return report


# ---------------------------------------------------------------------------
# Sensitivity sweep
# ---------------------------------------------------------------------------

@dataclass
class GammaRow:
    gamma: float
    kl_from_uniform_of_null_pvalues: Optional[float]
    error_rate: Dict[float, Optional[float]]
    rejection_rate: Dict[float, float]
    decision_flips: Dict[float, int]
    worst_case_decision_flips: int
    n_hat: Dict[float, List[int]]

    def to_dict(self) -> Dict:
        return {
            "gamma": self.gamma,
            "kl_from_uniform_of_null_pvalues": self.kl_from_uniform_of_null_pvalues,
            "error_rate": {str(a): v for a, v in self.error_rate.items()},
            "rejection_rate": {str(a): v for a, v in self.rejection_rate.items()},
            "decision_flips": {str(a): v for a, v in self.decision_flips.items()},
            "worst_case_decision_flips": self.worst_case_decision_flips,
            "n_hat": {str(a): list(v) for a, v in self.n_hat.items()},
        }


@dataclass
class SensitivityReport:
    """One row per gamma; rejection_rate is the fraction of empty shortlists"""

    gamma_grid: List[float]
    alpha_grid: List[float]
    per_gamma: List[GammaRow]

    def row(self, gamma: float) -> GammaRow:
        for r in self.per_gamma:
            if r.gamma == gamma:
                return r
        raise KeyError(gamma)

    def to_dict(self) -> Dict:
        return {
            "gamma_grid": list(self.gamma_grid),
            "alpha_grid": list(self.alpha_grid),
            "per_gamma": [r.to_dict() for r in self.per_gamma],
        }


def sensitivity_sweep(pool: LabeledPool, batch_set: Sequence[CandidateBatch], base_wfn: WeightFn,
                      gamma_grid: Sequence[float], stat: ScoreStatistic,
                      alpha_grid: Sequence[float] = (0.1, 0.3), B: int = DEFAULT_PERMUTATIONS,
                      rng: Optional[RngStream] = None, hidden_labels: Optional[Sequence] = None,
                      workers: int = 1, kl_bins: int = DEFAULT_KL_BINS) -> SensitivityReport:
    """
    Rerun design under w ** gamma for every gamma in the grid

    Batch t always draws from rng.substream(t), so the gamma = 1 row equals a
    plain design run and the gamma = 0 row an unweighted one. Error rates and
    the null p-value KL need hidden_labels (one label array per batch) and are
    None without them.
    """
    gammas = [float(g) for g in gamma_grid]
    if not gammas:
        raise InputError("gamma grid must be nonempty")
    if 1.0 not in gammas:
        raise InputError("gamma grid must contain 1 (the unperturbed weights)")
    if not batch_set:
        raise InputError("sensitivity sweep needs at least one batch")
    alphas = [float(a) for a in alpha_grid]
    if not alphas:
        raise InputError("alpha grid must be nonempty")
    if hidden_labels is not None and len(hidden_labels) != len(batch_set):
        raise InputError("hidden_labels needs one label array per batch")
    rng = rng or RngStream(0)

    cells = [(g, t) for g in range(len(gammas)) for t in range(len(batch_set))]

    def run_cell(cell):
        g, t = cell
        inputs = prepare_inputs(pool, batch_set[t], power_transform(base_wfn, gammas[g]))
        return profile_from_inputs(inputs, stat, alphas[0], B, rng.substream(t))

    profiles = map_keyed(run_cell, cells, workers)
    by_gamma = {g: profiles[g * len(batch_set):(g + 1) * len(batch_set)] for g in range(len(gammas))}
    base = by_gamma[gammas.index(1.0)]

    rows = []
    for g, gamma in enumerate(gammas):
        n_hat, errors, empties, flips = {}, {}, {}, {}
        for a in alphas:
            outcomes = [decide(p, a) for p in by_gamma[g]]
            base_outcomes = [decide(p, a) for p in base]
            n_hat[a] = [o.n_hat for o in outcomes]
            empties[a] = _rate([not o.certified for o in outcomes])
            flips[a] = sum(o.certified != b.certified for o, b in zip(outcomes, base_outcomes))
            if hidden_labels is None:
                errors[a] = None
            else:
                errors[a] = _rate([
                    o.certified and not np.any(np.asarray(y)[:o.n_hat] == 1)
                    for o, y in zip(outcomes, hidden_labels)
                ])

        kl = None
        if hidden_labels is not None:
            null_p = [p.raw[-1] for p, y in zip(by_gamma[g], hidden_labels) if not np.any(np.asarray(y) == 1)]
            kl = kl_from_uniform(null_p, kl_bins) if null_p else None

        rows.append(GammaRow(
            gamma=gamma,
            kl_from_uniform_of_null_pvalues=kl,
            error_rate=errors,
            rejection_rate=empties,
            decision_flips=flips,
            worst_case_decision_flips=max(flips.values()),
            n_hat=n_hat,
        ))
    return SensitivityReport(gamma_grid=gammas, alpha_grid=alphas, per_gamma=rows)


# ---------------------------------------------------------------------------
# Robustness gap
# ---------------------------------------------------------------------------

@dataclass
class RobustnessGap:
    """
    Error-inflation bound for a p-value computed with estimated weights

    v_hat is None when no drawn arrangement is rejected at level t; the
    inflation term is then zero.
    """

    t: float
    t_hat: float
    v_hat: Optional[float]
    delta_plus: float
    delta_minus: float
    bound: float
    p_value: float

    @property
    def rejected(self) -> bool:
        return self.p_value <= self.t

    def to_dict(self) -> Dict:
        return {
            "t": self.t,
            "t_hat": self.t_hat,
            "v_hat": self.v_hat,
            "delta_plus": self.delta_plus,
            "delta_minus": self.delta_minus,
            "bound": self.bound,
            "p_value": self.p_value,
            "rejected": self.rejected,
        }


def robustness_gap(pool: LabeledPool, batch_prefix: CandidateBatch, stat: ScoreStatistic,
                   true_wfn: WeightFn, est_wfn: WeightFn, t: float, B: int = DEFAULT_PERMUTATIONS,
                   rng: Optional[RngStream] = None, sampler: str = "subset") -> RobustnessGap:
    """
    Per-draw inflation bound when est_wfn stands in for true_wfn

    Both joint weights are evaluated on the same B + 1 arrangements. v_hat is
    the rejection cutoff under the estimated weights: the smallest drawn score
    whose estimated p-value is at most t. Joint weights keep the raw scale of
    each weight function, so est_wfn = c * true_wfn gives nonzero deltas even
    though both p-values coincide.
    """
    if not 0.0 < t < 1.0:
        raise InputError(f"t must lie in (0, 1), got {t}")
    rng = rng or RngStream(0)
    est_inputs = prepare_inputs(pool, batch_prefix, est_wfn)
    true_inputs = prepare_inputs(pool, batch_prefix, true_wfn)
    k = batch_prefix.size

    sample = sample_permutations(est_inputs.prefix(k), stat, B, rng.generator(), sampler)
    raw_est = np.log(np.concatenate([est_inputs.cal_weights, est_inputs.test_weights]))
    raw_true = np.log(np.concatenate([true_inputs.cal_weights, true_inputs.test_weights]))
    log_est = joint_log_weights(raw_est, sample.occupants)
    log_true = joint_log_weights(raw_true, sample.occupants)
    shift = max(float(log_est.max()), float(log_true.max()))
    w_est = np.exp(log_est - shift)
    w_true = np.exp(log_true - shift)

    v = sample.scores
    order = np.argsort(v, kind="stable")
    # p_hat(v) = weighted share of draws scoring >= v; non-increasing in v
    ordered_v = v[order]
    tail = np.cumsum(w_est[order][::-1])[::-1] / w_est.sum()
    first = np.searchsorted(ordered_v, ordered_v, side="left")
    p_at = tail[first]
    p_value = float(min(1.0, p_at[np.searchsorted(ordered_v, v[0], side="left")]))

    rejected = np.flatnonzero(p_at <= t)
    if rejected.size == 0:
        return RobustnessGap(t=t, t_hat=t, v_hat=None, delta_plus=0.0, delta_minus=0.0,
                             bound=t, p_value=p_value)

    # the rejection set {v : p_hat(v) <= t} is upward-closed, so its smallest
    # member is the cutoff
    v_hat = float(ordered_v[rejected[0]])
    t_hat = float(p_at[rejected[0]])
    diff = w_est - w_true
    delta_plus = float(np.sum(np.clip(diff, 0.0, None)[v < v_hat]))
    delta_minus = float(np.sum(np.clip(-diff, 0.0, None)[v >= v_hat]))
    bound = t + (t_hat * delta_plus + (1.0 - t_hat) * delta_minus) / float(w_true.sum())
    return RobustnessGap(t=t, t_hat=t_hat, v_hat=v_hat, delta_plus=delta_plus,
                         delta_minus=delta_minus, bound=float(bound), p_value=p_value)
