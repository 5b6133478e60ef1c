"""
Simulation Harness Module
Synthetic populations with a known Gaussian density ratio and logistic label
model, plus seeded Monte Carlo experiments over them
"""

import inspect
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from hitcert.baselines.baselines import heuristic_design
from hitcert.budget.budget import allocate
from hitcert.core.core import CandidateBatch, LabeledPool, RngStream, map_keyed, stable_key
from hitcert.core.errors import InputError
from hitcert.diagnostics.diagnostics import kl_from_uniform, robustness_gap, sensitivity_sweep
from hitcert.nested.nested import decide, profile_from_inputs
from hitcert.pvalue.pvalue import (
    deterministic_from_arrays,
    one_sample_pvalues,
    prepare_inputs,
    randomized_from_arrays,
)
from hitcert.scores.scores import ScoreStatistic
from hitcert.weights.weights import AnalyticGaussianShift, UniformWeights, WeightFn, power_transform

logger = logging.getLogger(__name__)

PREDICTOR_MODES = ("clean", "noisy", "inverse")
NULL_METHODS = ("confhit_rand", "confhit_det", "unweighted", "bonferroni")
DESIGN_METHODS = ("confhit", "unweighted", "bonferroni", "certonly", "heuristic")

# Candidate draws per rejection-sampling round, and the number of rounds allowed
_REJECTION_CHUNK = 256
_REJECTION_ROUNDS = 10_000


@dataclass
class SyntheticSpec:
    """
    P = N(0, I) for calibration features, Q = N(shift_mu, I) for candidates,
    P(Y = 1 | x) = logistic(label_coef . x + label_intercept) on both sides
    """

    d: int = 2
    shift_mu: Tuple[float, ...] = (0.5, 0.0)
    label_coef: Tuple[float, ...] = (1.0, 0.0)
    label_intercept: float = -2.0
    n_calibration: int = 200
    n_batch: int = 5
    trials: int = 2000
    alpha_grid: Tuple[float, ...] = (0.05, 0.1, 0.2, 0.3, 0.5)
    seed: int = 0
    permutations: int = 2000
    score: str = "max"
    predictor: str = "clean"

    def __post_init__(self):
        self.shift_mu = tuple(float(v) for v in self.shift_mu)
        self.label_coef = tuple(float(v) for v in self.label_coef)
        self.alpha_grid = tuple(float(a) for a in self.alpha_grid)
        if self.d < 1:
            raise InputError(f"d must be at least 1, got {self.d}")
        if len(self.shift_mu) != self.d or len(self.label_coef) != self.d:
            raise InputError(f"shift_mu and label_coef must both have length d={self.d}")
        if self.n_calibration < 1 or self.n_batch < 1 or self.trials < 1:
            raise InputError("n_calibration, n_batch and trials must all be at least 1")
        if not self.alpha_grid or any(not 0.0 < a < 1.0 for a in self.alpha_grid):
            raise InputError(f"alpha_grid must be a nonempty subset of (0, 1), got {self.alpha_grid}")
        if self.permutations < 1:
            raise InputError(f"permutations must be at least 1, got {self.permutations}")
        if self.predictor not in PREDICTOR_MODES:
            raise InputError(f"unknown predictor '{self.predictor}' (choose from {', '.join(PREDICTOR_MODES)})")
        ScoreStatistic.from_name(self.score)

    @classmethod
    def from_dict(cls, values: Mapping) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise InputError(f"unknown synthetic spec fields: {', '.join(unknown)}")
        return cls(**dict(values))

    def replace(self, **changes) -> "SyntheticSpec":
        values = self.to_dict()
        values.update(changes)
        return SyntheticSpec.from_dict(values)

    def statistic(self) -> ScoreStatistic:
        return ScoreStatistic.from_name(self.score)

    def true_weights(self) -> AnalyticGaussianShift:
        return AnalyticGaussianShift(self.shift_mu)

    def to_dict(self) -> Dict:
        out = asdict(self)
        for key in ("shift_mu", "label_coef", "alpha_grid"):
            out[key] = list(out[key])
        return out


@dataclass(eq=False)
class SyntheticDraw:
    """
    One synthetic instance

    hidden_labels belong to the candidates and are kept apart from the batch,
    so nothing on the inference path can read them.
    """

    pool: LabeledPool
    batch: CandidateBatch
    true_wfn: WeightFn
    hidden_labels: np.ndarray

    @property
    def has_hit(self) -> bool:
        return bool(np.any(self.hidden_labels == 1))

    def contains_hit(self, indices: Sequence[int]) -> bool:
        idx = np.asarray(list(indices), dtype=np.intp)
        return bool(idx.size and np.any(self.hidden_labels[idx] == 1))


def corrupt_predictor(scores, mode: str, rng: Optional[RngStream] = None) -> np.ndarray:
    """
    Degrade predictor scores

    'noisy' returns (p + z) / 2 with z standard normal, clamped to [0, 1];
    'inverse' returns 1 - p; 'clean' returns a copy.
    """
    p = np.asarray(scores, dtype=np.float64)
    if mode == "clean":
        return p.copy()
    if mode == "inverse":
        if np.any((p < 0.0) | (p > 1.0)):
            raise InputError("inverse corruption needs scores in [0, 1]")
        return 1.0 - p
    if mode == "noisy":
        noise = (rng or RngStream(0)).generator().standard_normal(p.shape)
        return np.clip((p + noise) / 2.0, 0.0, 1.0)
    raise InputError(f"unknown predictor corruption '{mode}' (choose from {', '.join(PREDICTOR_MODES)})")


def _hit_probability(spec: SyntheticSpec, x: np.ndarray) -> np.ndarray:
    return expit(x @ np.asarray(spec.label_coef) + spec.label_intercept)


def _draw_calibration(spec: SyntheticSpec, gen: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    for _ in range(_REJECTION_ROUNDS):
        x = gen.standard_normal((spec.n_calibration, spec.d))
        y = (gen.random(spec.n_calibration) < _hit_probability(spec, x)).astype(np.int8)
        if np.any(y == 0):
            return x, y
    raise InputError("label model never produced an inactive calibration row")


def _draw_candidates(spec: SyntheticSpec, gen: np.random.Generator,
                     null_batch: bool) -> Tuple[np.ndarray, np.ndarray]:
    mu = np.asarray(spec.shift_mu)
    if not null_batch:
        x = mu + gen.standard_normal((spec.n_batch, spec.d))
        y = (gen.random(spec.n_batch) < _hit_probability(spec, x)).astype(np.int8)
        return x, y

    # rejection sampling realizes Q conditioned on Y = 0
    kept = []
    for _ in range(_REJECTION_ROUNDS):
        x = mu + gen.standard_normal((_REJECTION_CHUNK, spec.d))
        y = gen.random(_REJECTION_CHUNK) < _hit_probability(spec, x)
        kept.extend(x[~y])
        if len(kept) >= spec.n_batch:
            return np.asarray(kept[:spec.n_batch]), np.zeros(spec.n_batch, dtype=np.int8)
    raise InputError("rejection sampling could not produce an all-inactive batch")


def generate(spec: SyntheticSpec, rng: RngStream, null_batch: bool = False) -> SyntheticDraw:
    """
    Draw calibration rows from P and candidates from Q

    Args:
        spec: Population and label model
        rng: Stream for this instance; substreams 0-3 feed features and predictor noise
        null_batch: Draw candidates from Q conditioned on every label being 0

    Returns:
        SyntheticDraw with the exact analytic weight
    """
    cal_x, cal_y = _draw_calibration(spec, rng.substream(0).generator())
    cand_x, cand_y = _draw_candidates(spec, rng.substream(1).generator(), null_batch)
    cal_mu = corrupt_predictor(_hit_probability(spec, cal_x), spec.predictor, rng.substream(2))
    cand_mu = corrupt_predictor(_hit_probability(spec, cand_x), spec.predictor, rng.substream(3))
    return SyntheticDraw(
        pool=LabeledPool(cal_x, cal_y, cal_mu),
        batch=CandidateBatch(cand_x, cand_mu),
        true_wfn=spec.true_weights(),
        hidden_labels=cand_y,
    )


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class AlphaMetrics:
    empirical_error: float
    power_or_rejection: float
    mean_set_size: float
    empty_fraction: float

    def to_dict(self) -> Dict:
        return asdict(self)


def mc_standard_error(rate: float, trials: int) -> float:
    return math.sqrt(max(rate * (1.0 - rate), 0.0) / trials)


def mc_slack(alpha: float, trials: int) -> float:
    """alpha + 3 Monte Carlo standard errors of a rate equal to alpha"""
    return alpha + 3.0 * math.sqrt(alpha * (1.0 - alpha) / trials)


@dataclass
class ExperimentReport:
    """Per-alpha rates with their binomial standard errors sqrt(r (1 - r) / trials)"""

    experiment: str
    method: str
    trials: int
    spec: Dict
    per_alpha: Dict[float, AlphaMetrics] = field(default_factory=dict)
    mc_standard_errors: Dict[float, float] = field(default_factory=dict)
    p_values: List[float] = field(default_factory=list)
    extra: Dict = field(default_factory=dict)

    def error(self, alpha: float) -> float:
        return self.per_alpha[alpha].empirical_error

    def to_dict(self) -> Dict:
        return {
            "experiment": self.experiment,
            "method": self.method,
            "trials": self.trials,
            "spec": dict(self.spec),
            "per_alpha": {str(a): m.to_dict() for a, m in self.per_alpha.items()},
            "mc_standard_errors": {str(a): v for a, v in self.mc_standard_errors.items()},
            "p_values": list(self.p_values),
            "extra": self.extra,
        }


def _summarize(experiment: str, method: str, spec: SyntheticSpec, alphas: Sequence[float],
               selections: List[Dict[float, List[int]]], hidden_labels: List[np.ndarray],
               p_values: Optional[List[float]] = None, extra: Optional[Dict] = None) -> ExperimentReport:
    """Turn per-trial selections {alpha: indices} into rates"""
    trials = len(selections)
    per_alpha, errors = {}, {}
    for a in alphas:
        chosen = [s[a] for s in selections]
        nonempty = [bool(c) for c in chosen]
        hit = [bool(c) and bool(np.any(labels[c] == 1)) for c, labels in zip(chosen, hidden_labels)]
        error = [n and not h for n, h in zip(nonempty, hit)]
        sizes = [len(c) for c in chosen if c]
        rate = float(np.mean(error))
        per_alpha[a] = AlphaMetrics(
            empirical_error=rate,
            power_or_rejection=float(np.mean(hit)),
            mean_set_size=float(np.mean(sizes)) if sizes else 0.0,
            empty_fraction=1.0 - float(np.mean(nonempty)),
        )
        errors[a] = mc_standard_error(rate, trials)
    return ExperimentReport(
        experiment=experiment, method=method, trials=trials, spec=spec.to_dict(),
        per_alpha=per_alpha, mc_standard_errors=errors,
        p_values=list(p_values or []), extra=dict(extra or {}),
    )


def _trial_streams(spec: SyntheticSpec) -> List[RngStream]:
    root = RngStream(spec.seed)
    return [root.substream(t) for t in range(spec.trials)]


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def null_pvalue(draw: SyntheticDraw, method: str, stat: ScoreStatistic, B: int, rng: RngStream,
                wfn: Optional[WeightFn] = None) -> float:
    """Certification p-value of the full batch; Bonferroni reports min(N * min p_j, 1)"""
    if method not in NULL_METHODS:
        raise InputError(f"unknown null method '{method}' (choose from {', '.join(NULL_METHODS)})")
    if method == "unweighted":
        wfn = UniformWeights()
    wfn = wfn or draw.true_wfn
    if method == "bonferroni":
        p = one_sample_pvalues(draw.pool, draw.batch, wfn)
        return float(min(1.0, draw.batch.size * p.min()))
    pooled = prepare_inputs(draw.pool, draw.batch, wfn).prefix(draw.batch.size)
    if method == "confhit_det":
        return deterministic_from_arrays(pooled, stat)[0]
    return randomized_from_arrays(pooled, stat, B, rng.generator())


def run_null_experiment(spec: SyntheticSpec, method: str = "confhit_rand", B: Optional[int] = None,
                        alpha_grid: Optional[Sequence[float]] = None, workers: int = 1,
                        gamma: float = 1.0) -> ExperimentReport:
    """
    Certification p-values on all-inactive batches

    Each trial uses substream t of the spec seed: substream 0 of it for the
    data and substream 1 for the permutations, so every method sees the same
    draws. gamma != 1 replaces the exact weight by its power transform.
    """
    B = B or spec.permutations
    alphas = [float(a) for a in (alpha_grid or spec.alpha_grid)]
    stat = spec.statistic()

    def one_trial(stream: RngStream) -> float:
        draw = generate(spec, stream.substream(0), null_batch=True)
        wfn = power_transform(draw.true_wfn, gamma) if gamma != 1.0 else None
        return null_pvalue(draw, method, stat, B, stream.substream(1), wfn)

    p_values = map_keyed(one_trial, _trial_streams(spec), workers)
    per_alpha, errors = {}, {}
    for a in alphas:
        rate = float(np.mean([p <= a for p in p_values]))
        per_alpha[a] = AlphaMetrics(
            empirical_error=rate,
            power_or_rejection=rate,
            mean_set_size=float(spec.n_batch) if rate > 0 else 0.0,
            empty_fraction=1.0 - rate,
        )
        errors[a] = mc_standard_error(rate, len(p_values))
    logger.info(f"null experiment {method}: " + ", ".join(
        f"P(p<={a})={per_alpha[a].empirical_error:.4f}" for a in alphas))
    return ExperimentReport(
        experiment="null", method=method, trials=len(p_values), spec=spec.to_dict(),
        per_alpha=per_alpha, mc_standard_errors=errors, p_values=p_values,
        extra={"kl_from_uniform": kl_from_uniform(p_values), "gamma": gamma},
    )


def design_selections(draw: SyntheticDraw, method: str, stat: ScoreStatistic, alphas: Sequence[float],
                      B: int, rng: RngStream) -> Dict[float, List[int]]:
    """Selected candidate indices per alpha for one instance"""
    if method in ("confhit", "unweighted"):
        wfn = draw.true_wfn if method == "confhit" else UniformWeights()
        profile = profile_from_inputs(prepare_inputs(draw.pool, draw.batch, wfn), stat, alphas[0], B, rng)
        return {a: decide(profile, a).shortlist for a in alphas}
    if method == "bonferroni":
        p = one_sample_pvalues(draw.pool, draw.batch, draw.true_wfn)
        return {a: [j for j, v in enumerate(p) if v <= a / draw.batch.size] for a in alphas}
    if method == "certonly":
        pooled = prepare_inputs(draw.pool, draw.batch, draw.true_wfn).prefix(draw.batch.size)
        p = randomized_from_arrays(pooled, stat, B, rng.substream(draw.batch.size).generator())
        return {a: list(range(draw.batch.size)) if p <= a else [] for a in alphas}
    if method == "heuristic":
        return {a: heuristic_design(draw.batch, a).selected_indices for a in alphas}
    raise InputError(f"unknown design method '{method}' (choose from {', '.join(DESIGN_METHODS)})")


def run_design_experiment(spec: SyntheticSpec, method: str = "confhit", B: Optional[int] = None,
                          alpha_grid: Optional[Sequence[float]] = None, workers: int = 1,
                          null_batches: bool = False) -> ExperimentReport:
    """
    Design (or a baseline) on mixed batches

    Error event: a nonempty selection containing no hidden hit.
    """
    B = B or spec.permutations
    alphas = [float(a) for a in (alpha_grid or spec.alpha_grid)]
    stat = spec.statistic()

    def one_trial(stream: RngStream):
        draw = generate(spec, stream.substream(0), null_batch=null_batches)
        return design_selections(draw, method, stat, alphas, B, stream.substream(1)), draw.hidden_labels

    results = map_keyed(one_trial, _trial_streams(spec), workers)
    report = _summarize("design", method, spec, alphas, [r[0] for r in results], [r[1] for r in results])
    logger.info(f"design experiment {method}: " + ", ".join(
        f"alpha={a} error={report.error(a):.4f}" for a in alphas))
    return report


def run_ablation_experiment(spec: SyntheticSpec, B: Optional[int] = None,
                            alpha_grid: Optional[Sequence[float]] = None,
                            workers: int = 1) -> Dict[str, ExperimentReport]:
    """Weighted and unweighted certification on identical null draws"""
    return {
        method: run_null_experiment(spec, method, B, alpha_grid, workers)
        for method in ("confhit_rand", "unweighted")
    }


def run_robustness_experiment(spec: SyntheticSpec, gamma: float = 2.0, t_grid: Sequence[float] = (0.1, 0.3),
                              B: Optional[int] = None, workers: int = 1) -> ExperimentReport:
    """
    Null exceedance with w ** gamma standing in for the exact weight, against
    the trial-averaged inflation bound
    """
    B = B or spec.permutations
    stat = spec.statistic()
    ts = [float(t) for t in t_grid]

    def one_trial(stream: RngStream):
        draw = generate(spec, stream.substream(0), null_batch=True)
        est = power_transform(draw.true_wfn, gamma)
        return [
            robustness_gap(draw.pool, draw.batch, stat, draw.true_wfn, est, t, B, stream.substream(1))
            for t in ts
        ]

    gaps = map_keyed(one_trial, _trial_streams(spec), workers)
    trials = len(gaps)
    per_alpha, errors, mean_bound, bound_se = {}, {}, {}, {}
    for i, t in enumerate(ts):
        rejected = [g[i].rejected for g in gaps]
        bounds = np.asarray([g[i].bound for g in gaps])
        rate = float(np.mean(rejected))
        per_alpha[t] = AlphaMetrics(rate, rate, float(spec.n_batch) if rate > 0 else 0.0, 1.0 - rate)
        errors[t] = mc_standard_error(rate, trials)
        mean_bound[str(t)] = float(bounds.mean())
        bound_se[str(t)] = float(bounds.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return ExperimentReport(
        experiment="robustness", method=f"power_{gamma:g}", trials=trials, spec=spec.to_dict(),
        per_alpha=per_alpha, mc_standard_errors=errors,
        p_values=[g[0].p_value for g in gaps],
        extra={"gamma": gamma, "mean_bound": mean_bound, "bound_standard_error": bound_se},
    )


def run_budget_experiment(spec: SyntheticSpec, budgets: Sequence[int], alpha_grid: Optional[Sequence[float]] = None,
                          B: Optional[int] = None, workers: int = 1) -> ExperimentReport:
    """
    Estimated versus realized positives over spec.trials inputs

    Profiles are computed once per input and reused for every budget.
    """
    B = B or spec.permutations
    alphas = [float(a) for a in (alpha_grid or spec.alpha_grid)]
    stat = spec.statistic()
    streams = _trial_streams(spec)

    def one_input(stream: RngStream):
        draw = generate(spec, stream.substream(0))
        inputs = prepare_inputs(draw.pool, draw.batch, draw.true_wfn)
        return draw, profile_from_inputs(inputs, stat, alphas[0], B, stream.substream(1))

    results = map_keyed(one_input, streams, workers)
    draws = [r[0] for r in results]
    profiles = [r[1] for r in results]
    pairs = [(d.pool, d.batch) for d in draws]

    rows = []
    for budget in budgets:
        plan = allocate(pairs, stat, [d.true_wfn for d in draws], alphas, int(budget), B, profiles=profiles)
        realized = float(np.mean([d.contains_hit(s) for d, s in zip(draws, plan.chosen_sets)]))
        rows.append({
            "budget": int(budget),
            "chosen_alpha": plan.chosen_alpha,
            "estimated_positives": plan.estimated_positives,
            "realized_positives": realized,
            "realized_standard_error": mc_standard_error(realized, len(draws)),
            "total_cost": plan.total_cost,
        })
        logger.info(f"budget {budget}: estimated {plan.estimated_positives:.3f}, realized {realized:.3f}")
    return ExperimentReport(
        experiment="budget", method="confhit", trials=len(draws), spec=spec.to_dict(),
        extra={"rows": rows},
    )


def run_sensitivity_experiment(spec: SyntheticSpec, gamma_grid: Sequence[float] = (0.5, 1.0, 2.0, 3.0),
                               B: Optional[int] = None, alpha_grid: Optional[Sequence[float]] = None,
                               workers: int = 1) -> ExperimentReport:
    """
    Power-transform sweep: one calibration pool and spec.trials mixed batches
    """
    B = B or spec.permutations
    alphas = [float(a) for a in (alpha_grid or spec.alpha_grid)]
    root = RngStream(spec.seed)
    base = generate(spec, root.substream(stable_key("calibration")))
    draws = [generate(spec, s.substream(0)) for s in _trial_streams(spec)]
    report = sensitivity_sweep(
        base.pool, [d.batch for d in draws], base.true_wfn, gamma_grid, spec.statistic(),
        alphas, B, root.substream(stable_key("sweep")),
        hidden_labels=[d.hidden_labels for d in draws], workers=workers,
    )
    return ExperimentReport(
        experiment="sensitivity", method="confhit", trials=len(draws), spec=spec.to_dict(),
        extra=report.to_dict(),
    )


def run_predictor_experiment(spec: SyntheticSpec, modes: Sequence[str] = PREDICTOR_MODES,
                             methods: Sequence[str] = ("confhit", "heuristic"), B: Optional[int] = None,
                             alpha_grid: Optional[Sequence[float]] = None,
                             workers: int = 1) -> Dict[str, ExperimentReport]:
    """Null certification and design under clean, noisy and inverted predictors"""
    reports = {}
    for mode in modes:
        degraded = spec.replace(predictor=mode)
        reports[f"{mode}/null"] = run_null_experiment(degraded, "confhit_rand", B, alpha_grid, workers)
        for method in methods:
            reports[f"{mode}/{method}"] = run_design_experiment(degraded, method, B, alpha_grid, workers)
    return reports


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

EXPERIMENTS = ("null", "design", "ablation", "robustness", "budget", "sensitivity", "predictor")


_RUNNERS = {
    "null": run_null_experiment,
    "design": run_design_experiment,
    "ablation": run_ablation_experiment,
    "robustness": run_robustness_experiment,
    "budget": run_budget_experiment,
    "sensitivity": run_sensitivity_experiment,
    "predictor": run_predictor_experiment,
}


def run_preset(preset: Mapping, workers: int = 1, overrides: Optional[Mapping] = None) -> Dict:
    """
    Run one experiment described by a config mapping

    The mapping holds 'experiment', an optional 'options' mapping forwarded
    to the experiment function and every other key as a SyntheticSpec field.
    """
    values = dict(preset)
    experiment = values.pop("experiment", None)
    if experiment not in _RUNNERS:
        raise InputError(f"preset needs experiment in {', '.join(EXPERIMENTS)}, got {experiment!r}")
    options = dict(values.pop("options", None) or {})
    values.update(overrides or {})
    spec = SyntheticSpec.from_dict(values)

    runner = _RUNNERS[experiment]
    accepted = set(inspect.signature(runner).parameters) - {"spec", "workers"}
    unknown = sorted(set(options) - accepted)
    if unknown:
        raise InputError(f"unknown options for the {experiment} experiment: {', '.join(unknown)}")

    result = runner(spec, workers=workers, **options)
    if isinstance(result, dict):
        return {"experiment": experiment, "reports": {k: r.to_dict() for k, r in result.items()}}
    return {"experiment": experiment, "reports": {result.method: result.to_dict()}}
