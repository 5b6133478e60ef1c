"""
Density Ratio Weights Module
Covariate-shift weights: uniform, analytic Gaussian shift, Gaussian-KDE ratio,
power transforms, tabulated per-row weights, and the low-density (OOD) filter
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.model_selection import GridSearchCV, KFold
from sklearn.neighbors import KernelDensity

from hitcert.core.core import RngStream, as_feature_matrix
from hitcert.core.errors import InputError

logger = logging.getLogger(__name__)

# exp(+-LOG_WEIGHT_BOUND) keeps every weight strictly positive and finite
LOG_WEIGHT_BOUND = 700.0
DEFAULT_BANDWIDTH_GRID = (0.1, 1.0, 10.0)


class WeightFn:
    """Positive function on feature space used as the density ratio dQ/dP"""

    kind = "base"

    def log_evaluate(self, features) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, features) -> np.ndarray:
        """Weights for every row of features, strictly positive and finite"""
        return np.exp(np.clip(self.log_evaluate(features), -LOG_WEIGHT_BOUND, LOG_WEIGHT_BOUND))

    def describe(self) -> Dict:
        return {"kind": self.kind}


class UniformWeights(WeightFn):
    kind = "uniform"

    def log_evaluate(self, features) -> np.ndarray:
        return np.zeros(as_feature_matrix(features).shape[0])

    def evaluate(self, features) -> np.ndarray:
        return np.ones(as_feature_matrix(features).shape[0])


class AnalyticGaussianShift(WeightFn):
    """Exact ratio of N(mu, I) to N(0, I): w(x) = exp(mu'x - |mu|^2 / 2)"""

    kind = "analytic"

    def __init__(self, mu: Sequence[float]):
        self.mu = np.asarray(mu, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.mu)):
            raise InputError("shift vector mu must be finite")

    def log_evaluate(self, features) -> np.ndarray:
        x = as_feature_matrix(features, self.mu.size)
        return x @ self.mu - 0.5 * float(self.mu @ self.mu)

    def describe(self) -> Dict:
        return {"kind": self.kind, "mu": self.mu.tolist()}


class PowerTransform(WeightFn):
    """Base weight raised to gamma, used to test sensitivity to weight errors"""

    kind = "power"

    def __init__(self, base: WeightFn, gamma: float):
        self.base = base
        self.gamma = float(gamma)
        if not np.isfinite(self.gamma):
            raise InputError(f"gamma must be finite, got {gamma}")

    def log_evaluate(self, features) -> np.ndarray:
        return self.gamma * self.base.log_evaluate(features)

    def evaluate(self, features) -> np.ndarray:
        if self.gamma == 1.0:
            return self.base.evaluate(features)
        if self.gamma == 0.0:
            return np.ones(as_feature_matrix(features).shape[0])
        with np.errstate(over="ignore", under="ignore"):
            powered = np.power(self.base.evaluate(features), self.gamma)
        return np.clip(powered, np.exp(-LOG_WEIGHT_BOUND), np.exp(LOG_WEIGHT_BOUND))

    def describe(self) -> Dict:
        return {"kind": self.kind, "gamma": self.gamma, "base": self.base.describe()}


class TabulatedWeights(WeightFn):
    """Precomputed per-row weights looked up by exact feature vector"""

    kind = "file"

    def __init__(self, features, weights, source: str = ""):
        x = as_feature_matrix(features)
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.size != x.shape[0]:
            raise InputError(f"{w.size} weights supplied for {x.shape[0]} feature rows")
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise InputError("tabulated weights must be positive and finite")
        self.dimension = x.shape[1]
        self.source = source
        self.table: Dict[tuple, float] = {}
        for row, weight in zip(x, w):
            key = tuple(row.tolist())
            if key in self.table and self.table[key] != weight:
                raise InputError(f"conflicting weights for feature vector {key}")
            self.table[key] = float(weight)

    def evaluate(self, features) -> np.ndarray:
        x = as_feature_matrix(features, self.dimension)
        out = np.empty(x.shape[0])
        for i, row in enumerate(x):
            key = tuple(row.tolist())
            if key not in self.table:
                raise InputError(f"no tabulated weight for feature vector {key}")
            out[i] = self.table[key]
        return out

    def log_evaluate(self, features) -> np.ndarray:
        return np.log(self.evaluate(features))

    def describe(self) -> Dict:
        return {"kind": self.kind, "source": self.source, "rows": len(self.table)}


@dataclass
class KdeDensity:
    """
    Isotropic Gaussian KDE, optionally fit on standardized coordinates

    density(x) = (1/m) sum_i (2 pi h^2)^(-d/2) exp(-|z - z_i|^2 / (2 h^2)) / prod(scale)
    with z = (x - center) / scale, so the density integrates to one in the
    original coordinates.
    """

    support_points: np.ndarray
    bandwidth: float
    center: np.ndarray
    scale: np.ndarray
    cv_scores: Dict[float, float] = field(default_factory=dict)
    model: Optional[KernelDensity] = field(default=None, repr=False)

    def __post_init__(self):
        if self.model is None:
            z = (self.support_points - self.center) / self.scale
            self.model = KernelDensity(kernel="gaussian", bandwidth=self.bandwidth).fit(z)

    @property
    def dimension(self) -> int:
        return int(self.support_points.shape[1])

    def log_density(self, features) -> np.ndarray:
        x = as_feature_matrix(features, self.dimension)
        if x.shape[0] == 0:
            return np.zeros(0)
        z = (x - self.center) / self.scale
        return self.model.score_samples(z) - float(np.sum(np.log(self.scale)))

    def density(self, features) -> np.ndarray:
        return np.exp(self.log_density(features))

    def describe(self) -> Dict:
        return {
            "bandwidth": self.bandwidth,
            "support_size": int(self.support_points.shape[0]),
            "cv_scores": {str(h): s for h, s in self.cv_scores.items()},
        }


def _standardization(points: np.ndarray):
    center = points.mean(axis=0)
    scale = points.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return center, scale


def fit_kde(points, bandwidth_grid: Sequence[float] = DEFAULT_BANDWIDTH_GRID, folds: int = 5,
            rng: Optional[RngStream] = None, center=None, scale=None) -> KdeDensity:
    """
    Fit a Gaussian KDE, choosing the bandwidth by k-fold cross-validation

    Args:
        points: Support points (m, d)
        bandwidth_grid: Candidate bandwidths; a single value skips the search
        folds: Number of CV folds (>= 2)
        rng: Stream that seeds the fold split
        center, scale: Optional standardization applied before fitting

    Returns:
        KdeDensity over all points with the bandwidth maximizing mean held-out
        log-likelihood, ties broken toward the smaller bandwidth
    """
    x = as_feature_matrix(points)
    if x.shape[0] == 0:
        raise InputError("cannot fit a density on zero points")
    grid = sorted(float(h) for h in bandwidth_grid)
    if not grid or any(h <= 0 or not np.isfinite(h) for h in grid):
        raise InputError(f"bandwidth grid must be nonempty and positive, got {list(bandwidth_grid)}")
    center = np.zeros(x.shape[1]) if center is None else np.asarray(center, dtype=np.float64)
    scale = np.ones(x.shape[1]) if scale is None else np.asarray(scale, dtype=np.float64)

    if len(grid) == 1:
        return KdeDensity(x, grid[0], center, scale)

    if folds < 2:
        raise InputError(f"folds must be at least 2, got {folds}")
    if x.shape[0] < folds:
        raise InputError(f"{x.shape[0]} points is fewer than {folds} cross-validation folds")

    rng = rng or RngStream(0)
    split_seed = int(rng.generator().integers(0, 2 ** 31 - 1))
    z = (x - center) / scale
    search = GridSearchCV(
        KernelDensity(kernel="gaussian"),
        {"bandwidth": grid},
        cv=KFold(n_splits=folds, shuffle=True, random_state=split_seed),
        refit=False,
    )
    search.fit(z)
    mean_scores = np.asarray(search.cv_results_["mean_test_score"], dtype=np.float64)
    # held-out score per point, so folds of unequal size compare fairly
    mean_scores = mean_scores / (x.shape[0] / folds)
    mean_scores = np.where(np.isfinite(mean_scores), mean_scores, -np.inf)
    best = int(np.argmax(mean_scores))
    chosen = grid[best]
    logger.info(f"KDE bandwidth {chosen} selected from {grid} ({folds}-fold CV, m={x.shape[0]})")

    return KdeDensity(
        x, chosen, center, scale,
        cv_scores={h: float(s) for h, s in zip(grid, mean_scores)},
    )


@dataclass
class KdeRatioModel:
    """Pair of KDEs: p-hat on calibration features, q-hat on generated features"""

    fit_p: KdeDensity
    fit_q: KdeDensity

    @property
    def bandwidth_p(self) -> float:
        return self.fit_p.bandwidth

    @property
    def bandwidth_q(self) -> float:
        return self.fit_q.bandwidth


class KdeRatio(WeightFn):
    """Estimated weight q-hat(x) / p-hat(x)"""

    kind = "kde"

    def __init__(self, model: KdeRatioModel):
        self.model = model

    def log_evaluate(self, features) -> np.ndarray:
        return self.model.fit_q.log_density(features) - self.model.fit_p.log_density(features)

    def describe(self) -> Dict:
        return {
            "kind": self.kind,
            "bandwidth_p": self.model.bandwidth_p,
            "bandwidth_q": self.model.bandwidth_q,
        }


def build_ratio(calibration_feats, generated_feats,
                bandwidth_grid: Sequence[float] = DEFAULT_BANDWIDTH_GRID, folds: int = 5,
                rng: Optional[RngStream] = None, standardize: bool = True) -> KdeRatio:
    """
    Estimate the covariate-shift weight with two Gaussian KDEs

    Both densities are fit on all supplied rows regardless of label; each side
    runs its own bandwidth search. Standardization uses calibration statistics
    for both sides.
    """
    cal = as_feature_matrix(calibration_feats)
    gen = as_feature_matrix(generated_feats, cal.shape[1])
    if cal.shape[0] == 0 or gen.shape[0] == 0:
        raise InputError("both calibration and generated feature sets must be nonempty")
    rng = rng or RngStream(0)

    if standardize:
        center, scale = _standardization(cal)
    else:
        center, scale = np.zeros(cal.shape[1]), np.ones(cal.shape[1])

    fit_p = fit_kde(cal, bandwidth_grid, folds, rng.substream(0), center, scale)
    fit_q = fit_kde(gen, bandwidth_grid, folds, rng.substream(1), center, scale)
    return KdeRatio(KdeRatioModel(fit_p, fit_q))


def ood_filter(density: KdeDensity, reference, candidates, quantile: float = 0.05) -> List[int]:
    """
    Drop candidates whose density falls below a reference quantile

    Args:
        density: Fitted calibration-side density
        reference: Points defining the threshold (usually calibration features)
        candidates: Points to filter, order preserved
        quantile: Lower-tail level in [0, 1); 0 disables the filter

    Returns:
        Indices of kept candidates in their original order
    """
    if not 0.0 <= quantile < 1.0:
        raise InputError(f"OOD quantile must lie in [0, 1), got {quantile}")
    ref = as_feature_matrix(reference, density.dimension)
    if ref.shape[0] == 0:
        raise InputError("OOD filter needs a nonempty reference set")
    cand = np.asarray(candidates, dtype=np.float64)
    if cand.size == 0:
        return []
    cand = as_feature_matrix(cand, density.dimension)
    if quantile == 0.0:
        return list(range(cand.shape[0]))

    threshold = float(np.quantile(density.density(ref), quantile))
    kept = np.flatnonzero(density.density(cand) >= threshold)
    dropped = cand.shape[0] - kept.size
    if dropped:
        logger.info(f"OOD filter dropped {dropped} of {cand.shape[0]} candidates (q={quantile})")
    return kept.tolist()


def power_transform(base: WeightFn, gamma: float) -> WeightFn:
    """w(x) ** gamma"""
    return PowerTransform(base, gamma)


def effective_sample_size(weights) -> float:
    """Kish effective sample size (sum w)^2 / sum w^2"""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        return 0.0
    return float(w.sum() ** 2 / np.sum(w * w))


def parse_weight_source(source: str) -> Dict:
    """
    Split a --weights value into its kind and argument

    Accepts 'uniform', 'kde', 'analytic:mu=<v1,v2,...>' and 'file:<path>'.
    """
    text = (source or "uniform").strip()
    if text in ("uniform", "kde"):
        return {"kind": text}
    if text.startswith("analytic:"):
        arg = text[len("analytic:"):]
        if not arg.startswith("mu="):
            raise InputError(f"analytic weights need 'analytic:mu=<csv>', got '{text}'")
        try:
            mu = [float(v) for v in arg[3:].split(",") if v.strip()]
        except ValueError:
            raise InputError(f"could not parse mu vector in '{text}'")
        if not mu:
            raise InputError("analytic weights need a nonempty mu vector")
        return {"kind": "analytic", "mu": mu}
    if text.startswith("file:"):
        path = text[len("file:"):]
        if not path:
            raise InputError("file weights need a path: 'file:<path>'")
        return {"kind": "file", "path": path}
    raise InputError(f"unknown weight source '{text}' (uniform, kde, analytic:mu=..., file:<path>)")
