"""
Core Module
Dataset containers, input validation and seeded random streams shared by all modules
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from hitcert.core.errors import InputError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def _frozen_array(values, dtype, name: str) -> np.ndarray:
    """Copy values into a read-only numpy array"""
    try:
        arr = np.array(values, dtype=dtype, copy=True)
    except (TypeError, ValueError) as e:
        raise InputError(f"{name}: could not convert to {np.dtype(dtype).name} array ({e})")
    arr.flags.writeable = False
    return arr


def as_feature_matrix(features, dimension: Optional[int] = None) -> np.ndarray:
    """
    Coerce a list of feature vectors into an (m, d) float array

    Args:
        features: Sequence of equal-length numeric vectors (or a 2-D array)
        dimension: Expected d, checked when given

    Returns:
        Read-only float64 array of shape (m, d)
    """
    arr = _frozen_array(features, np.float64, "features")
    if arr.ndim == 1:
        # A flat list is a column of 1-d vectors
        arr = _frozen_array(arr.reshape(-1, 1), np.float64, "features")
    if arr.ndim != 2:
        raise InputError(f"features must be a list of vectors, got array of ndim {arr.ndim}")
    if dimension is not None and arr.shape[1] != dimension:
        raise InputError(f"dimension mismatch: expected d={dimension}, got d={arr.shape[1]}")
    return arr


@dataclass(frozen=True, eq=False)
class LabeledPool:
    """Calibration rows with binary labels and optional predictor scores"""

    features: np.ndarray
    labels: np.ndarray
    predictor_scores: Optional[np.ndarray] = None

    def __post_init__(self):
        features = as_feature_matrix(self.features)
        n = features.shape[0]
        if n < 1:
            raise InputError("calibration pool must contain at least one row")

        labels_raw = np.asarray(self.labels)
        if labels_raw.shape != (n,):
            raise InputError(f"labels must have length {n}, got shape {labels_raw.shape}")
        if not np.all(np.isin(labels_raw, (0, 1))):
            bad = int(np.flatnonzero(~np.isin(labels_raw, (0, 1)))[0])
            raise InputError(f"label at row {bad} is {labels_raw[bad]!r}; labels must be 0 or 1")
        labels = _frozen_array(labels_raw, np.int8, "labels")

        scores = None
        if self.predictor_scores is not None:
            scores = _frozen_array(self.predictor_scores, np.float64, "predictor_scores")
            if scores.shape != (n,):
                raise InputError(f"predictor_scores must have length {n}, got shape {scores.shape}")

        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "predictor_scores", scores)

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.features.shape[1])

    @property
    def inactive_indices(self) -> np.ndarray:
        """Index set I0 of rows labeled 0"""
        return np.flatnonzero(self.labels == 0)

    @property
    def n0(self) -> int:
        return int(np.count_nonzero(self.labels == 0))

    def inactive_features(self) -> np.ndarray:
        return self.features[self.inactive_indices]

    def inactive_scores(self) -> np.ndarray:
        if self.predictor_scores is None:
            raise InputError("calibration pool has no predictor scores")
        return self.predictor_scores[self.inactive_indices]


@dataclass(frozen=True, eq=False)
class CandidateBatch:
    """Generated candidates in generation order, with predictor scores"""

    features: np.ndarray
    predictor_scores: np.ndarray

    def __post_init__(self):
        features = as_feature_matrix(self.features)
        size = features.shape[0]
        if size < 1:
            raise InputError("candidate batch must contain at least one row")
        scores = _frozen_array(self.predictor_scores, np.float64, "predictor_scores")
        if scores.shape != (size,):
            raise InputError(f"predictor_scores must have length {size}, got shape {scores.shape}")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "predictor_scores", scores)

    @property
    def size(self) -> int:
        """Generation budget N"""
        return int(self.features.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.features.shape[1])

    def prefix(self, k: int) -> "CandidateBatch":
        """First k candidates, order preserved"""
        if not 1 <= k <= self.size:
            raise InputError(f"prefix size k={k} outside [1, {self.size}]")
        if k == self.size:
            return self
        return CandidateBatch(self.features[:k], self.predictor_scores[:k])

    def subset(self, indices: Sequence[int]) -> "CandidateBatch":
        idx = np.asarray(indices, dtype=np.intp)
        return CandidateBatch(self.features[idx], self.predictor_scores[idx])


@dataclass(frozen=True, eq=False)
class RngStream:
    """
    Deterministic random substream

    A stream is addressed by (master_seed, path) where path is the tuple of
    substream keys from the root. The generator is PCG64 seeded with
    numpy's SeedSequence(master_seed, spawn_key=path), so streams with distinct
    paths are independent and identical paths replay identical draws in any
    process or thread.
    """

    master_seed: int
    substream_key: int = 0
    parent_keys: Tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise InputError(f"master_seed must be a 64-bit unsigned integer, got {self.master_seed}")
        if int(self.substream_key) < 0:
            raise InputError(f"substream_key must be non-negative, got {self.substream_key}")

    @property
    def path(self) -> Tuple[int, ...]:
        return tuple(self.parent_keys) + (int(self.substream_key),)

    def substream(self, key: int) -> "RngStream":
        """Child stream keyed below this one"""
        return RngStream(self.master_seed, int(key), self.path)

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=int(self.master_seed), spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(seq))

    def describe(self) -> Dict:
        return {"master_seed": int(self.master_seed), "path": list(self.path)}


def stable_key(*parts) -> int:
    """Stable non-negative substream key for arbitrary identifiers (md5 based)"""
    text = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.md5(text.encode("utf-8")).digest()[:8], "little")


@dataclass
class ValidationReport:
    """Outcome of validate_pair; ok is true iff no violation was found"""

    ok: bool
    n: int = 0
    n0: int = 0
    batch_size: int = 0
    dimension: Optional[int] = None
    violations: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "ok": self.ok,
            "n": self.n,
            "n0": self.n0,
            "batch_size": self.batch_size,
            "dimension": self.dimension,
            "violations": list(self.violations),
        }


def validate_pair(pool: LabeledPool, batch: CandidateBatch) -> ValidationReport:
    """
    Check a calibration pool and a candidate batch before inference

    Args:
        pool: Labeled calibration data
        batch: Generated candidates

    Returns:
        ValidationReport listing dimension mismatches, non-finite entries,
        an empty inactive set and missing predictor scores
    """
    violations = []

    if pool.dimension != batch.dimension:
        violations.append(
            f"dimension mismatch: calibration d={pool.dimension}, candidates d={batch.dimension}"
        )
    if not np.all(np.isfinite(pool.features)):
        rows = np.flatnonzero(~np.all(np.isfinite(pool.features), axis=1))
        violations.append(f"non-finite calibration features at rows {rows[:10].tolist()}")
    if not np.all(np.isfinite(batch.features)):
        rows = np.flatnonzero(~np.all(np.isfinite(batch.features), axis=1))
        violations.append(f"non-finite candidate features at rows {rows[:10].tolist()}")
    if pool.n0 == 0:
        violations.append("empty inactive set: no calibration row has label 0")
    if pool.predictor_scores is None:
        violations.append("missing predictor scores for calibration rows")
    elif not np.all(np.isfinite(pool.predictor_scores)):
        violations.append("non-finite calibration predictor scores")
    if not np.all(np.isfinite(batch.predictor_scores)):
        violations.append("non-finite candidate predictor scores")

    return ValidationReport(
        ok=not violations,
        n=pool.n,
        n0=pool.n0,
        batch_size=batch.size,
        dimension=pool.dimension if pool.dimension == batch.dimension else None,
        violations=violations,
    )


def require_valid(pool: LabeledPool, batch: CandidateBatch) -> ValidationReport:
    """validate_pair, raising InputError when the report is not ok"""
    report = validate_pair(pool, batch)
    if not report.ok:
        raise InputError("; ".join(report.violations))
    return report


def map_keyed(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """
    Apply fn to every item, optionally on a thread pool

    Results come back in input order. Callers give every item its own
    RngStream, so the output does not depend on the worker count.
    """
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items))
