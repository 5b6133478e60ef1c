"""
File Formats Module
CSV codecs for calibration rows, candidates and per-row weights, plus the
deterministic JSON report writer
"""

import json
import logging
import math
import re
import sys
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, TextIO

import numpy as np
import pandas as pd

from hitcert.core.core import CandidateBatch, LabeledPool
from hitcert.core.errors import InputError
from hitcert.weights.weights import TabulatedWeights

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
_FEATURE = re.compile(r"^f(\d+)$")


@dataclass
class RunConfig:
    """Resolved settings of one run, embedded in every report"""

    command: str
    alpha: Optional[float] = None
    permutations: Optional[int] = None
    score: Optional[str] = None
    weights: Optional[str] = None
    ood_quantile: Optional[float] = None
    seed: int = 0
    calibration: Optional[str] = None
    candidates: Optional[str] = None
    output: Optional[str] = None
    options: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "command": self.command,
            "alpha": self.alpha,
            "permutations": self.permutations,
            "score": self.score,
            "weights": self.weights,
            "ood_quantile": self.ood_quantile,
            "seed": self.seed,
            "calibration": self.calibration,
            "candidates": self.candidates,
            "output": self.output,
            "options": dict(self.options),
        }


# ---------------------------------------------------------------------------
# CSV reading
# ---------------------------------------------------------------------------

def _read_table(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: file not found")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8",
                         skipinitialspace=True, index_col=False)
    except pd.errors.ParserError as e:
        raise InputError(f"{path}: malformed CSV ({e})")
    except pd.errors.EmptyDataError:
        raise InputError(f"{path}: file is empty")
    except UnicodeDecodeError as e:
        raise InputError(f"{path}: not UTF-8 ({e})")
    df.columns = [str(c).strip() for c in df.columns]
    if df.isna().any().any():
        row, col = next((r, c) for c in df.columns for r in df.index[df[c].isna()])
        raise InputError(f"{path}: line {row + 2}, column '{col}': missing value (ragged row)")
    return df


def _feature_columns(df: pd.DataFrame, path) -> List[str]:
    found = sorted((int(m.group(1)), c) for c in df.columns if (m := _FEATURE.match(c)))
    if not found:
        raise InputError(f"{path}: no feature columns (expected f0..f<d-1>)")
    indices = [i for i, _ in found]
    if indices != list(range(len(indices))):
        raise InputError(f"{path}: feature columns must be f0..f{len(indices) - 1} without gaps, got {[c for _, c in found]}")
    return [c for _, c in found]


def _numeric(df: pd.DataFrame, columns: Sequence[str], path) -> np.ndarray:
    out = np.empty((len(df), len(columns)), dtype=np.float64)
    for j, col in enumerate(columns):
        for i, cell in enumerate(df[col].tolist()):
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise InputError(f"{path}: line {i + 2}, column '{col}': non-numeric value {cell!r}")
    return out


def _check_columns(df: pd.DataFrame, allowed: Sequence[str], features: Sequence[str], path):
    extra = [c for c in df.columns if c not in features and c not in allowed]
    if extra:
        raise InputError(f"{path}: unexpected columns {extra}")


def parse_calibration_csv(path) -> LabeledPool:
    """
    Read calibration rows: f0..f{d-1}, required y in {0, 1}, optional mu

    An optional 'group' column is accepted and read by read_groups.
    """
    df = _read_table(path)
    features = _feature_columns(df, path)
    if "y" not in df.columns:
        raise InputError(f"{path}: missing required column 'y'")
    _check_columns(df, ("y", "mu", "group", "batch"), features, path)
    if len(df) == 0:
        raise InputError(f"{path}: no data rows")

    labels = _numeric(df, ["y"], path)[:, 0]
    bad = np.flatnonzero(~np.isin(labels, (0.0, 1.0)))
    if bad.size:
        raise InputError(f"{path}: line {bad[0] + 2}, column 'y': label {df['y'].iloc[bad[0]]!r} is not 0 or 1")
    scores = _numeric(df, ["mu"], path)[:, 0] if "mu" in df.columns else None
    return LabeledPool(_numeric(df, features, path), labels.astype(np.int8), scores)


def read_groups(path, column: str = "group") -> List[str]:
    df = _read_table(path)
    if column not in df.columns:
        raise InputError(f"{path}: missing group column '{column}'")
    return [str(g) for g in df[column].tolist()]


def _candidate_frame(path):
    df = _read_table(path)
    features = _feature_columns(df, path)
    if "mu" not in df.columns:
        raise InputError(f"{path}: missing required column 'mu' (every score needs predictor values)")
    _check_columns(df, ("mu", "y", "batch"), features, path)
    if len(df) == 0:
        raise InputError(f"{path}: no data rows")
    return df, features


def parse_candidates_csv(path) -> CandidateBatch:
    """Read candidates in generation order: f0..f{d-1} and required mu"""
    df, features = _candidate_frame(path)
    return CandidateBatch(_numeric(df, features, path), _numeric(df, ["mu"], path)[:, 0])


def parse_candidate_batches(path) -> List[CandidateBatch]:
    """
    Split a candidates file into batches by its 'batch' column

    Batches keep the order in which their id first appears; rows keep file
    order within a batch. Without a 'batch' column the file is one batch.
    """
    df, features = _candidate_frame(path)
    x = _numeric(df, features, path)
    mu = _numeric(df, ["mu"], path)[:, 0]
    if "batch" not in df.columns:
        return [CandidateBatch(x, mu)]
    ids = df["batch"].tolist()
    order = list(dict.fromkeys(ids))
    batches = []
    for batch_id in order:
        rows = [i for i, b in enumerate(ids) if b == batch_id]
        batches.append(CandidateBatch(x[rows], mu[rows]))
    return batches


def read_candidate_labels(path) -> Optional[List[np.ndarray]]:
    """Hidden labels from an optional 'y' column, split like parse_candidate_batches"""
    df, _ = _candidate_frame(path)
    if "y" not in df.columns:
        return None
    labels = _numeric(df, ["y"], path)[:, 0].astype(np.int8)
    if "batch" not in df.columns:
        return [labels]
    ids = df["batch"].tolist()
    return [labels[[i for i, b in enumerate(ids) if b == batch_id]] for batch_id in dict.fromkeys(ids)]


# ---------------------------------------------------------------------------
# CSV writing
# ---------------------------------------------------------------------------

def _feature_frame(features: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame({f"f{j}": features[:, j] for j in range(features.shape[1])})


def _write_frame(df: pd.DataFrame, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")


def write_calibration_csv(path, pool: LabeledPool, groups: Optional[Sequence[str]] = None):
    df = _feature_frame(pool.features)
    df["y"] = pool.labels.astype(int)
    if pool.predictor_scores is not None:
        df["mu"] = pool.predictor_scores
    if groups is not None:
        df["group"] = list(groups)
    _write_frame(df, path)


def write_candidates_csv(path, batch: CandidateBatch, batch_ids: Optional[Sequence] = None):
    df = _feature_frame(batch.features)
    df["mu"] = batch.predictor_scores
    if batch_ids is not None:
        df["batch"] = list(batch_ids)
    _write_frame(df, path)


def write_weights_file(path, features, weights):
    """Per-row weights: f0..f{d-1}, w"""
    df = _feature_frame(np.asarray(features, dtype=np.float64))
    df["w"] = np.asarray(weights, dtype=np.float64)
    _write_frame(df, path)


def read_weights_file(path) -> TabulatedWeights:
    df = _read_table(path)
    features = _feature_columns(df, path)
    if "w" not in df.columns:
        raise InputError(f"{path}: missing required column 'w'")
    _check_columns(df, ("w",), features, path)
    return TabulatedWeights(_numeric(df, features, path), _numeric(df, ["w"], path)[:, 0], source=str(path))


def write_pvalues_csv(path, p_values: Dict[str, Sequence[float]]):
    """One column of raw p-values per report, for external plotting"""
    columns = {name: pd.Series(list(values), dtype=np.float64) for name, values in p_values.items()}
    _write_frame(pd.DataFrame(columns), path)


# ---------------------------------------------------------------------------
# JSON reports
# ---------------------------------------------------------------------------

def _plain(value):
    """Convert numpy scalars, enums and report objects to JSON-ready values"""
    if hasattr(value, "to_dict"):
        return _plain(value.to_dict())
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def _encode(value, level: int) -> str:
    pad = "  " * (level + 1)
    close = "  " * level
    if value is None or isinstance(value, bool):
        return json.dumps(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format(value, ".17g") if math.isfinite(value) else "null"
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f"{pad}{json.dumps(k, ensure_ascii=False)}: {_encode(v, level + 1)}" for k, v in sorted(value.items())]
        return "{\n" + ",\n".join(items) + "\n" + close + "}"
    if isinstance(value, list):
        if not value:
            return "[]"
        return "[\n" + ",\n".join(pad + _encode(v, level + 1) for v in value) + "\n" + close + "]"
    raise InputError(f"cannot serialize value of type {type(value).__name__}")


def dumps_report(report) -> str:
    """Sorted keys, floats with 17 significant digits, non-finite numbers as null"""
    return _encode(_plain(report), 0) + "\n"


def emit_report(report, path=None, stream: Optional[TextIO] = None):
    """
    Write a report as JSON to path, or to stream (stdout) when path is None

    Raises:
        InputError: the path cannot be written
    """
    text = dumps_report(report)
    if path is None:
        if stream is None:
            stream = sys.stdout
        stream.write(text)
        return
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise InputError(f"{path}: cannot write report ({e})")
    logger.info(f"report written to {path}")


def load_report(path) -> Dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise InputError(f"{path}: cannot read report ({e})")
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: not a JSON report ({e})")
