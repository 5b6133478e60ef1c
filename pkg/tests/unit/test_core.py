"""
Unit tests for Core module
"""

import numpy as np
import pytest

from hitcert.core.core import (
    CandidateBatch,
    LabeledPool,
    RngStream,
    as_feature_matrix,
    map_keyed,
    require_valid,
    stable_key,
    validate_pair,
)
from hitcert.core.errors import EnumerationCapError, InputError


class TestLabeledPool:
    """Test suite for LabeledPool"""

    def test_inactive_rows(self):
        pool = LabeledPool([[0.0], [1.0], [2.0], [3.0]], [0, 1, 0, 1], [0.1, 0.9, 0.2, 0.8])

        assert pool.n == 4
        assert pool.dimension == 1
        assert pool.n0 == 2
        assert pool.inactive_indices.tolist() == [0, 2]
        assert pool.inactive_scores().tolist() == [0.1, 0.2]

    def test_label_outside_domain_names_row(self):
        with pytest.raises(InputError, match="row 2"):
            LabeledPool([[0.0], [1.0], [2.0]], [0, 1, 2])

    def test_label_length_mismatch(self):
        with pytest.raises(InputError):
            LabeledPool([[0.0], [1.0]], [0])

    def test_arrays_are_read_only(self):
        pool = LabeledPool([[0.0, 1.0]], [0], [0.5])
        with pytest.raises(ValueError):
            pool.features[0, 0] = 3.0

    def test_missing_scores(self):
        pool = LabeledPool([[0.0]], [0])
        with pytest.raises(InputError, match="no predictor scores"):
            pool.inactive_scores()


class TestCandidateBatch:
    """Test suite for CandidateBatch"""

    @pytest.fixture
    def batch(self):
        return CandidateBatch([[0.0], [1.0], [2.0]], [0.3, 0.2, 0.1])

    def test_prefix_keeps_order(self, batch):
        prefix = batch.prefix(2)
        assert prefix.size == 2
        assert prefix.predictor_scores.tolist() == [0.3, 0.2]
        assert batch.prefix(3) is batch

    @pytest.mark.parametrize("k", [0, 4])
    def test_prefix_out_of_range(self, batch, k):
        with pytest.raises(InputError):
            batch.prefix(k)

    def test_flat_features_are_a_column(self):
        assert as_feature_matrix([1.0, 2.0]).shape == (2, 1)

    def test_score_length_mismatch(self):
        with pytest.raises(InputError):
            CandidateBatch([[0.0], [1.0]], [0.5])


class TestValidatePair:
    """Test suite for validate_pair"""

    def test_clean_pair(self):
        pool = LabeledPool([[0.0, 1.0], [1.0, 0.0]], [0, 1], [0.2, 0.7])
        batch = CandidateBatch([[0.5, 0.5]], [0.4])

        report = validate_pair(pool, batch)

        assert report.ok
        assert report.n0 == 1
        assert report.dimension == 2

    def test_collects_every_violation(self):
        pool = LabeledPool([[np.nan, 1.0], [1.0, 0.0]], [1, 1])
        batch = CandidateBatch([[0.5, 0.5, 0.5]], [np.inf])

        report = validate_pair(pool, batch)

        assert not report.ok
        text = " ".join(report.violations)
        assert "dimension mismatch" in text
        assert "non-finite calibration features" in text
        assert "empty inactive set" in text
        assert "missing predictor scores" in text
        assert "non-finite candidate predictor scores" in text

    def test_require_valid_raises(self):
        pool = LabeledPool([[0.0]], [1], [0.9])
        batch = CandidateBatch([[0.0]], [0.5])
        with pytest.raises(InputError, match="empty inactive set"):
            require_valid(pool, batch)


class TestRngStream:
    """Test suite for RngStream"""

    def test_same_path_same_draws(self):
        a = RngStream(42).substream(3).generator().random(5)
        b = RngStream(42).substream(3).generator().random(5)
        assert np.array_equal(a, b)

    def test_distinct_paths_differ(self):
        root = RngStream(42)
        a = root.substream(1).generator().random(5)
        b = root.substream(2).generator().random(5)
        c = root.substream(1).substream(0).generator().random(5)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_path_and_describe(self):
        stream = RngStream(7).substream(4).substream(9)
        assert stream.path == (0, 4, 9)
        assert stream.describe() == {"master_seed": 7, "path": [0, 4, 9]}

    def test_negative_seed_rejected(self):
        with pytest.raises(InputError):
            RngStream(-1)

    def test_stable_key_is_deterministic(self):
        assert stable_key("inference") == stable_key("inference")
        assert stable_key("inference") != stable_key("weights")
        assert stable_key("x", 1) >= 0


class TestMapKeyed:
    """Test suite for map_keyed"""

    def test_order_independent_of_workers(self):
        def draw(key):
            return float(RngStream(5).substream(key).generator().random())

        serial = map_keyed(draw, list(range(20)), workers=1)
        threaded = map_keyed(draw, list(range(20)), workers=4)
        assert serial == threaded


class TestErrors:
    def test_enumeration_cap_message(self):
        err = EnumerationCapError(5_000_000, 2_000_000)
        assert isinstance(err, InputError)
        assert "randomized" in str(err)
        assert err.n_subsets == 5_000_000
