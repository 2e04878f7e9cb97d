import logging

import numpy as np
import pytest

from biasguard.diffcore import ComputationRecord, Tensor, finite_difference_check, mul, sum_
from biasguard.errors import ContractViolation, DimensionError, NumericalFailure, TruncatedFileError
from biasguard.metric import (
    MetricMatrix, batch_covariance, cholesky_factor, covariance_graph, identity_metric, mahalanobis_sq,
    mahalanobis_sq_rows, read_metric, ridge_inverse_graph, ridge_pseudo_inverse, write_metric,
)


def _random_psd(rng, k):
    a = rng.standard_normal((k, 2 * k))
    c = a @ a.T / (2 * k)
    return (c + c.T) / 2.0


def test_random_metrics_are_symmetric_psd_and_invert():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        c = _random_psd(rng, k)
        m = ridge_pseudo_inverse(c, 1e-3)
        assert np.max(np.abs(m.matrix - m.matrix.T)) <= 1e-10
        np.testing.assert_allclose(m.matrix @ (c + 1e-3 * np.eye(k)), np.eye(k), atol=1e-8)
        d = rng.standard_normal(k)
        assert mahalanobis_sq(d, np.zeros(k), m) >= 0.0
        factor = cholesky_factor(m)
        assert factor.shift == 0.0
        assert np.sum((d @ factor.lower) ** 2) == pytest.approx(mahalanobis_sq(d, np.zeros(k), m), rel=1e-8)


def test_identity_metric_reduces_to_euclidean():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal(5), rng.standard_normal(5)
    assert mahalanobis_sq(x, y, identity_metric(5)) == float(np.dot(x - y, x - y))


def test_ridge_inverse_on_degenerate_covariance():
    m = ridge_pseudo_inverse(np.array([[2.0, 0.0], [0.0, 0.0]]), 1e-3)
    np.testing.assert_allclose(m.matrix, [[1 / 2.001, 0.0], [0.0, 1000.0]], rtol=1e-10, atol=1e-12)
    assert m.matrix[0, 0] == pytest.approx(0.49975, abs=1e-5)


def test_ridge_inverse_of_identity_without_ridge():
    np.testing.assert_allclose(ridge_pseudo_inverse(np.eye(3), 0.0).matrix, np.eye(3), atol=1e-14)


def test_zero_ridge_on_singular_covariance_stays_finite():
    m = ridge_pseudo_inverse(np.array([[1.0, 1.0], [1.0, 1.0]]), 0.0)
    assert np.all(np.isfinite(m.matrix))
    # pseudo-inverse of [[1,1],[1,1]] is a quarter of the same matrix
    np.testing.assert_allclose(m.matrix, np.full((2, 2), 0.25), atol=1e-12)


def test_ridge_inverse_rejects_asymmetric_input():
    with pytest.raises(ContractViolation):
        ridge_pseudo_inverse(np.array([[1.0, 0.5], [0.0, 1.0]]), 1e-3)
    with pytest.raises(ContractViolation):
        ridge_pseudo_inverse(np.eye(2), -1.0)
    with pytest.raises(DimensionError):
        ridge_pseudo_inverse(np.ones((2, 3)), 1e-3)


def test_ridge_inverse_non_finite_covariance():
    with pytest.raises(NumericalFailure) as info:
        ridge_pseudo_inverse(np.array([[np.nan, 0.0], [0.0, 1.0]]), 1e-3)
    assert info.value.primitive == "pinv"


def test_batch_covariance_uses_unbiased_divisor():
    stacked = np.array([[1.0, 0.0], [3.0, 0.0], [5.0, 2.0], [7.0, 2.0]])
    np.testing.assert_allclose(batch_covariance(stacked), np.cov(stacked, rowvar=False), rtol=1e-12)
    with pytest.raises(ContractViolation):
        batch_covariance(np.ones((1, 3)))


def test_covariance_graph_matches_array_version():
    rng = np.random.default_rng(3)
    stacked = rng.standard_normal((6, 3))
    np.testing.assert_allclose(covariance_graph(Tensor(stacked)).data, batch_covariance(stacked), atol=1e-14)


def test_ridge_inverse_graph_gradient():
    rng = np.random.default_rng(4)
    weights = rng.uniform(0.5, 1.5, size=(3, 3))

    def fn(stacked):
        return sum_(mul(ridge_inverse_graph(covariance_graph(stacked), 0.1), weights))

    assert finite_difference_check(ComputationRecord(fn), [rng.standard_normal((8, 3))], atol=1e-4) < 1e-4
    with pytest.raises(ContractViolation):
        ridge_inverse_graph(Tensor(np.eye(2)), 0.0)


def test_mahalanobis_sq_hand_evaluation():
    m = MetricMatrix(np.diag([2.0, 1.0]), 0.0, 0)
    assert mahalanobis_sq(np.array([1.0, 1.0]), np.zeros(2), m) == 3.0
    np.testing.assert_array_equal(mahalanobis_sq_rows(np.array([[1.0, 1.0], [0.0, 2.0]]), m), [3.0, 4.0])
    with pytest.raises(DimensionError):
        mahalanobis_sq(np.ones(3), np.ones(3), m)


def test_mahalanobis_sq_is_exactly_symmetric():
    rng = np.random.default_rng(12)
    for _ in range(20):
        m = MetricMatrix(_random_psd(rng, 5), 0.0, 0)
        x, y = rng.standard_normal(5), rng.standard_normal(5)
        assert mahalanobis_sq(x, y, m) == mahalanobis_sq(y, x, m)
        assert mahalanobis_sq(x, x, m) == 0.0


def test_cholesky_of_diagonal_metric():
    factor = cholesky_factor(MetricMatrix(np.diag([4.0, 9.0]), 0.0, 0))
    np.testing.assert_allclose(factor.lower, np.diag([2.0, 3.0]))
    assert factor.shift == 0.0


def test_cholesky_shift_on_semidefinite_metric(caplog):
    singular = MetricMatrix(np.zeros((2, 2)), 0.0, 0)
    with caplog.at_level(logging.WARNING, logger="biasguard.metric"):
        factor = cholesky_factor(singular)
    assert factor.shift > 0.0
    assert "diagonal shift" in caplog.text


def test_cholesky_fails_on_indefinite_metric():
    with pytest.raises(NumericalFailure) as info:
        cholesky_factor(MetricMatrix(np.diag([1.0, -1.0]), 0.0, 0))
    assert info.value.primitive == "cholesky"


def test_metric_is_read_only_and_scales():
    m = ridge_pseudo_inverse(np.eye(2) * 2.0, 0.0, source_batch_size=8)
    with pytest.raises(ValueError):
        m.matrix[0, 0] = 1.0
    np.testing.assert_allclose(m.scaled(10.0).matrix, m.matrix * 10.0)
    with pytest.raises(ContractViolation):
        m.scaled(0.0)


def test_metric_serialisation():
    m = ridge_pseudo_inverse(_random_psd(np.random.default_rng(5), 4), 1e-3, source_batch_size=64)
    payload = write_metric(m)
    restored = read_metric(payload)
    assert restored.matrix.tobytes() == m.matrix.tobytes()
    assert restored.eps == m.eps and restored.source_batch_size == 64
    with pytest.raises(TruncatedFileError):
        read_metric(payload[:-6])
    with pytest.raises(TruncatedFileError):
        read_metric(payload[:5])
