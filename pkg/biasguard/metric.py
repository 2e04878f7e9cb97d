"""Batch covariance, ridge-regularised pseudo-inverse and Mahalanobis distances."""
import logging
import struct
from dataclasses import dataclass

import numpy as np

from biasguard import config
from biasguard.diffcore import Tensor, add, custom, matmul, mean, mul, sub, transpose
from biasguard.errors import ContractViolation, DimensionError, NumericalFailure, TruncatedFileError

logger = logging.getLogger(__name__)

_METRIC_HEADER = struct.Struct("<Id")
_METRIC_TRAILER = struct.Struct("<I")


@dataclass(frozen=True, eq=False)
class MetricMatrix:
    """Symmetric PSD k x k matrix M = [cov + eps I]^+ and where it came from."""
    matrix: np.ndarray
    eps: float
    source_batch_size: int

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"metric must be square, got shape {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    def scaled(self, factor: float) -> "MetricMatrix":
        if factor <= 0:
            raise ContractViolation(f"metric scale must be positive, got {factor}")
        return MetricMatrix(self.matrix * factor, self.eps, self.source_batch_size)


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    lower: np.ndarray
    shift: float


def identity_metric(k: int) -> MetricMatrix:
    """Euclidean metric of width k."""
    return MetricMatrix(np.eye(k), 0.0, 0)


def batch_covariance(stacked: np.ndarray) -> np.ndarray:
    """
    Unbiased sample covariance of the rows of a stacked batch.

    Args:
        stacked: (2N, k) matrix, the X projections over the Y projections

    Returns:
        Symmetric (k, k) covariance with divisor rows - 1
    """
    s = np.asarray(stacked, dtype=np.float64)
    if s.ndim != 2:
        raise DimensionError(f"batch_covariance expects a matrix, got shape {s.shape}")
    if s.shape[0] < 2:
        raise ContractViolation(f"batch_covariance needs at least 2 rows, got {s.shape[0]}")
    centered = s - s.mean(axis=0)
    cov = centered.T @ centered / (s.shape[0] - 1)
    return (cov + cov.T) / 2.0


def ridge_pseudo_inverse(cov: np.ndarray, eps: float = config.DEFAULT_METRIC_EPS,
                         source_batch_size: int = 0) -> MetricMatrix:
    """
    [cov + eps I]^+ through a symmetric eigendecomposition.

    Eigenvalues at or below the pseudo-inverse tolerance are treated as zero,
    so eps = 0 on a singular covariance still yields a finite PSD matrix.

    Args:
        cov: Symmetric covariance
        eps: Ridge term, >= 0
        source_batch_size: Number of stacked rows the covariance came from

    Returns:
        MetricMatrix
    """
    c = np.asarray(cov, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DimensionError(f"covariance must be square, got shape {c.shape}")
    if eps < 0 or not np.isfinite(eps):
        raise ContractViolation(f"metric eps must be finite and >= 0, got {eps}")
    if not np.all(np.isfinite(c)):
        raise NumericalFailure("covariance contains non-finite values", primitive="pinv")
    if np.max(np.abs(c - c.T), initial=0.0) > config.SYMMETRY_TOL:
        raise ContractViolation("covariance is not symmetric")
    regularised = c + eps * np.eye(c.shape[0])
    regularised = (regularised + regularised.T) / 2.0
    try:
        values, vectors = np.linalg.eigh(regularised)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigendecomposition failed: {exc}", primitive="pinv") from exc
    keep = values > config.PINV_TOL
    if not np.all(keep):
        logger.debug(f"[METRIC] {int(np.sum(~keep))} of {len(values)} eigenvalues below tolerance")
    inverse = np.zeros_like(values)
    inverse[keep] = 1.0 / values[keep]
    m = (vectors * inverse) @ vectors.T
    return MetricMatrix((m + m.T) / 2.0, float(eps), int(source_batch_size))


def mahalanobis_sq(x: np.ndarray, y: np.ndarray, metric: MetricMatrix) -> float:
    """(x - y)^T M (x - y), floored at zero."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape or x.shape[0] != metric.k:
        raise DimensionError(f"mahalanobis_sq: {x.shape} and {y.shape} under a {metric.k}x{metric.k} metric")
    d = x - y
    return max(float(d @ metric.matrix @ d), 0.0)


def mahalanobis_sq_rows(diffs: np.ndarray, metric: MetricMatrix) -> np.ndarray:
    """Row-wise squared distances for a matrix of differences."""
    d = np.asarray(diffs, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != metric.k:
        raise DimensionError(f"mahalanobis_sq_rows: shape {d.shape} under a {metric.k}x{metric.k} metric")
    return np.maximum(np.einsum("ij,jk,ik->i", d, metric.matrix, d), 0.0)


def cholesky_factor(metric: MetricMatrix) -> CholeskyFactor:
    """
    Lower factor L with L L^T = M + shift I, trying growing diagonal shifts.

    Raises:
        NumericalFailure: when every shift fails
    """
    eye = np.eye(metric.k)
    for shift in config.CHOLESKY_SHIFTS:
        try:
            lower = np.linalg.cholesky(metric.matrix + shift * eye)
        except np.linalg.LinAlgError:
            continue
        if shift > 0:
            logger.warning(f"[METRIC] Cholesky needed a diagonal shift of {shift:g}")
        return CholeskyFactor(lower, float(shift))
    raise NumericalFailure("Cholesky failed for every diagonal shift", primitive="cholesky")


def covariance_graph(stacked: Tensor) -> Tensor:
    """Differentiable counterpart of batch_covariance."""
    if stacked.ndim != 2 or stacked.shape[0] < 2:
        raise ContractViolation(f"covariance_graph needs a matrix with >= 2 rows, got {stacked.shape}")
    centered = sub(stacked, mean(stacked, axis=0, keepdims=True))
    cov = mul(matmul(transpose(centered), centered), 1.0 / (stacked.shape[0] - 1))
    return mul(add(cov, transpose(cov)), 0.5)


def ridge_inverse_graph(cov: Tensor, eps: float) -> Tensor:
    """
    Differentiable (cov + eps I)^-1.

    The adjoint -M g M holds for a true inverse, so eps must be positive.
    """
    if eps <= 0:
        raise ContractViolation(f"differentiating the metric requires eps > 0, got {eps}")
    m = ridge_pseudo_inverse(cov.data, eps).matrix
    m_const = Tensor(m)

    def vjp(g, needs):
        return (mul(matmul(matmul(m_const, g), m_const), -1.0),)
    return custom("ridge_inverse", m, (cov,), vjp)


def write_metric(metric: MetricMatrix) -> bytes:
    """Serialise as k (u32), eps (f64), row-major entries (f64), source batch size (u32)."""
    return (_METRIC_HEADER.pack(metric.k, metric.eps)
            + metric.matrix.astype("<f8").tobytes()
            + _METRIC_TRAILER.pack(metric.source_batch_size))


def read_metric(payload: bytes) -> MetricMatrix:
    if len(payload) < _METRIC_HEADER.size:
        raise TruncatedFileError("metric payload shorter than its header")
    k, eps = _METRIC_HEADER.unpack_from(payload, 0)
    body = k * k * 8
    expected = _METRIC_HEADER.size + body + _METRIC_TRAILER.size
    if len(payload) < expected:
        raise TruncatedFileError(f"metric payload has {len(payload)} bytes, expected {expected}")
    matrix = np.frombuffer(payload, dtype="<f8", count=k * k, offset=_METRIC_HEADER.size).reshape(k, k)
    (batch,) = _METRIC_TRAILER.unpack_from(payload, _METRIC_HEADER.size + body)
    return MetricMatrix(matrix.astype(np.float64), float(eps), int(batch))
