"""Training objectives: WGAN-GP, VAE, MSE and the Mahalanobis metric losses."""
import logging
from dataclasses import dataclass
from typing import Any, Callable, Tuple

import numpy as np

from biasguard import config
from biasguard.diffcore import (
    Tensor, TensorLike, add, as_tensor, enable_grad, exp, grad, index, log, mean, mul,
    quadform, reshape, sub, sum_,
)
from biasguard.errors import ContractViolation, DimensionError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda_vae: float = 1.0
    lambda_mse: float = 1.0
    lambda_m: float = 1.0
    lambda_gp: float = config.LAMBDA_GP
    n_critic: int = config.N_CRITIC

    def __post_init__(self):
        for name in ("lambda_vae", "lambda_mse", "lambda_m", "lambda_gp"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ContractViolation(f"{name} must be a finite non-negative number, got {value}")
        if int(self.n_critic) < 1:
            raise ContractViolation(f"n_critic must be >= 1, got {self.n_critic}")


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss values for one batch."""
    l_wgan: float
    l_vae: float
    l_mse: float
    l_m: float
    total: float


def _as_rows(t: TensorLike, what: str) -> Tensor:
    t = as_tensor(t)
    if t.ndim == 1:
        return reshape(t, (1, t.shape[0]))
    if t.ndim != 2:
        raise DimensionError(f"{what}: expected a vector or a matrix, got shape {t.shape}")
    return t


def vae_loss(mu: TensorLike, logvar: TensorLike, x: TensorLike, x_tilde: TensorLike) -> Tensor:
    """
    KL(N(mu, diag exp(logvar)) || N(0, I)) plus half the squared reconstruction error.

    Per-row losses are averaged over the batch.
    """
    mu, logvar = _as_rows(mu, "vae mu"), _as_rows(logvar, "vae logvar")
    x, x_tilde = _as_rows(x, "vae x"), _as_rows(x_tilde, "vae x_tilde")
    if mu.shape != logvar.shape:
        raise DimensionError(f"vae_loss: mu {mu.shape} vs logvar {logvar.shape}")
    if x.shape != x_tilde.shape or x.shape[0] != mu.shape[0]:
        raise DimensionError(f"vae_loss: x {x.shape}, x_tilde {x_tilde.shape}, mu {mu.shape}")
    kl_terms = sub(sub(add(mul(mu, mu), exp(logvar)), 1.0), logvar)
    kl = mul(sum_(kl_terms, axis=1), 0.5)
    diff = sub(x, x_tilde)
    reconstruction = mul(sum_(mul(diff, diff), axis=1), 0.5)
    return mean(add(kl, reconstruction))


def mse_loss(x: TensorLike, x_tilde: TensorLike) -> Tensor:
    x, x_tilde = as_tensor(x), as_tensor(x_tilde)
    if x.shape != x_tilde.shape:
        raise DimensionError(f"mse_loss: {x.shape} vs {x_tilde.shape}")
    diff = sub(x, x_tilde)
    return mean(mul(diff, diff))


def generator_loss(critic_fake: TensorLike) -> Tensor:
    return mul(mean(critic_fake), -1.0)


def wgan_losses(critic_real: TensorLike, critic_fake: TensorLike, gp: TensorLike,
                lambda_gp: float = config.LAMBDA_GP) -> Tuple[Tensor, Tensor]:
    """
    Critic and generator objectives, both minimised.

    Args:
        critic_real: Critic values on real rows
        critic_fake: Critic values on generated rows
        gp: Gradient penalty value
        lambda_gp: Penalty weight

    Returns:
        (mean(fake) - mean(real) + lambda_gp * gp, -mean(fake))
    """
    critic_loss = add(sub(mean(critic_fake), mean(critic_real)), mul(gp, float(lambda_gp)))
    return critic_loss, generator_loss(critic_fake)


def gradient_penalty(critic: Callable[[Tensor], Tensor], x: TensorLike, x_fake: TensorLike,
                     alpha: np.ndarray) -> Tensor:
    """
    Mean of (||grad critic(x_hat)|| - 1)^2 over interpolates x_hat = a x + (1 - a) x_fake.

    The interpolates are fresh leaves; the input-gradient is built with
    ``create_graph`` so the penalty stays differentiable in the critic weights.
    The norm is sqrt(sum g^2 + GRAD_NORM_EPS), so a constant critic scores
    (1e-6 - 1)^2 rather than exactly 1.

    Args:
        critic: Maps rows (N, d) to per-row values
        x: Real rows
        x_fake: Generated rows
        alpha: One interpolation coefficient per row, each in [0, 1]

    Returns:
        Scalar penalty tensor
    """
    x_rows = _as_rows(x, "gp real").data
    fake_rows = _as_rows(x_fake, "gp fake").data
    if x_rows.shape != fake_rows.shape:
        raise DimensionError(f"gradient_penalty: real {x_rows.shape} vs fake {fake_rows.shape}")
    a = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if a.shape[0] != x_rows.shape[0]:
        raise DimensionError(f"gradient_penalty: {a.shape[0]} coefficients for {x_rows.shape[0]} rows")
    if np.any(a < 0.0) or np.any(a > 1.0):
        raise ContractViolation("gradient_penalty: interpolation coefficients must lie in [0, 1]")
    with enable_grad():
        x_hat = Tensor(a[:, None] * x_rows + (1.0 - a[:, None]) * fake_rows, requires_grad=True)
        score = sum_(critic(x_hat))
        (g,) = grad(score, [x_hat], create_graph=True)
        norms = exp(mul(log(add(sum_(mul(g, g), axis=1), config.GRAD_NORM_EPS)), 0.5))
        gap = sub(norms, 1.0)
        return mean(mul(gap, gap))


def _pair_indices(n: int) -> Tuple[np.ndarray, np.ndarray]:
    i, j = np.nonzero(~np.eye(n, dtype=bool))
    return i, j


def mahalanobis_loss(X: TensorLike, Y: TensorLike, M: Any) -> Tensor:
    """
    -log of the summed margin between cross-pair and within-X squared distances.

    For every ordered pair i != j the margin is d^2(X_i, Y_j) - d^2(X_i, X_j)
    under M. A sum below the log floor is clamped and contributes no gradient.

    Args:
        X: Projections from discriminator A, shape (N, k)
        Y: Projections from discriminator B, shape (N, k)
        M: Metric as a MetricMatrix, array or Tensor (a Tensor may carry a graph)

    Returns:
        Scalar loss tensor
    """
    X, Y = as_tensor(X), as_tensor(Y)
    if X.ndim != 2 or X.shape != Y.shape:
        raise DimensionError(f"mahalanobis_loss: X {X.shape} vs Y {Y.shape}")
    n = X.shape[0]
    if n < 2:
        raise ContractViolation(f"mahalanobis_loss needs at least 2 rows, got {n}")
    m = M.matrix if hasattr(M, "matrix") else M
    m = as_tensor(m)
    if m.shape != (X.shape[1], X.shape[1]):
        raise DimensionError(f"mahalanobis_loss: metric {m.shape} for projections of width {X.shape[1]}")
    i, j = _pair_indices(n)
    anchors = index(X, i)
    cross = sum_(quadform(sub(anchors, index(Y, j)), m))
    within = sum_(quadform(sub(anchors, index(X, j)), m))
    margin = sub(cross, within)
    if margin.item() < config.LOG_EPS:
        logger.debug(f"[METRIC] pair margin {margin.item():.3e} clamped to {config.LOG_EPS}")
        return Tensor(-np.log(config.LOG_EPS))
    return mul(log(margin), -1.0)


def prototype_alignment_loss(prototypes: TensorLike, Y: TensorLike, targets: np.ndarray, M: Any) -> Tensor:
    """
    Cross-entropy of each query against its own class among the candidate prototypes.

    Row i*C + c of ``prototypes`` is query i's prototype for candidate c. The
    score of a candidate is -0.5 d^2_M(prototype, Y_i), the log-density of Y_i
    under a Gaussian with precision M centred on that prototype.

    Args:
        prototypes: Prototype projections, shape (N*C, k), query-major
        Y: Query projections from discriminator B, shape (N, k)
        targets: Column of the true candidate for each query, shape (N,)
        M: Metric as a MetricMatrix, array or Tensor

    Returns:
        Mean negative log-probability of the true candidate
    """
    P, Y = as_tensor(prototypes), as_tensor(Y)
    if Y.ndim != 2 or P.ndim != 2 or P.shape[1] != Y.shape[1]:
        raise DimensionError(f"prototype_alignment_loss: prototypes {P.shape} vs queries {Y.shape}")
    n = Y.shape[0]
    if n < 1 or P.shape[0] % n:
        raise DimensionError(f"prototype_alignment_loss: {P.shape[0]} prototypes for {n} queries")
    c = P.shape[0] // n
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n or np.any(targets < 0) or np.any(targets >= c):
        raise ContractViolation(f"prototype_alignment_loss: targets must be {n} indices in [0, {c})")
    m = as_tensor(M.matrix if hasattr(M, "matrix") else M)
    queries = index(Y, np.repeat(np.arange(n), c))
    scores = reshape(mul(quadform(sub(P, queries), m), -0.5), (n, c))
    shifted = sub(scores, scores.data.max(axis=1, keepdims=True))
    log_norm = log(sum_(exp(shifted), axis=1))
    picked = index(shifted, (np.arange(n), targets))
    return mean(sub(log_norm, picked))


def weighted_total(l_wgan: TensorLike, l_vae: TensorLike, l_mse: TensorLike, l_m: TensorLike,
                   weights: LossWeights) -> Tensor:
    """Differentiable L_WGAN + lambda_VAE L_VAE + lambda_MSE L_MSE + lambda_M L_M."""
    total = add(l_wgan, mul(l_vae, weights.lambda_vae))
    total = add(total, mul(l_mse, weights.lambda_mse))
    return add(total, mul(l_m, weights.lambda_m))


def total_loss(l_wgan: TensorLike, l_vae: TensorLike, l_mse: TensorLike, l_m: TensorLike,
               weights: LossWeights) -> LossBreakdown:
    values = [float(as_tensor(v).item()) for v in (l_wgan, l_vae, l_mse, l_m)]
    total = values[0] + weights.lambda_vae * values[1] + weights.lambda_mse * values[2] + weights.lambda_m * values[3]
    return LossBreakdown(*values, total=total)
