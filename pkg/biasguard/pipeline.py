"""Training loop, nearest-class inference and GZSL evaluation."""
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from biasguard import config
from biasguard.data import SPLIT_TEST, SPLIT_TRAIN, GzslDataset
from biasguard.diffcore import (
    AdamState, ComputationRecord, Tensor, adam_init, adam_step, add, concat, evaluate_with_gradients,
    no_grad, seeded_rng,
)
from biasguard.errors import ContractViolation, DimensionError, NumericalFailure, TrainingAborted
from biasguard.losses import (
    LossBreakdown, LossWeights, generator_loss, gradient_penalty, mahalanobis_loss, mse_loss,
    prototype_alignment_loss, total_loss, vae_loss, wgan_losses, weighted_total,
)
from biasguard.metric import (
    MetricMatrix, batch_covariance, covariance_graph, identity_metric, mahalanobis_sq_rows,
    ridge_inverse_graph, ridge_pseudo_inverse,
)
from biasguard.model import (
    CRITIC_GROUP, JOINT_GROUP, ModelConfig, ModelParameters, atf_fuse, critic_value,
    discriminate_A, discriminate_B, encode, generate, init_parameters, project_A,
)

logger = logging.getLogger(__name__)

METRIC_MAHA = "MAHA"
METRIC_EUCLID = "EUCLID"
METRICS = (METRIC_MAHA, METRIC_EUCLID)
BRANCHES_BOTH = "A_AND_B"
BRANCHES_A_ONLY = "A_ONLY"
BRANCHES = (BRANCHES_BOTH, BRANCHES_A_ONLY)

EPOCH_KEYS = ("l_wgan", "l_vae", "l_mse", "l_m", "total", "l_critic")
HISTORY_KEYS = EPOCH_KEYS + ("batch_total",)

_MODEL_KEYS = ("d_visual", "k_semantic", "d_latent", "k_proj", "hidden_fusion", "hidden_encoder",
               "hidden_generator", "hidden_disc", "fusion_mode")
_WEIGHT_KEYS = ("lambda_vae", "lambda_mse", "lambda_m", "lambda_gp", "n_critic")
_RUN_KEYS = ("metric_eps", "batch_size", "epochs", "lr", "seed", "differentiate_metric", "metric", "branches")
CONFIG_KEYS: Tuple[str, ...] = _MODEL_KEYS + _WEIGHT_KEYS + _RUN_KEYS

_QUERY_CHUNK = 256


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ContractViolation(f"expected a boolean, got {value!r}")


def _parse_optional_int(value: str) -> Optional[int]:
    return None if value.strip().lower() in ("", "none") else int(value)


_PARSERS: Dict[str, Callable[[str], Any]] = {
    "d_visual": int, "k_semantic": int, "d_latent": int, "k_proj": int,
    "hidden_fusion": _parse_optional_int, "hidden_encoder": _parse_optional_int,
    "hidden_generator": _parse_optional_int, "hidden_disc": _parse_optional_int,
    "fusion_mode": lambda v: v.strip().upper(),
    "lambda_vae": float, "lambda_mse": float, "lambda_m": float, "lambda_gp": float, "n_critic": int,
    "metric_eps": float, "batch_size": int, "epochs": int, "lr": float, "seed": int,
    "differentiate_metric": _parse_bool,
    "metric": lambda v: v.strip().upper(), "branches": lambda v: v.strip().upper(),
}


def _render(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on; two equal configs train identical checkpoints."""
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    metric_eps: float = config.DEFAULT_METRIC_EPS
    batch_size: int = config.DEFAULT_BATCH_SIZE
    epochs: int = config.DEFAULT_EPOCHS
    lr: float = config.DEFAULT_LR
    seed: int = config.DEFAULT_SEED
    differentiate_metric: bool = False
    metric: str = METRIC_MAHA
    branches: str = BRANCHES_BOTH

    def __post_init__(self):
        if self.batch_size < 2:
            raise ContractViolation(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ContractViolation(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ContractViolation(f"lr must be positive, got {self.lr}")
        if not np.isfinite(self.metric_eps) or self.metric_eps < 0:
            raise ContractViolation(f"metric_eps must be >= 0, got {self.metric_eps}")
        if self.seed < 0:
            raise ContractViolation(f"seed must be >= 0, got {self.seed}")
        if self.metric not in METRICS:
            raise ContractViolation(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.branches not in BRANCHES:
            raise ContractViolation(f"branches must be one of {BRANCHES}, got {self.branches!r}")
        if self.branches == BRANCHES_A_ONLY and self.metric == METRIC_MAHA:
            raise ContractViolation("the Mahalanobis metric needs both branches; use metric=EUCLID with A_ONLY")
        if self.differentiate_metric and self.metric_eps <= 0:
            raise ContractViolation("differentiate_metric requires metric_eps > 0")

    def effective_weights(self) -> LossWeights:
        """Loss weights with the metric term dropped when no metric is learned."""
        if self.metric == METRIC_EUCLID or self.branches == BRANCHES_A_ONLY:
            return dataclasses.replace(self.weights, lambda_m=0.0)
        return self.weights

    def to_items(self) -> Dict[str, str]:
        """Flat key=value view with every default materialised."""
        items: Dict[str, str] = {}
        for key in _MODEL_KEYS:
            items[key] = _render(getattr(self.model, key))
        for key in _WEIGHT_KEYS:
            items[key] = _render(getattr(self.weights, key))
        for key in _RUN_KEYS:
            items[key] = _render(getattr(self, key))
        return items

    def replace(self, **overrides: Any) -> "TrainConfig":
        """Copy with flat-key overrides applied to whichever part owns each key."""
        unknown = set(overrides) - set(CONFIG_KEYS)
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        model = {k: v for k, v in overrides.items() if k in _MODEL_KEYS}
        weights = {k: v for k, v in overrides.items() if k in _WEIGHT_KEYS}
        run = {k: v for k, v in overrides.items() if k in _RUN_KEYS}
        return dataclasses.replace(
            self,
            model=dataclasses.replace(self.model, **model) if model else self.model,
            weights=dataclasses.replace(self.weights, **weights) if weights else self.weights,
            **run,
        )

    @classmethod
    def from_items(cls, items: Mapping[str, str], base: Optional["TrainConfig"] = None) -> "TrainConfig":
        parsed: Dict[str, Any] = {}
        for key, raw in items.items():
            if key not in _PARSERS:
                raise ContractViolation(f"unknown config key {key!r}")
            try:
                parsed[key] = _PARSERS[key](raw)
            except ValueError as exc:
                raise ContractViolation(f"config key {key!r}: {exc}") from exc
        return (base or cls()).replace(**parsed)


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: ModelParameters
    metric: MetricMatrix
    config: TrainConfig
    epoch: int
    history: Dict[str, Tuple[float, ...]]


@dataclass(frozen=True)
class EvalReport:
    """Per-class accuracy (percent) and the GZSL U / S / H summary."""
    per_class: Dict[int, float]
    seen_classes: Tuple[int, ...]
    unseen_classes: Tuple[int, ...]
    u: float
    s: float
    h: float


def harmonic_mean(u: float, s: float) -> float:
    if u + s == 0:
        return 0.0
    return 2.0 * u * s / (u + s)


def _check_dims(model: ModelConfig, dataset: GzslDataset) -> None:
    if dataset.d_visual != model.d_visual or dataset.k_semantic != model.k_semantic:
        raise DimensionError(
            f"model expects d_visual={model.d_visual}, k_semantic={model.k_semantic}; "
            f"data has d_visual={dataset.d_visual}, k_semantic={dataset.k_semantic}")


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------

def prototype_projections(visual: np.ndarray, semantics: np.ndarray, params: ModelParameters) -> Tensor:
    """
    Branch-A prototypes of every (query, candidate) pair through the zero-noise mu path.

    Args:
        visual: Query features, (Q, d_visual)
        semantics: Candidate semantic vectors, (C, k_semantic)
        params: Model parameters

    Returns:
        Projections of shape (Q*C, k_proj), query-major
    """
    q, c = visual.shape[0], semantics.shape[0]
    fused = atf_fuse(np.repeat(visual, c, axis=0), np.tile(semantics, (q, 1)), params)
    latent = encode(fused, np.zeros((q * c, params.config.d_latent)), params)
    projection, _ = discriminate_A(generate(latent.mu, params), params)
    return projection


def _batch_candidates(s_bar: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    candidates, targets = np.unique(s_bar, axis=0, return_inverse=True)
    return candidates, np.asarray(targets, dtype=np.int64).reshape(-1)


def _metric_term(X: Tensor, x_bar: np.ndarray, s_bar: np.ndarray, params: ModelParameters,
                 cfg: TrainConfig) -> Tuple[MetricMatrix, Tensor]:
    k = params.config.k_proj
    if cfg.branches == BRANCHES_A_ONLY:
        return identity_metric(k), Tensor(0.0)
    Y = discriminate_B(x_bar, params)
    stacked = concat([X, Y], axis=0)
    if cfg.metric == METRIC_EUCLID:
        metric = identity_metric(k)
        m: Any = metric
    elif cfg.differentiate_metric:
        m = ridge_inverse_graph(covariance_graph(stacked), cfg.metric_eps)
        metric = MetricMatrix(m.data, cfg.metric_eps, stacked.shape[0])
    else:
        metric = ridge_pseudo_inverse(batch_covariance(stacked.data), cfg.metric_eps, stacked.shape[0])
        m = metric
    candidates, targets = _batch_candidates(s_bar)
    prototypes = prototype_projections(x_bar, candidates, params)
    l_m = add(mahalanobis_loss(X, Y, m), prototype_alignment_loss(prototypes, Y, targets, m))
    return metric, l_m


def critic_objective(params: ModelParameters, x_bar: np.ndarray, s_bar: np.ndarray, noise: np.ndarray,
                     alpha: np.ndarray, cfg: TrainConfig) -> Tuple[ComputationRecord, List[str]]:
    """
    WGAN-GP critic loss as a record over the critic's parameters.

    Fused features act as the real rows; generated rows come from the current
    encoder and generator with ``noise`` and are constants here.
    """
    with no_grad():
        x = atf_fuse(x_bar, s_bar, params)
        x_fake = generate(encode(x, noise, params).z, params)
    names = params.names(CRITIC_GROUP)

    def objective(*leaves: Tensor) -> Tensor:
        p = params.with_tensors(dict(zip(names, leaves)))
        gp = gradient_penalty(lambda v: critic_value(v, p), x, x_fake, alpha)
        loss, _ = wgan_losses(critic_value(x, p), critic_value(x_fake, p), gp, cfg.weights.lambda_gp)
        return loss

    return ComputationRecord(objective, "critic"), names


def joint_objective(params: ModelParameters, x_bar: np.ndarray, s_bar: np.ndarray, noise: np.ndarray,
                    cfg: TrainConfig) -> Tuple[ComputationRecord, List[str], List[MetricMatrix]]:
    """
    Weighted training objective over every non-critic parameter.

    The record's outputs are (total, l_wgan, l_vae, l_mse, l_m). l_m is the pair
    loss plus the alignment of each B-branch query with its own class among the
    distinct classes of the batch. Each evaluation appends the metric it used to
    the returned list.
    """
    names = params.names(JOINT_GROUP)
    weights = cfg.effective_weights()
    used: List[MetricMatrix] = []

    def objective(*leaves: Tensor) -> Tuple[Tensor, ...]:
        p = params.with_tensors(dict(zip(names, leaves)))
        x = atf_fuse(x_bar, s_bar, p)
        latent = encode(x, noise, p)
        x_fake = generate(latent.z, p)
        X, critic_fake = discriminate_A(x_fake, p)
        l_wgan = generator_loss(critic_fake)
        l_vae = vae_loss(latent.mu, latent.logvar, x, x_fake)
        l_mse = mse_loss(x, x_fake)
        metric, l_m = _metric_term(X, x_bar, s_bar, p, cfg)
        used.append(metric)
        return weighted_total(l_wgan, l_vae, l_mse, l_m, weights), l_wgan, l_vae, l_mse, l_m

    return ComputationRecord(objective, "joint"), names, used


def _critic_step(params: ModelParameters, state: AdamState, x_bar: np.ndarray, s_bar: np.ndarray,
                 noise: np.ndarray, alpha: np.ndarray,
                 cfg: TrainConfig) -> Tuple[ModelParameters, AdamState, float]:
    record, names = critic_objective(params, x_bar, s_bar, noise, alpha, cfg)
    result = evaluate_with_gradients(record, [params[n] for n in names])
    updated, state = adam_step({n: params[n] for n in names}, dict(zip(names, result.gradients)), state)
    return params.with_tensors(updated), state, result.loss


def _joint_step(params: ModelParameters, state: AdamState, x_bar: np.ndarray, s_bar: np.ndarray,
                noise: np.ndarray,
                cfg: TrainConfig) -> Tuple[ModelParameters, AdamState, LossBreakdown, MetricMatrix]:
    record, names, used = joint_objective(params, x_bar, s_bar, noise, cfg)
    result = evaluate_with_gradients(record, [params[n] for n in names])
    updated, state = adam_step({n: params[n] for n in names}, dict(zip(names, result.gradients)), state)
    breakdown = total_loss(*result.outputs[1:], weights=cfg.effective_weights())
    return params.with_tensors(updated), state, breakdown, used[-1]


def _batches(indices: np.ndarray, batch_size: int) -> List[np.ndarray]:
    batches = [indices[i:i + batch_size] for i in range(0, len(indices), batch_size)]
    if batches and len(batches[-1]) < 2:
        logger.warning(f"[TRAIN] dropping a final batch of {len(batches[-1])} row")
        batches.pop()
    return batches


def _freeze(history: Dict[str, List[float]]) -> Dict[str, Tuple[float, ...]]:
    return {k: tuple(v) for k, v in history.items()}


def train(cfg: TrainConfig, dataset: GzslDataset,
          on_epoch: Optional[Callable[[Checkpoint], None]] = None) -> Checkpoint:
    """
    Train fusion, VAE, generator and both discriminators; freeze the last batch's metric.

    Each batch takes ``n_critic`` critic updates (WGAN-GP) and then one joint update
    of everything else on the weighted sum of the WGAN, VAE, MSE and metric losses.
    The metric is rebuilt every batch from the stacked projections of both branches
    and scores both the pair loss and the prototype alignment.

    Args:
        cfg: Training configuration
        dataset: Tagged dataset; only train-tagged records are used
        on_epoch: Called with the checkpoint after every completed epoch

    Returns:
        Checkpoint of the final epoch

    Raises:
        TrainingAborted: on a non-finite value, carrying the last completed epoch's checkpoint
    """
    _check_dims(cfg.model, dataset)
    train_idx = dataset.split_indices(SPLIT_TRAIN)
    if len(train_idx) < 2:
        raise ContractViolation(f"training needs at least 2 train-tagged records, got {len(train_idx)}")

    params = init_parameters(cfg.model, seeded_rng(cfg.seed, "init"))
    critic_state = adam_init(params.group(CRITIC_GROUP), cfg.lr)
    joint_state = adam_init(params.group(JOINT_GROUP), cfg.lr)
    order_rng = seeded_rng(cfg.seed, "batches")
    noise_rng = seeded_rng(cfg.seed, "noise")
    interp_rng = seeded_rng(cfg.seed, "interpolation")
    n_latent = cfg.model.d_latent

    history: Dict[str, List[float]] = {key: [] for key in HISTORY_KEYS}
    metric = identity_metric(cfg.model.k_proj)
    last_good = Checkpoint(params, metric, cfg, 0, _freeze(history))
    logger.info(f"[TRAIN] {len(train_idx)} train records, {params.count()} parameters, "
                f"metric={cfg.metric}, branches={cfg.branches}, seed={cfg.seed}")

    for epoch in range(1, cfg.epochs + 1):
        sums = dict.fromkeys(EPOCH_KEYS, 0.0)
        batches = _batches(order_rng.permutation(train_idx), cfg.batch_size)
        for batch in batches:
            x_bar = dataset.visual[batch]
            s_bar = dataset.semantic[batch]
            n = len(batch)
            try:
                critic_losses = []
                for _ in range(cfg.weights.n_critic):
                    noise = noise_rng.standard_normal((n, n_latent))
                    alpha = interp_rng.uniform(size=n)
                    params, critic_state, l_critic = _critic_step(
                        params, critic_state, x_bar, s_bar, noise, alpha, cfg)
                    critic_losses.append(l_critic)
                noise = noise_rng.standard_normal((n, n_latent))
                params, joint_state, breakdown, metric = _joint_step(
                    params, joint_state, x_bar, s_bar, noise, cfg)
            except NumericalFailure as exc:
                logger.error(f"[TRAIN] epoch {epoch}: {exc}; returning checkpoint of epoch {last_good.epoch}")
                raise TrainingAborted(f"non-finite value in epoch {epoch}: {exc}",
                                      last_good=last_good, primitive=exc.primitive) from exc
            if not np.isfinite(breakdown.total):
                raise TrainingAborted(f"non-finite total loss in epoch {epoch}", last_good=last_good,
                                      primitive="total")
            history["batch_total"].append(breakdown.total)
            sums["l_wgan"] += breakdown.l_wgan
            sums["l_vae"] += breakdown.l_vae
            sums["l_mse"] += breakdown.l_mse
            sums["l_m"] += breakdown.l_m
            sums["total"] += breakdown.total
            sums["l_critic"] += float(np.mean(critic_losses))
        for key in EPOCH_KEYS:
            history[key].append(sums[key] / max(len(batches), 1))
        last_good = Checkpoint(params, metric, cfg, epoch, _freeze(history))
        logger.info(f"[TRAIN] epoch {epoch}/{cfg.epochs} total={history['total'][-1]:.4f} "
                    f"l_m={history['l_m'][-1]:.4f} critic={history['l_critic'][-1]:.4f}")
        if on_epoch is not None:
            on_epoch(last_good)
    return last_good


# ----------------------------------------------------------------------------
# Inference
# ----------------------------------------------------------------------------

def _query_embedding(visual: np.ndarray, params: ModelParameters, branches: str) -> np.ndarray:
    if branches == BRANCHES_A_ONLY:
        return project_A(visual, params).data
    return discriminate_B(visual, params).data


def class_distances(visuals: np.ndarray, class_semantics: Mapping[int, np.ndarray], checkpoint: Checkpoint,
                    metric: Optional[MetricMatrix] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Squared distances between each query's embedding and every class prototype.

    Args:
        visuals: Query features, (Q, d_visual)
        class_semantics: Candidate classes and their semantic vectors
        checkpoint: Trained model
        metric: Overrides the checkpoint's metric when given

    Returns:
        (candidate class ids in ascending order, (Q, C) distance matrix)
    """
    cfg = checkpoint.params.config
    if not class_semantics:
        raise ContractViolation("classification needs at least one candidate class")
    visuals = np.asarray(visuals, dtype=np.float64)
    if visuals.ndim != 2 or visuals.shape[1] != cfg.d_visual:
        raise DimensionError(f"queries have shape {visuals.shape}, checkpoint expects width {cfg.d_visual}")
    ids = np.array(sorted(class_semantics), dtype=np.int64)
    semantics = np.vstack([np.asarray(class_semantics[int(c)], dtype=np.float64).reshape(1, -1) for c in ids])
    if semantics.shape[1] != cfg.k_semantic:
        raise DimensionError(f"semantic vectors have width {semantics.shape[1]}, checkpoint expects {cfg.k_semantic}")
    metric = metric or checkpoint.metric
    out = np.empty((visuals.shape[0], len(ids)))
    with no_grad():
        for start in range(0, visuals.shape[0], _QUERY_CHUNK):
            chunk = visuals[start:start + _QUERY_CHUNK]
            queries = _query_embedding(chunk, checkpoint.params, checkpoint.config.branches)
            protos = prototype_projections(chunk, semantics, checkpoint.params).data
            protos = protos.reshape(len(chunk), len(ids), -1)
            diffs = (protos - queries[:, None, :]).reshape(-1, protos.shape[2])
            out[start:start + len(chunk)] = mahalanobis_sq_rows(diffs, metric).reshape(len(chunk), len(ids))
    return ids, out


def classify_batch(visuals: np.ndarray, class_semantics: Mapping[int, np.ndarray],
                   checkpoint: Checkpoint) -> np.ndarray:
    """Nearest class for every query; ties go to the smallest class id."""
    ids, dist = class_distances(visuals, class_semantics, checkpoint)
    return ids[np.argmin(dist, axis=1)]


def classify(visual: np.ndarray, class_semantics: Mapping[int, np.ndarray], checkpoint: Checkpoint) -> int:
    visual = np.asarray(visual, dtype=np.float64)
    if visual.ndim != 1:
        raise DimensionError(f"classify expects one feature vector, got shape {visual.shape}")
    return int(classify_batch(visual.reshape(1, -1), class_semantics, checkpoint)[0])


def _test_partition(dataset: GzslDataset) -> Tuple[np.ndarray, List[int], List[int]]:
    test_idx = dataset.split_indices(SPLIT_TEST)
    if len(test_idx) == 0:
        raise ContractViolation("evaluation needs a non-empty test split")
    present = set(dataset.labels[test_idx].tolist())
    seen = sorted(present & dataset.seen_classes)
    unseen = sorted(present & dataset.unseen_classes)
    if not seen or not unseen:
        absent = "seen" if not seen else "unseen"
        raise ContractViolation(f"test split has no {absent} classes; H is undefined")
    return test_idx, seen, unseen


def evaluate(dataset: GzslDataset, checkpoint: Checkpoint) -> EvalReport:
    """
    Per-class accuracy over the test split, averaged into U (unseen) and S (seen).

    Every class present in the dataset is a candidate for every query.
    """
    _check_dims(checkpoint.params.config, dataset)
    test_idx, seen, unseen = _test_partition(dataset)
    labels = dataset.labels[test_idx]
    predictions = classify_batch(dataset.visual[test_idx], dataset.class_semantics(), checkpoint)
    per_class = {c: 100.0 * float(np.mean(predictions[labels == c] == c)) for c in seen + unseen}
    s = float(np.mean([per_class[c] for c in seen]))
    u = float(np.mean([per_class[c] for c in unseen]))
    report = EvalReport(per_class, tuple(seen), tuple(unseen), u, s, harmonic_mean(u, s))
    logger.info(f"[EVAL] U={report.u:.1f} S={report.s:.1f} H={report.h:.1f}")
    return report


@dataclass(frozen=True)
class CorrectionSummary:
    """How the learned metric changes unseen-class decisions against plain Euclidean distance."""
    unseen_records: int
    fixed_by_metric: int
    broken_by_metric: int
    euclidean_accuracy: float
    metric_accuracy: float


def euclidean_vs_mahalanobis(checkpoint: Checkpoint, dataset: GzslDataset) -> CorrectionSummary:
    """
    Compare decisions on unseen test records under M* and under the identity.

    ``fixed_by_metric`` counts records Euclidean distance sends to a seen class
    and M* classifies correctly; ``broken_by_metric`` counts the reverse.
    """
    _check_dims(checkpoint.params.config, dataset)
    test_idx, _, _ = _test_partition(dataset)
    idx = np.array([i for i in test_idx if int(dataset.labels[i]) in dataset.unseen_classes], dtype=np.int64)
    labels = dataset.labels[idx]
    candidates = dataset.class_semantics()
    ids, maha = class_distances(dataset.visual[idx], candidates, checkpoint)
    _, euclid = class_distances(dataset.visual[idx], candidates, checkpoint,
                                metric=identity_metric(checkpoint.metric.k))
    by_metric = ids[np.argmin(maha, axis=1)]
    by_euclid = ids[np.argmin(euclid, axis=1)]
    to_seen = np.isin(by_euclid, sorted(dataset.seen_classes))
    fixed = int(np.sum(to_seen & (by_metric == labels)))
    broken = int(np.sum(np.isin(by_metric, sorted(dataset.seen_classes)) & (by_euclid == labels)))
    summary = CorrectionSummary(len(idx), fixed, broken,
                                100.0 * float(np.mean(by_euclid == labels)),
                                100.0 * float(np.mean(by_metric == labels)))
    logger.info(f"[EVAL] metric fixed {fixed} and broke {broken} of {len(idx)} unseen decisions")
    return summary


def replace_metric(checkpoint: Checkpoint, metric: MetricMatrix) -> Checkpoint:
    if metric.k != checkpoint.metric.k:
        raise DimensionError(f"metric width {metric.k} != {checkpoint.metric.k}")
    return dataclasses.replace(checkpoint, metric=metric)

