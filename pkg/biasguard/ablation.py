"""Ablation harness: one-at-a-time variants of a base config, trained and evaluated in a worker pool."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from biasguard import config
from biasguard.data import GzslDataset
from biasguard.errors import ContractViolation
from biasguard.manifest import config_fingerprint
from biasguard.pipeline import (
    BRANCHES_A_ONLY, METRIC_EUCLID, EvalReport, TrainConfig, evaluate, train,
)

logger = logging.getLogger(__name__)

AXES = ("metric", "branches", "fusion", "lambda", "losses", "dims")
LOSS_VARIANTS: Dict[str, Dict[str, float]] = {
    "full": {},
    "no_vae": {"lambda_vae": 0.0},
    "no_mse": {"lambda_mse": 0.0},
    "no_m": {"lambda_m": 0.0},
    "wgan_only": {"lambda_vae": 0.0, "lambda_mse": 0.0, "lambda_m": 0.0},
}
_LAMBDA_KEYS = ("lambda_vae", "lambda_mse", "lambda_m")


@dataclass(frozen=True)
class AblationRow:
    label: str
    config: TrainConfig
    report: EvalReport


def _lambda_label(cfg: TrainConfig) -> str:
    w = cfg.weights
    return f"({w.lambda_vae},{w.lambda_mse},{w.lambda_m})"


def build_variants(base: TrainConfig, axes: Mapping[str, Sequence[Any]]) -> List[Tuple[str, TrainConfig]]:
    """
    Expand axes into labelled configs, each differing from ``base`` along one axis.

    The lambda axis adds the base weights as its own row; variants equal to an
    earlier one are dropped. With no axes the base config is the only row.

    Args:
        base: Configuration every variant starts from
        axes: Axis name to values

    Returns:
        (label, config) pairs in axis order
    """
    unknown = set(axes) - set(AXES)
    if unknown:
        raise ContractViolation(f"unknown ablation axes: {sorted(unknown)}")
    variants: List[Tuple[str, TrainConfig]] = []
    for value in axes.get("metric", ()):
        variants.append((f"metric={value}", base.replace(metric=str(value).upper())))
    for value in axes.get("branches", ()):
        value = str(value).upper()
        if value == BRANCHES_A_ONLY:
            variants.append((f"branches={value}", base.replace(branches=value, metric=METRIC_EUCLID)))
        else:
            variants.append((f"branches={value}", base.replace(branches=value)))
    for value in axes.get("fusion", ()):
        variants.append((f"fusion={value}", base.replace(fusion_mode=str(value).upper())))
    grid = list(axes.get("lambda", ()))
    if grid:
        variants.append((_lambda_label(base), base))
        for key in _LAMBDA_KEYS:
            for value in grid:
                cfg = base.replace(**{key: float(value)})
                variants.append((_lambda_label(cfg), cfg))
    for name in axes.get("losses", ()):
        if name not in LOSS_VARIANTS:
            raise ContractViolation(f"unknown loss variant {name!r}; choose from {sorted(LOSS_VARIANTS)}")
        variants.append((f"losses={name}", base.replace(**LOSS_VARIANTS[name])))
    for d_latent, k_proj in axes.get("dims", ()):
        variants.append((f"d_latent={d_latent},k_proj={k_proj}",
                         base.replace(d_latent=int(d_latent), k_proj=int(k_proj))))
    if not variants:
        variants.append(("base", base))

    unique: List[Tuple[str, TrainConfig]] = []
    fingerprints = set()
    for label, cfg in variants:
        fp = config_fingerprint(cfg.to_items())
        if fp in fingerprints:
            continue
        fingerprints.add(fp)
        unique.append((label, cfg))
    return unique


def run_variant(label: str, cfg: TrainConfig, dataset: GzslDataset) -> AblationRow:
    checkpoint = train(cfg, dataset)
    report = evaluate(dataset, checkpoint)
    logger.info(f"[ABLATE] {label}: U={report.u:.1f} S={report.s:.1f} H={report.h:.1f}")
    return AblationRow(label, cfg, report)


def ablate(base: TrainConfig, axes: Mapping[str, Sequence[Any]], dataset: GzslDataset,
           threads: Optional[int] = None) -> List[AblationRow]:
    """
    Train and evaluate every variant; rows come back in variant order.

    Args:
        base: Base configuration (its seed is shared by every row)
        axes: Axis name to values, see build_variants
        dataset: Tagged dataset
        threads: Worker cap; defaults to config.THREADS

    Returns:
        One AblationRow per distinct variant
    """
    variants = build_variants(base, axes)
    workers = max(1, min(threads or config.THREADS, len(variants)))
    logger.info(f"[ABLATE] {len(variants)} configurations on {workers} worker(s)")
    if workers == 1:
        return [run_variant(label, cfg, dataset) for label, cfg in variants]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_variant, label, cfg, dataset) for label, cfg in variants]
        return [future.result() for future in futures]
