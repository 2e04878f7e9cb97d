"""Command-line entry point: synth, train, eval, ablate, classify, inspect."""
import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from biasguard import config
from biasguard.ablation import AXES, ablate
from biasguard.checkpoint import load_checkpoint, save_checkpoint
from biasguard.crash_safe import lastgood_path, run_guarded
from biasguard.data import SynthConfig, load_features, make_splits, synth_gzsl, write_features
from biasguard.errors import (
    ContractViolation, DataFormatError, DimensionError, NumericalFailure, TrainingAborted,
)
from biasguard.manifest import RunManifest, inspect_artifact, utc_now, write_manifest
from biasguard.pipeline import (
    BRANCHES_A_ONLY, CONFIG_KEYS, METRIC_EUCLID, TrainConfig, classify, euclidean_vs_mahalanobis,
    evaluate, train,
)
from biasguard.report import format_table, summarize, write_per_class, write_table

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

# flag dest -> TrainConfig key
_TRAIN_FLAGS: Dict[str, str] = {
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "seed": "seed",
    "latent": "d_latent", "proj": "k_proj", "fusion": "fusion_mode", "metric": "metric",
    "branches": "branches", "lambda_vae": "lambda_vae", "lambda_mse": "lambda_mse",
    "lambda_m": "lambda_m", "lambda_gp": "lambda_gp", "n_critic": "n_critic",
    "metric_eps": "metric_eps", "differentiate_metric": "differentiate_metric",
}


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="Feature file (CSV or BIN)")
    p.add_argument("--format", choices=("csv", "bin"), help="Feature format (default: from suffix)")
    p.add_argument("--split-manifest", help="CSV of class_id,seen|unseen overriding the file's partition")


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--latent", type=int, help="Latent dimension")
    p.add_argument("--proj", type=int, help="Projection dimension of both discriminators")
    p.add_argument("--fusion", choices=("ATF", "CONCAT"))
    p.add_argument("--metric", choices=("MAHA", "EUCLID"))
    p.add_argument("--branches", choices=("A_AND_B", "A_ONLY"))
    p.add_argument("--lambda-vae", type=float)
    p.add_argument("--lambda-mse", type=float)
    p.add_argument("--lambda-m", type=float)
    p.add_argument("--lambda-gp", type=float)
    p.add_argument("--n-critic", type=int)
    p.add_argument("--metric-eps", type=float)
    p.add_argument("--differentiate-metric", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biasguard",
                                     description="Mahalanobis-metric VAEGAN for generalized zero-shot learning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate a synthetic biased GZSL dataset")
    p.add_argument("--classes", type=int, default=config.DESK_CLASSES)
    p.add_argument("--unseen", type=int, default=config.DESK_UNSEEN)
    p.add_argument("--per-class", type=int, default=config.DESK_PER_CLASS)
    p.add_argument("--dim-visual", type=int, default=config.DESK_D_VISUAL)
    p.add_argument("--dim-semantic", type=int, default=config.DESK_K_SEMANTIC)
    p.add_argument("--bias", type=float, default=2.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--anisotropy", type=float, default=4.0)
    p.add_argument("--test-fraction", type=float, default=config.DEFAULT_TEST_FRACTION)
    p.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    p.add_argument("--format", choices=("csv", "bin"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="Train a checkpoint")
    _add_data_flags(p)
    _add_training_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="Evaluate a checkpoint on the test split")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="Write the config,U,S,H row to this CSV")
    p.add_argument("--per-class", help="Write class_id,side,accuracy CSV here")
    p.add_argument("--compare-euclidean", action="store_true",
                   help="Also report unseen decisions the metric changes against Euclidean distance")

    p = sub.add_parser("ablate", help="Train and evaluate configuration variants")
    _add_data_flags(p)
    _add_training_flags(p)
    p.add_argument("--metric-axis", help="Comma list of MAHA,EUCLID")
    p.add_argument("--branches-axis", help="Comma list of A_AND_B,A_ONLY")
    p.add_argument("--fusion-axis", help="Comma list of ATF,CONCAT")
    p.add_argument("--lambda-grid", help="Comma list of weights applied to each lambda in turn")
    p.add_argument("--losses-axis", help="Comma list of full,no_vae,no_mse,no_m,wgan_only")
    p.add_argument("--dims-grid", help="Comma list of LATENTxPROJ pairs, e.g. 8x12,16x24")
    p.add_argument("--threads", type=int, default=None, help="Worker cap (default BIASGUARD_THREADS)")
    p.add_argument("--out", help="Write the table to this CSV")

    p = sub.add_parser("classify", help="Classify one record of a dataset")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, required=True)

    p = sub.add_parser("inspect", help="Print an artifact's manifest or header")
    p.add_argument("path")
    return parser


def _split_list(text: Optional[str]) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()] if text else []


def _resolve_config(args: argparse.Namespace, d_visual: int, k_semantic: int) -> TrainConfig:
    items: Dict[str, str] = {}
    if args.config:
        items.update(config.load_config_file(args.config, CONFIG_KEYS))
    items.setdefault("d_visual", str(d_visual))
    items.setdefault("k_semantic", str(k_semantic))
    cfg = TrainConfig.from_items(items)
    overrides: Dict[str, Any] = {key: getattr(args, dest) for dest, key in _TRAIN_FLAGS.items()
                                 if getattr(args, dest, None) is not None}
    if overrides.get("branches", items.get("branches", "")).upper() == BRANCHES_A_ONLY \
            and "metric" not in overrides and "metric" not in items:
        overrides["metric"] = METRIC_EUCLID
    return cfg.replace(**overrides)


def _load(args: argparse.Namespace):
    return load_features(args.data, args.format, args.split_manifest)


def _manifest(command: str, argv: Sequence[str], cfg: Dict[str, Any], seed: int, started: str,
              inputs: Dict[str, str], outputs: Dict[str, str], artifact: Path) -> None:
    write_manifest(RunManifest(command=command, argv=list(argv), config=cfg, seed=seed, inputs=inputs,
                               outputs=outputs, started_at=started, finished_at=utc_now()), artifact)


def cmd_synth(args: argparse.Namespace, argv: Sequence[str]) -> int:
    started = utc_now()
    synth_cfg = SynthConfig(n_classes=args.classes, n_unseen=args.unseen, samples_per_class=args.per_class,
                            d_visual=args.dim_visual, k_semantic=args.dim_semantic, bias_shift=args.bias,
                            cluster_scale=args.scale, anisotropy=args.anisotropy, seed=args.seed)
    dataset = make_splits(synth_gzsl(synth_cfg), args.test_fraction, args.seed)
    out = write_features(dataset, args.out, args.format)
    resolved = dict(vars(synth_cfg), test_fraction=args.test_fraction)
    _manifest("synth", argv, resolved, args.seed, started, {}, {"dataset": str(out)}, out)
    print(f"wrote {dataset.n_records} records ({len(dataset.seen_classes)} seen / "
          f"{len(dataset.unseen_classes)} unseen classes) to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, argv: Sequence[str]) -> int:
    started = utc_now()
    dataset = _load(args)
    cfg = _resolve_config(args, dataset.d_visual, dataset.k_semantic)
    out = Path(args.out)
    try:
        checkpoint = run_guarded(lambda on_epoch: train(cfg, dataset, on_epoch=on_epoch), out)
    except TrainingAborted as exc:
        print(f"error[numerical]: {exc}; last good checkpoint at {lastgood_path(out)}", file=sys.stderr)
        return EXIT_NUMERICAL
    save_checkpoint(checkpoint, out)
    _manifest("train", argv, cfg.to_items(), cfg.seed, started, {"data": str(args.data)},
              {"checkpoint": str(out)}, out)
    print(f"trained {checkpoint.epoch} epoch(s), final total loss {checkpoint.history['total'][-1]:.4f}; "
          f"checkpoint at {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, argv: Sequence[str]) -> int:
    started = utc_now()
    dataset = _load(args)
    checkpoint = load_checkpoint(args.checkpoint)
    report = evaluate(dataset, checkpoint)
    rows = [(Path(args.checkpoint).stem, report)]
    print(format_table(rows), end="")
    print(summarize(report))
    outputs: Dict[str, str] = {}
    if args.per_class:
        outputs["per_class"] = str(write_per_class(report, args.per_class))
    if args.compare_euclidean:
        summary = euclidean_vs_mahalanobis(checkpoint, dataset)
        print(f"unseen records: {summary.unseen_records}; fixed by metric: {summary.fixed_by_metric}; "
              f"broken by metric: {summary.broken_by_metric}; accuracy euclidean "
              f"{summary.euclidean_accuracy:.1f} vs metric {summary.metric_accuracy:.1f}")
    if args.out:
        out = write_table(rows, args.out)
        outputs["table"] = str(out)
        _manifest("eval", argv, checkpoint.config.to_items(), checkpoint.config.seed, started,
                  {"data": str(args.data), "checkpoint": str(args.checkpoint)}, outputs, out)
    return EXIT_OK


def _parse_dims(text: Optional[str]) -> List[Tuple[int, int]]:
    pairs = []
    for item in _split_list(text):
        try:
            latent, proj = item.lower().split("x")
            pairs.append((int(latent), int(proj)))
        except ValueError as exc:
            raise ContractViolation(f"dims grid entry {item!r} is not LATENTxPROJ") from exc
    return pairs


def cmd_ablate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    started = utc_now()
    dataset = _load(args)
    base = _resolve_config(args, dataset.d_visual, dataset.k_semantic)
    try:
        grid = [float(v) for v in _split_list(args.lambda_grid)]
    except ValueError as exc:
        raise ContractViolation(f"lambda grid: {exc}") from exc
    raw_axes: Dict[str, Sequence[Any]] = {
        "metric": [v.upper() for v in _split_list(args.metric_axis)],
        "branches": [v.upper() for v in _split_list(args.branches_axis)],
        "fusion": [v.upper() for v in _split_list(args.fusion_axis)],
        "lambda": grid,
        "losses": _split_list(args.losses_axis),
        "dims": _parse_dims(args.dims_grid),
    }
    axes = {name: values for name, values in raw_axes.items() if values and name in AXES}
    rows = ablate(base, axes, dataset, threads=args.threads)
    table = [(row.label, row.report) for row in rows]
    print(format_table(table), end="")
    if args.out:
        out = write_table(table, args.out)
        resolved = dict(base.to_items(), axes={k: [str(v) for v in vals] for k, vals in axes.items()})
        _manifest("ablate", argv, resolved, base.seed, started, {"data": str(args.data)},
                  {"table": str(out)}, out)
    return EXIT_OK


def cmd_classify(args: argparse.Namespace, argv: Sequence[str]) -> int:
    dataset = _load(args)
    checkpoint = load_checkpoint(args.checkpoint)
    if not 0 <= args.index < dataset.n_records:
        raise ContractViolation(f"--index {args.index} outside 0..{dataset.n_records - 1}")
    print(classify(dataset.visual[args.index], dataset.class_semantics(), checkpoint))
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace, argv: Sequence[str]) -> int:
    print(inspect_artifact(args.path))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, Sequence[str]], int]] = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "classify": cmd_classify, "inspect": cmd_inspect,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Execute one subcommand.

    Args:
        argv: Arguments without the program name; defaults to sys.argv[1:]

    Returns:
        Exit code: 0 ok, 2 usage or contract, 3 data or dimension, 4 numerical
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=getattr(logging, config.LOG_LEVEL, logging.INFO),
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args, argv)
    except (DataFormatError, DimensionError) as exc:
        kind = "dimension" if isinstance(exc, DimensionError) else "data"
        logger.error(f"[CLI] {args.command}: {exc}")
        print(f"error[{kind}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as exc:
        logger.error(f"[CLI] {args.command}: {exc}")
        print(f"error[numerical]: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ContractViolation as exc:
        logger.error(f"[CLI] {args.command}: {exc}")
        print(f"error[contract]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        logger.error(f"[CLI] {args.command}: {exc}")
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
