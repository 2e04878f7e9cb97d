"""Run manifests written next to every artifact, and artifact inspection."""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from biasguard import __version__
from biasguard.checkpoint import MAGIC as CHECKPOINT_MAGIC, decode_checkpoint
from biasguard.data import BIN_MAGIC, load_features
from biasguard.errors import DataFormatError

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"

PathLike = Union[str, Path]


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: Dict[str, Any]
    seed: int
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""
    engine_version: str = __version__
    fingerprint: str = ""

    def __post_init__(self):
        if not self.fingerprint:
            self.fingerprint = config_fingerprint(self.config)


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def config_fingerprint(cfg: Dict[str, Any]) -> str:
    """
    Deterministic hash of a resolved configuration.

    Args:
        cfg: Configuration dictionary

    Returns:
        Hex SHA-256 of the sorted JSON encoding
    """
    data_str = json.dumps(cfg, sort_keys=True)
    return hashlib.sha256(data_str.encode()).hexdigest()


def manifest_path_for(artifact: PathLike) -> Path:
    artifact = Path(artifact)
    if artifact.name.endswith(MANIFEST_SUFFIX):
        return artifact
    return artifact.with_name(artifact.name + MANIFEST_SUFFIX)


def write_manifest(manifest: RunManifest, artifact: PathLike) -> Path:
    path = manifest_path_for(artifact)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(asdict(manifest), f, indent=2, sort_keys=True)
    logger.debug(f"[CLI] manifest written to {path}")
    return path


def read_manifest(path: PathLike) -> Optional[RunManifest]:
    """
    Load the manifest of an artifact (or a manifest file directly).

    Returns:
        RunManifest or None when there is none
    """
    path = manifest_path_for(path)
    if not path.exists():
        return None
    try:
        with open(path, "r", encoding="utf-8") as f:
            return RunManifest(**json.load(f))
    except (json.JSONDecodeError, TypeError) as exc:
        raise DataFormatError(f"unreadable manifest {path}: {exc}") from exc


def describe_artifact(path: PathLike) -> Dict[str, Any]:
    """Header summary decoded from the artifact itself."""
    path = Path(path)
    payload = path.read_bytes()
    if payload[:4] == CHECKPOINT_MAGIC:
        ck = decode_checkpoint(payload)
        return {"kind": "checkpoint", "epoch": ck.epoch, "config": ck.config.to_items(),
                "metric_k": ck.metric.k, "metric_eps": ck.metric.eps,
                "metric_source_batch_size": ck.metric.source_batch_size,
                "parameters": ck.params.count()}
    if payload[:4] == BIN_MAGIC:
        ds = load_features(path, "bin")
    else:
        first = payload.split(b"\n", 1)[0].decode("utf-8", errors="replace").strip()
        if not first.startswith("label"):
            return {"kind": "table", "header": first,
                    "rows": max(payload.count(b"\n") - 1, 0)}
        ds = load_features(path, "csv")
    return {"kind": "dataset", "records": ds.n_records, "d_visual": ds.d_visual,
            "k_semantic": ds.k_semantic, "seen_classes": sorted(ds.seen_classes),
            "unseen_classes": sorted(ds.unseen_classes), "fingerprint": ds.fingerprint()}


def inspect_artifact(path: PathLike) -> str:
    """
    Text shown by ``inspect``: the manifest, or a header summary when there is none.

    Args:
        path: Artifact or manifest path

    Returns:
        JSON text
    """
    path = Path(path)
    manifest = read_manifest(path)
    if manifest is not None:
        return json.dumps(asdict(manifest), indent=2, sort_keys=True)
    if path.name.endswith(MANIFEST_SUFFIX):
        raise DataFormatError(f"no such manifest: {path}")
    try:
        summary = describe_artifact(path)
    except (OSError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    return json.dumps(summary, indent=2, sort_keys=True)
