"""BGCP checkpoint container: length-prefixed sections after a magic and a version."""
import logging
import struct
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from biasguard.config import parse_key_value_text
from biasguard.diffcore import Tensor
from biasguard.errors import (
    BadMagicError, CheckpointFormatError, ContractViolation, TruncatedFileError, VersionMismatchError,
)
from biasguard.metric import read_metric, write_metric
from biasguard.model import ModelParameters, parameter_shapes
from biasguard.pipeline import Checkpoint, TrainConfig

logger = logging.getLogger(__name__)

MAGIC = b"BGCP"
VERSION = 1
SECTIONS = ("config", "params", "metric", "state", "history")

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class _Reader:
    """Cursor over a byte buffer; running off the end is a truncation."""

    def __init__(self, payload: bytes, what: str):
        self.payload = payload
        self.offset = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise TruncatedFileError(f"{self.what}: needed {n} bytes at offset {self.offset}, "
                                     f"{len(self.payload) - self.offset} left")
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: struct.Struct) -> int:
        return fmt.unpack(self.take(fmt.size))[0]

    def name(self) -> str:
        return self.take(self.unpack(_U16)).decode("utf-8")

    def done(self) -> bool:
        return self.offset == len(self.payload)


def _name(text: str) -> bytes:
    raw = text.encode("utf-8")
    return _U16.pack(len(raw)) + raw


def _encode_params(params: ModelParameters) -> bytes:
    parts = [_U32.pack(len(params.tensors))]
    for name, tensor in params.tensors.items():
        parts.append(_name(name))
        parts.append(_U8.pack(tensor.ndim))
        parts.extend(_U32.pack(dim) for dim in tensor.shape)
        parts.append(tensor.data.astype("<f8").tobytes())
    return b"".join(parts)


def _decode_params(payload: bytes, cfg: TrainConfig) -> ModelParameters:
    reader = _Reader(payload, "params section")
    expected = parameter_shapes(cfg.model)
    tensors: Dict[str, Tensor] = {}
    for _ in range(reader.unpack(_U32)):
        name = reader.name()
        shape = tuple(reader.unpack(_U32) for _ in range(reader.unpack(_U8)))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.take(count * 8), dtype="<f8").reshape(shape)
        tensors[name] = Tensor(values.astype(np.float64))
    layout = {name: t.shape for name, t in tensors.items()}
    if layout != expected:
        raise CheckpointFormatError("parameter layout does not match the stored model config")
    return ModelParameters(cfg.model, tensors)


def _encode_history(history: Dict[str, Tuple[float, ...]]) -> bytes:
    parts = [_U32.pack(len(history))]
    for key, values in history.items():
        parts.append(_name(key))
        parts.append(_U32.pack(len(values)))
        parts.append(np.asarray(values, dtype="<f8").tobytes())
    return b"".join(parts)


def _decode_history(payload: bytes) -> Dict[str, Tuple[float, ...]]:
    reader = _Reader(payload, "history section")
    history: Dict[str, Tuple[float, ...]] = {}
    for _ in range(reader.unpack(_U32)):
        key = reader.name()
        n = reader.unpack(_U32)
        history[key] = tuple(float(v) for v in np.frombuffer(reader.take(n * 8), dtype="<f8"))
    return history


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    """Serialise a checkpoint; equal checkpoints give equal bytes."""
    config_text = "\n".join(f"{k}={v}" for k, v in sorted(checkpoint.config.to_items().items()))
    sections = [
        ("config", config_text.encode("utf-8")),
        ("params", _encode_params(checkpoint.params)),
        ("metric", write_metric(checkpoint.metric)),
        ("state", _U32.pack(checkpoint.epoch)),
        ("history", _encode_history(checkpoint.history)),
    ]
    parts: List[bytes] = [MAGIC, _U16.pack(VERSION), _U16.pack(len(sections))]
    for name, payload in sections:
        parts.append(_name(name))
        parts.append(_U64.pack(len(payload)))
        parts.append(payload)
    return b"".join(parts)


def read_sections(payload: bytes) -> Dict[str, bytes]:
    """Split a container into its named sections after checking magic and version."""
    if payload[:4] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, got {payload[:4]!r}")
    reader = _Reader(payload, "checkpoint")
    reader.take(4)
    version = reader.unpack(_U16)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    sections: Dict[str, bytes] = {}
    for _ in range(reader.unpack(_U16)):
        name = reader.name()
        sections[name] = reader.take(reader.unpack(_U64))
    if not reader.done():
        raise CheckpointFormatError("trailing bytes after the last section")
    return sections


def decode_checkpoint(payload: bytes) -> Checkpoint:
    sections = read_sections(payload)
    missing = [name for name in SECTIONS if name not in sections]
    if missing:
        raise CheckpointFormatError(f"checkpoint is missing sections: {missing}")
    try:
        items = {k: v for k, (v, _) in parse_key_value_text(sections["config"].decode("utf-8")).items()}
        cfg = TrainConfig.from_items(items)
    except (ContractViolation, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable config section: {exc}") from exc
    params = _decode_params(sections["params"], cfg)
    metric = read_metric(sections["metric"])
    if metric.k != cfg.model.k_proj:
        raise CheckpointFormatError(f"metric width {metric.k} does not match k_proj={cfg.model.k_proj}")
    state = _Reader(sections["state"], "state section")
    epoch = state.unpack(_U32)
    return Checkpoint(params, metric, cfg, epoch, _decode_history(sections["history"]))


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint))
    logger.info(f"[CHECKPOINT] saved epoch {checkpoint.epoch} to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    checkpoint = decode_checkpoint(Path(path).read_bytes())
    logger.info(f"[CHECKPOINT] loaded epoch {checkpoint.epoch} from {path}")
    return checkpoint
