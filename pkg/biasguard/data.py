"""Synthetic GZSL data, feature file I/O and seen/unseen split management."""
import csv
import hashlib
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from biasguard import config
from biasguard.diffcore import seeded_rng
from biasguard.errors import (
    BadMagicError, ContractViolation, DataFormatError, DimensionInconsistencyError,
    SemanticMismatchError, TruncatedFileError, UnknownClassError, VersionMismatchError,
)

logger = logging.getLogger(__name__)

SPLIT_TRAIN = "train"
SPLIT_TEST = "test"
SPLIT_NONE = ""
SPLITS = (SPLIT_NONE, SPLIT_TRAIN, SPLIT_TEST)
_SPLIT_CODES = {SPLIT_NONE: 0, SPLIT_TRAIN: 1, SPLIT_TEST: 2}
_SPLIT_NAMES = {code: name for name, code in _SPLIT_CODES.items()}

FORMAT_CSV = "csv"
FORMAT_BIN = "bin"
# Seen/unseen partition written next to every CSV feature file
SPLIT_SIDECAR_SUFFIX = ".split.csv"

BIN_MAGIC = b"GZSL"
BIN_VERSION = 1
_BIN_HEADER = struct.Struct("<4sHIIIII")

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class FeatureRecord:
    visual: np.ndarray
    semantic: np.ndarray
    label: int
    split: str = SPLIT_NONE


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class GzslDataset:
    """
    Immutable set of records with class-level semantics and a seen/unseen partition.

    Records are stored column-wise: row i of ``visual``, ``semantic``, ``labels``
    and ``splits`` together form one FeatureRecord.
    """
    visual: np.ndarray
    semantic: np.ndarray
    labels: np.ndarray
    splits: Tuple[str, ...]
    seen_classes: FrozenSet[int]
    unseen_classes: FrozenSet[int]

    def __post_init__(self):
        object.__setattr__(self, "visual", _frozen(self.visual, np.float64))
        object.__setattr__(self, "semantic", _frozen(self.semantic, np.float64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        object.__setattr__(self, "splits", tuple(self.splits))
        object.__setattr__(self, "seen_classes", frozenset(int(c) for c in self.seen_classes))
        object.__setattr__(self, "unseen_classes", frozenset(int(c) for c in self.unseen_classes))
        n = self.labels.shape[0]
        if self.visual.ndim != 2 or self.semantic.ndim != 2:
            raise DimensionInconsistencyError("visual and semantic blocks must be matrices")
        if self.visual.shape[0] != n or self.semantic.shape[0] != n or len(self.splits) != n:
            raise DimensionInconsistencyError(
                f"{n} labels, {self.visual.shape[0]} visual rows, {self.semantic.shape[0]} semantic rows, "
                f"{len(self.splits)} split tags")

    @property
    def n_records(self) -> int:
        return int(self.labels.shape[0])

    @property
    def d_visual(self) -> int:
        return int(self.visual.shape[1])

    @property
    def k_semantic(self) -> int:
        return int(self.semantic.shape[1])

    def records(self) -> Iterator[FeatureRecord]:
        for i in range(self.n_records):
            yield FeatureRecord(self.visual[i], self.semantic[i], int(self.labels[i]), self.splits[i])

    def class_semantics(self) -> Dict[int, np.ndarray]:
        """One semantic vector per class present, keyed in ascending id order."""
        out: Dict[int, np.ndarray] = {}
        for c in sorted(set(self.labels.tolist())):
            out[int(c)] = self.semantic[int(np.argmax(self.labels == c))]
        return out

    def split_indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def with_splits(self, splits: Sequence[str]) -> "GzslDataset":
        return GzslDataset(self.visual, self.semantic, self.labels, tuple(splits),
                           self.seen_classes, self.unseen_classes)

    def subset(self, indices: Sequence[int]) -> "GzslDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return GzslDataset(self.visual[idx], self.semantic[idx], self.labels[idx],
                           tuple(self.splits[i] for i in idx), self.seen_classes, self.unseen_classes)

    def validate(self) -> "GzslDataset":
        """
        Enforce partition, split and class-semantics invariants.

        Returns:
            self, so validation chains
        """
        overlap = self.seen_classes & self.unseen_classes
        if overlap:
            raise ContractViolation(f"classes both seen and unseen: {sorted(overlap)}")
        known = self.seen_classes | self.unseen_classes
        for i, label in enumerate(self.labels.tolist()):
            if label not in known:
                raise ContractViolation(f"record {i}: class {label} is neither seen nor unseen")
            if self.splits[i] not in SPLITS:
                raise ContractViolation(f"record {i}: unknown split tag {self.splits[i]!r}")
            if self.splits[i] == SPLIT_TRAIN and label in self.unseen_classes:
                raise ContractViolation(f"record {i}: unseen class {label} tagged train")
        reference: Dict[int, int] = {}
        for i, label in enumerate(self.labels.tolist()):
            first = reference.setdefault(label, i)
            if first != i and not np.array_equal(self.semantic[first], self.semantic[i]):
                raise SemanticMismatchError(f"class {label}: semantic vector differs from record {first}",
                                            class_id=label)
        return self

    def fingerprint(self) -> str:
        """SHA-256 of the exact binary encoding."""
        return hashlib.sha256(encode_bin(self)).hexdigest()


# ----------------------------------------------------------------------------
# Synthetic generation
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = config.DESK_CLASSES
    n_unseen: int = config.DESK_UNSEEN
    samples_per_class: int = config.DESK_PER_CLASS
    d_visual: int = config.DESK_D_VISUAL
    k_semantic: int = config.DESK_K_SEMANTIC
    bias_shift: float = 2.0
    cluster_scale: float = 1.0
    anisotropy: float = 4.0
    seed: int = config.DEFAULT_SEED

    def __post_init__(self):
        if self.n_classes < 2:
            raise ContractViolation(f"n_classes must be >= 2, got {self.n_classes}")
        if not 0 <= self.n_unseen < self.n_classes:
            raise ContractViolation(f"n_unseen must satisfy 0 <= n_unseen < n_classes, got {self.n_unseen}")
        if self.samples_per_class < 1:
            raise ContractViolation(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if self.d_visual < 1 or self.k_semantic < 1:
            raise ContractViolation("feature dimensions must be >= 1")
        if not np.isfinite(self.bias_shift) or self.bias_shift < 0:
            raise ContractViolation(f"bias_shift must be >= 0, got {self.bias_shift}")
        if not np.isfinite(self.cluster_scale) or self.cluster_scale <= 0:
            raise ContractViolation(f"cluster_scale must be > 0, got {self.cluster_scale}")
        if not np.isfinite(self.anisotropy) or self.anisotropy < 1:
            raise ContractViolation(f"anisotropy must be >= 1, got {self.anisotropy}")
        if self.seed < 0:
            raise ContractViolation(f"seed must be >= 0, got {self.seed}")


@dataclass(frozen=True, eq=False)
class _SynthLayout:
    semantics: np.ndarray
    means: np.ndarray
    unseen: Tuple[int, ...]
    rotation: np.ndarray
    scales: np.ndarray


def _synth_layout(cfg: SynthConfig, rng: np.random.Generator) -> _SynthLayout:
    d, k, c = cfg.d_visual, cfg.k_semantic, cfg.n_classes
    semantics = rng.standard_normal((c, k))
    projection = rng.standard_normal((k, d)) / np.sqrt(k)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    unseen = tuple(sorted(int(u) for u in rng.choice(c, size=cfg.n_unseen, replace=False)))
    rotation, _ = np.linalg.qr(rng.standard_normal((d, d)))
    scales = cfg.cluster_scale * cfg.anisotropy ** np.linspace(0.0, 1.0, d)
    means = semantics @ projection
    if unseen:
        means[list(unseen)] += cfg.bias_shift * direction
    return _SynthLayout(semantics, means, unseen, rotation, scales)


def synth_class_means(cfg: SynthConfig) -> np.ndarray:
    """Population class means (n_classes x d_visual) of the dataset synth_gzsl draws."""
    return _synth_layout(cfg, seeded_rng(cfg.seed, "synth")).means


def synth_gzsl(cfg: SynthConfig) -> GzslDataset:
    """
    Draw a projection-biased GZSL dataset.

    Each class gets one standard-normal semantic vector; its visual cluster is an
    anisotropic Gaussian centred on a fixed linear image of that vector. Unseen
    class centres are shifted by ``bias_shift`` along one seeded unit direction.
    Records come out class-major and untagged.

    Args:
        cfg: Generation settings

    Returns:
        GzslDataset with every record's split tag empty
    """
    rng = seeded_rng(cfg.seed, "synth")
    layout = _synth_layout(cfg, rng)
    n = cfg.samples_per_class
    visual: List[np.ndarray] = []
    for c in range(cfg.n_classes):
        noise = (rng.standard_normal((n, cfg.d_visual)) * layout.scales) @ layout.rotation.T
        visual.append(layout.means[c] + noise)
    labels = np.repeat(np.arange(cfg.n_classes, dtype=np.int64), n)
    semantic = layout.semantics[labels]
    unseen = frozenset(layout.unseen)
    seen = frozenset(range(cfg.n_classes)) - unseen
    logger.info(f"[DATA] synthesised {len(labels)} records, {len(seen)} seen / {len(unseen)} unseen classes "
                f"(bias_shift={cfg.bias_shift}, anisotropy={cfg.anisotropy}, seed={cfg.seed})")
    return GzslDataset(np.vstack(visual), semantic, labels, (SPLIT_NONE,) * len(labels), seen, unseen).validate()


def make_splits(dataset: GzslDataset, test_fraction_seen: float = config.DEFAULT_TEST_FRACTION,
                seed: int = config.DEFAULT_SEED) -> GzslDataset:
    """
    Tag unseen-class records test and split each seen class by the given fraction.

    Args:
        dataset: Dataset to tag; existing tags are replaced
        test_fraction_seen: Share of each seen class held out, in (0, 1)
        seed: Split seed

    Returns:
        Tagged dataset
    """
    if not 0.0 < test_fraction_seen < 1.0:
        raise ContractViolation(f"test_fraction_seen must be in (0, 1), got {test_fraction_seen}")
    rng = seeded_rng(seed, "splits")
    splits = [SPLIT_TEST] * dataset.n_records
    for c in sorted(dataset.seen_classes):
        members = np.flatnonzero(dataset.labels == c)
        if len(members) < 2:
            raise ContractViolation(f"seen class {c} has {len(members)} record(s); at least 2 are needed to split")
        order = rng.permutation(members)
        n_test = min(max(int(round(test_fraction_seen * len(members))), 1), len(members) - 1)
        for i in order[n_test:]:
            splits[int(i)] = SPLIT_TRAIN
    if not dataset.seen_classes:
        logger.warning("[DATA] dataset has no seen classes: every record is tagged test and the train split is empty")
    return dataset.with_splits(splits).validate()


# ----------------------------------------------------------------------------
# File formats
# ----------------------------------------------------------------------------

def _infer_format(path: Path, fmt: Optional[str]) -> str:
    if fmt:
        fmt = fmt.lower()
        if fmt not in (FORMAT_CSV, FORMAT_BIN):
            raise ContractViolation(f"unknown feature format {fmt!r}")
        return fmt
    return FORMAT_BIN if path.suffix.lower() == ".bin" else FORMAT_CSV


def encode_bin(dataset: GzslDataset) -> bytes:
    seen = sorted(dataset.seen_classes)
    unseen = sorted(dataset.unseen_classes)
    header = _BIN_HEADER.pack(BIN_MAGIC, BIN_VERSION, dataset.d_visual, dataset.k_semantic,
                              dataset.n_records, len(seen), len(unseen))
    splits = np.array([_SPLIT_CODES[s] for s in dataset.splits], dtype="<u1")
    return b"".join([
        header,
        np.asarray(seen, dtype="<i8").tobytes(),
        np.asarray(unseen, dtype="<i8").tobytes(),
        dataset.labels.astype("<i8").tobytes(),
        splits.tobytes(),
        dataset.visual.astype("<f8").tobytes(),
        dataset.semantic.astype("<f8").tobytes(),
    ])


def decode_bin(payload: bytes) -> GzslDataset:
    if len(payload) < 4 or payload[:4] != BIN_MAGIC:
        raise BadMagicError(f"expected magic {BIN_MAGIC!r}, got {payload[:4]!r}")
    if len(payload) < _BIN_HEADER.size:
        raise TruncatedFileError("feature file shorter than its header")
    _, version, d, k, n, n_seen, n_unseen = _BIN_HEADER.unpack_from(payload, 0)
    if version != BIN_VERSION:
        raise VersionMismatchError(f"feature file version {version}, expected {BIN_VERSION}")
    sizes = [("seen", n_seen * 8), ("unseen", n_unseen * 8), ("labels", n * 8),
             ("splits", n), ("visual", n * d * 8), ("semantic", n * k * 8)]
    expected = _BIN_HEADER.size + sum(size for _, size in sizes)
    if len(payload) < expected:
        raise TruncatedFileError(f"feature file has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise DataFormatError(f"feature file has {len(payload) - expected} trailing bytes")
    blocks: Dict[str, bytes] = {}
    offset = _BIN_HEADER.size
    for name, size in sizes:
        blocks[name] = payload[offset:offset + size]
        offset += size
    codes = np.frombuffer(blocks["splits"], dtype="<u1")
    if np.any(codes > 2):
        raise DataFormatError("unknown split code in feature file")
    return GzslDataset(
        np.frombuffer(blocks["visual"], dtype="<f8").reshape(n, d),
        np.frombuffer(blocks["semantic"], dtype="<f8").reshape(n, k),
        np.frombuffer(blocks["labels"], dtype="<i8"),
        tuple(_SPLIT_NAMES[int(c)] for c in codes),
        np.frombuffer(blocks["seen"], dtype="<i8").tolist(),
        np.frombuffer(blocks["unseen"], dtype="<i8").tolist(),
    )


def _parse_header(header: List[str]) -> Tuple[bool, int, int]:
    if not header or header[0] != "label":
        raise DataFormatError("header must start with 'label'", row=1)
    has_split = len(header) > 1 and header[1] == "split"
    columns = header[2:] if has_split else header[1:]
    d = 0
    while d < len(columns) and columns[d] == f"v{d}":
        d += 1
    rest = columns[d:]
    if rest != [f"s{j}" for j in range(len(rest))]:
        raise DataFormatError("header columns must be v0..v{d-1} followed by s0..s{k-1}", row=1)
    if d == 0 or not rest:
        raise DataFormatError("header declares no visual or no semantic columns", row=1)
    return has_split, d, len(rest)


def _open_utf8(path: PathLike, what: str) -> io.StringIO:
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"{what} {path} is not valid UTF-8 (byte {exc.start})") from exc
    return io.StringIO(text, newline="")


def split_sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(SPLIT_SIDECAR_SUFFIX)


def _read_split_manifest(path: PathLike) -> Dict[int, str]:
    sides: Dict[int, str] = {}
    with _open_utf8(path, "split manifest") as f:
        for rowno, row in enumerate(csv.reader(f), start=1):
            if not row or (rowno == 1 and row[0].strip() == "class_id"):
                continue
            if len(row) != 2 or row[1].strip() not in ("seen", "unseen"):
                raise DataFormatError(f"split manifest expects 'class_id,seen|unseen', got {row}", row=rowno)
            try:
                class_id = int(row[0])
            except ValueError as exc:
                raise DataFormatError(f"split manifest class id {row[0]!r} is not an integer", row=rowno) from exc
            sides[class_id] = row[1].strip()
    return sides


def _read_csv(path: Path) -> GzslDataset:
    visual: List[List[float]] = []
    semantic: List[List[float]] = []
    labels: List[int] = []
    splits: List[str] = []
    first_semantic: Dict[int, Tuple[List[float], int]] = {}
    with _open_utf8(path, "feature file") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty feature file", row=1) from None
        has_split, d, k = _parse_header(header)
        width = len(header)
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DimensionInconsistencyError(f"expected {width} fields, got {len(row)}", row=rowno)
            try:
                label = int(row[0])
                values = [float(v) for v in row[(2 if has_split else 1):]]
            except ValueError as exc:
                raise DataFormatError(f"unparseable value: {exc}", row=rowno) from exc
            split = row[1].strip() if has_split else SPLIT_NONE
            if split not in SPLITS:
                raise DataFormatError(f"unknown split tag {split!r}", row=rowno)
            if not np.all(np.isfinite(values)):
                raise DataFormatError("non-finite feature value", row=rowno)
            sem = values[d:]
            if label in first_semantic and first_semantic[label][0] != sem:
                raise SemanticMismatchError(
                    f"class {label}: semantic vector differs from row {first_semantic[label][1]}",
                    class_id=label, row=rowno)
            first_semantic.setdefault(label, (sem, rowno))
            visual.append(values[:d])
            semantic.append(sem)
            labels.append(label)
            splits.append(split)
    if not labels:
        raise DataFormatError("feature file has a header but no records", row=2)
    train_classes = {label for label, split in zip(labels, splits) if split == SPLIT_TRAIN}
    tagged = any(splits)
    seen = train_classes if tagged else set(labels)
    unseen = set(labels) - seen
    return GzslDataset(np.array(visual).reshape(-1, d), np.array(semantic).reshape(-1, k),
                       np.array(labels), tuple(splits), seen, unseen)


def _apply_manifest(dataset: GzslDataset, manifest_path: PathLike) -> GzslDataset:
    sides = _read_split_manifest(manifest_path)
    present = set(dataset.labels.tolist())
    unknown = set(sides) - present
    if unknown:
        raise UnknownClassError(f"split manifest names classes absent from the data: {sorted(unknown)}")
    missing = present - set(sides)
    if missing:
        raise UnknownClassError(f"classes missing from the split manifest: {sorted(missing)}")
    seen = {c for c, side in sides.items() if side == "seen"}
    return GzslDataset(dataset.visual, dataset.semantic, dataset.labels, dataset.splits,
                       seen, set(sides) - seen)


def load_features(path: PathLike, fmt: Optional[str] = None,
                  manifest_path: Optional[PathLike] = None) -> GzslDataset:
    """
    Load a feature file (CSV or BIN), optionally overriding seen/unseen from a manifest.

    Args:
        path: Feature file
        fmt: "csv" or "bin"; inferred from the suffix when omitted
        manifest_path: Optional ``class_id,seen|unseen`` CSV; for CSV input the
            sidecar written by write_features is used when none is given

    Returns:
        Validated GzslDataset

    Raises:
        DataFormatError: for any parse or invariant failure, with the row when known
    """
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == FORMAT_BIN:
        dataset = decode_bin(path.read_bytes())
    else:
        dataset = _read_csv(path)
        sidecar = split_sidecar_path(path)
        if manifest_path is None and sidecar.is_file():
            logger.debug(f"[DATA] using split sidecar {sidecar}")
            manifest_path = sidecar
    if manifest_path is not None:
        dataset = _apply_manifest(dataset, manifest_path)
    try:
        dataset.validate()
    except ContractViolation as exc:
        raise DataFormatError(str(exc)) from exc
    logger.info(f"[DATA] loaded {dataset.n_records} records from {path} ({fmt}, d={dataset.d_visual}, "
                f"k={dataset.k_semantic})")
    return dataset


def write_features(dataset: GzslDataset, path: PathLike, fmt: Optional[str] = None) -> Path:
    """Write a dataset as CSV (repr floats, exact, plus a split sidecar) or BIN."""
    path = Path(path)
    fmt = _infer_format(path, fmt)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == FORMAT_BIN:
        path.write_bytes(encode_bin(dataset))
    else:
        header = (["label", "split"] + [f"v{i}" for i in range(dataset.d_visual)]
                  + [f"s{j}" for j in range(dataset.k_semantic)])
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for rec in dataset.records():
                writer.writerow([rec.label, rec.split] + [repr(float(v)) for v in rec.visual]
                                + [repr(float(v)) for v in rec.semantic])
        write_split_manifest(dataset, split_sidecar_path(path))
    logger.debug(f"[DATA] wrote {dataset.n_records} records to {path}")
    return path


def write_split_manifest(dataset: GzslDataset, path: PathLike) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["class_id", "side"])
        for c in sorted(dataset.seen_classes | dataset.unseen_classes):
            writer.writerow([c, "seen" if c in dataset.seen_classes else "unseen"])
    return path

