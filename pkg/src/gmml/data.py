"""Synthetic multi-modal Gaussian datasets and feature-file persistence.

Classes are split disjointly into train/val/test at the class level. The
binary GMDS format round-trips losslessly and is guarded by a trailing
CRC-32; a plain CSV variant exists for hand-authored fixtures and for
ingesting externally extracted features.
"""

import csv
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .rng import stream

__all__ = [
    "SPLITS",
    "Dataset",
    "SyntheticSpec",
    "PRESETS",
    "generate_synthetic",
    "split_classes",
    "save_dataset",
    "load_dataset",
    "DatasetFormatError",
]

SPLITS = ("train", "val", "test")


class DatasetFormatError(Exception):
    """Raised on malformed dataset files; .code distinguishes failure modes."""

    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


@dataclass
class Dataset:
    features: np.ndarray  # (m, D)
    labels: np.ndarray  # (m,)
    class_splits: dict  # class id -> split name

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features))
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("feature rows and labels disagree")
        present = set(int(c) for c in np.unique(self.labels))
        mapped = set(self.class_splits)
        if present - mapped:
            raise ValueError(f"labels reference classes without a split: {sorted(present - mapped)}")
        for split in self.class_splits.values():
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r}")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def classes(self, split: str):
        return sorted(c for c, s in self.class_splits.items() if s == split)

    def split_arrays(self, split: str):
        members = np.isin(self.labels, self.classes(split))
        return self.features[members], self.labels[members]


@dataclass
class SyntheticSpec:
    classes: int = 100
    modes_per_class: int = 3
    dim: int = 16
    mode_separation: float = 4.0
    class_separation: float = 8.0
    noise_sigma: float = 1.0
    samples_per_class: int = 120
    seed: int = 0
    split_fractions: tuple = (0.64, 0.16, 0.20)

    def __post_init__(self):
        if self.classes < 1 or self.modes_per_class < 1 or self.samples_per_class < 1:
            raise ValueError("counts must be at least 1")
        if self.dim < 1:
            raise ValueError("dim must be at least 1")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")


# Fixed desk-scale benchmark: tri-modal classes that a linear map cannot
# trivially saturate. Constants are part of the acceptance contract.
PRESETS = {
    "tri-modal-100": SyntheticSpec(
        classes=100,
        modes_per_class=3,
        dim=16,
        mode_separation=4.0,
        class_separation=8.0,
        noise_sigma=1.0,
        samples_per_class=120,
    ),
    "noise-50": SyntheticSpec(
        classes=50,
        modes_per_class=1,
        dim=16,
        mode_separation=0.0,
        class_separation=1e-12,
        noise_sigma=1.0,
        samples_per_class=60,
    ),
}


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Sample per-class Gaussian modes and round-robin points onto them."""
    rng = stream(spec.seed, "synthetic")
    feats = np.empty((spec.classes * spec.samples_per_class, spec.dim), dtype=np.float64)
    labels = np.empty(spec.classes * spec.samples_per_class, dtype=np.int64)
    row = 0
    for c in range(spec.classes):
        center = spec.class_separation * rng.standard_normal(spec.dim)
        modes = center + spec.mode_separation * rng.standard_normal(
            (spec.modes_per_class, spec.dim)
        )
        for s in range(spec.samples_per_class):
            feats[row] = modes[s % spec.modes_per_class] + spec.noise_sigma * rng.standard_normal(
                spec.dim
            )
            labels[row] = c
            row += 1
    splits = split_classes(list(range(spec.classes)), spec.split_fractions, spec.seed)
    return Dataset(feats, labels, splits)


def split_classes(class_ids, fractions, seed: int) -> dict:
    """Disjoint class-level split by largest-remainder apportionment."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != len(SPLITS):
        raise ValueError(f"expected {len(SPLITS)} fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    class_ids = sorted(int(c) for c in class_ids)
    n = len(class_ids)
    exact = [f * n for f in fractions]
    counts = [int(np.floor(e)) for e in exact]
    remainders = sorted(range(len(SPLITS)), key=lambda i: exact[i] - counts[i], reverse=True)
    for i in range(n - sum(counts)):
        counts[remainders[i % len(SPLITS)]] += 1
    for frac, cnt in zip(fractions, counts):
        if frac > 0 and cnt == 0:
            raise ValueError("too few classes for the requested fractions")
    order = stream(seed, "split").permutation(n)
    assignment = {}
    pos = 0
    for split, cnt in zip(SPLITS, counts):
        for i in order[pos : pos + cnt]:
            assignment[class_ids[i]] = split
        pos += cnt
    return assignment


# --- GMDS binary format ------------------------------------------------------

_MAGIC = b"GMDS"
_VERSION = 1
_SPLIT_CODES = {s: i for i, s in enumerate(SPLITS)}
_PRECISION = {0: "<f8", 1: "<f4"}


def save_dataset(dataset: Dataset, path) -> None:
    """Write GMDS binary (or CSV when the path ends in .csv)."""
    if str(path).endswith(".csv"):
        _save_csv(dataset, path)
        return
    precision = 1 if dataset.features.dtype == np.float32 else 0
    dt = _PRECISION[precision]
    payload = np.ascontiguousarray(dataset.features, dtype=dt).tobytes()
    class_ids = sorted(dataset.class_splits)
    parts = [
        _MAGIC,
        struct.pack(
            "<IBIQIQ",
            _VERSION,
            precision,
            dataset.dim,
            dataset.features.shape[0],
            len(class_ids),
            len(payload),
        ),
    ]
    for c in class_ids:
        parts.append(struct.pack("<IB", c, _SPLIT_CODES[dataset.class_splits[c]]))
    parts.append(payload)
    parts.append(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        head = fh.read(4)
        rest = fh.read()
    if head == _MAGIC:
        return _load_binary(head + rest)
    try:
        text = (head + rest).decode("utf-8")
    except UnicodeDecodeError:
        raise DatasetFormatError("bad magic", "bad-magic") from None
    if text.lstrip().startswith("dim"):
        return _load_csv_text(text)
    raise DatasetFormatError("bad magic", "bad-magic")


def _load_binary(raw: bytes) -> Dataset:
    header_fmt = "<IBIQIQ"
    header_size = 4 + struct.calcsize(header_fmt)
    if len(raw) < header_size + 4:
        raise DatasetFormatError("truncated payload", "truncated")
    body, crc_bytes = raw[:-4], raw[-4:]
    if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(body):
        raise DatasetFormatError("checksum mismatch", "crc-mismatch")
    version, precision, dim, m, n_classes, payload_len = struct.unpack_from(header_fmt, body, 4)
    if version != _VERSION:
        raise DatasetFormatError(f"unsupported version {version}", "bad-version")
    if precision not in _PRECISION:
        raise DatasetFormatError(f"unknown precision tag {precision}", "bad-precision")
    dt = np.dtype(_PRECISION[precision])
    off = header_size
    splits = {}
    table_size = 5 * n_classes
    if len(body) < off + table_size:
        raise DatasetFormatError("truncated payload", "truncated")
    for _ in range(n_classes):
        cid, code = struct.unpack_from("<IB", body, off)
        off += 5
        splits[int(cid)] = SPLITS[code]
    if payload_len != m * dim * dt.itemsize:
        raise DatasetFormatError(
            f"dimension mismatch: header declares {dim}x{m} but payload holds "
            f"{payload_len // (m * dt.itemsize) if m else 0} columns per row",
            "dimension-mismatch",
        )
    if len(body) < off + payload_len + 4 * m:
        raise DatasetFormatError("truncated payload", "truncated")
    feats = (
        np.frombuffer(body, dtype=dt, count=m * dim, offset=off)
        .reshape(m, dim)
        .astype(dt.newbyteorder("="))
    )
    off += payload_len
    labels = np.frombuffer(body, dtype="<u4", count=m, offset=off).astype(np.int64)
    return Dataset(feats, labels, splits)


def _save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dim", dataset.dim])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow(
                [repr(float(v)) for v in x] + [int(y), dataset.class_splits[int(y)]]
            )


def _load_csv_text(text: str) -> Dataset:
    rows = list(csv.reader(text.splitlines()))
    if not rows or rows[0][0].strip() != "dim":
        raise DatasetFormatError("missing dim header", "bad-magic")
    dim = int(rows[0][1])
    feats, labels, splits = [], [], {}
    for row in rows[1:]:
        if not row:
            continue
        if len(row) != dim + 2:
            raise DatasetFormatError(
                f"dimension mismatch: expected {dim} features per row, got {len(row) - 2}",
                "dimension-mismatch",
            )
        feats.append([float(v) for v in row[:dim]])
        label = int(row[dim])
        split = row[dim + 1].strip()
        if split not in SPLITS:
            raise DatasetFormatError(f"unknown split {split!r}", "bad-split")
        labels.append(label)
        prev = splits.setdefault(label, split)
        if prev != split:
            raise DatasetFormatError(f"class {label} assigned to two splits", "bad-split")
    return Dataset(np.array(feats, dtype=np.float64), np.array(labels), splits)
