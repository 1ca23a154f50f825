"""
Feature vocabulary construction, dataset splitting and frequency-aware grouping.

Click logs arrive as tab-separated rows: the binary label first, then one
categorical token per field. Tokens seen only once in the whole log are
folded into their field's OOV feature. Feature ids are dense and assigned in
descending order of training-split frequency.
"""
from __future__ import annotations

import hashlib
import io
import logging
import struct
from pathlib import Path
from typing import Iterable

import numpy as np
from pydantic import BaseModel, ConfigDict

from mpe.errors import FormatError, IngestError

logger = logging.getLogger(__name__)

OOV_TOKEN = "<OOV>"
SPLITS = ("train", "valid", "test")

CATALOG_MAGIC = b"MPECAT1"
CATALOG_VERSION = 1


class FeatureCatalog(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    field_names: list[str]
    field_of: np.ndarray
    tokens: list[str]
    frequencies: np.ndarray
    d: int

    @property
    def n(self) -> int:
        return len(self.tokens)

    @property
    def num_fields(self) -> int:
        return len(self.field_names)

    @property
    def features(self) -> dict[tuple[str, str], int]:
        """Map (field name, token) to feature id."""
        return {
            (self.field_names[field], token): feature_id
            for feature_id, (field, token) in enumerate(zip(self.field_of.tolist(), self.tokens))
        }

    def oov_id(self, field: int) -> int:
        for feature_id in np.flatnonzero(self.field_of == field):
            if self.tokens[feature_id] == OOV_TOKEN:
                return int(feature_id)
        raise KeyError(f"field {field} has no OOV feature")

    def to_bytes(self) -> bytes:
        buffer = io.BytesIO()
        buffer.write(CATALOG_MAGIC)
        buffer.write(struct.pack("<BIII", CATALOG_VERSION, self.num_fields, self.n, self.d))
        for name in self.field_names:
            _write_str(buffer, name)
        for field, frequency, token in zip(self.field_of.tolist(), self.frequencies.tolist(), self.tokens):
            buffer.write(struct.pack("<HQ", field, frequency))
            _write_str(buffer, token)
        return buffer.getvalue()

    @staticmethod
    def from_bytes(data: bytes) -> FeatureCatalog:
        if data[: len(CATALOG_MAGIC)] != CATALOG_MAGIC:
            raise FormatError("bad catalog magic")
        buffer = io.BytesIO(data[len(CATALOG_MAGIC):])
        version, num_fields, n, d = _read(buffer, "<BIII")
        if version != CATALOG_VERSION:
            raise FormatError(f"unsupported catalog version {version}")
        field_names = [_read_str(buffer) for _ in range(num_fields)]
        field_of = np.empty(n, dtype=np.int64)
        frequencies = np.empty(n, dtype=np.int64)
        tokens = []
        for feature_id in range(n):
            field_of[feature_id], frequencies[feature_id] = _read(buffer, "<HQ")
            tokens.append(_read_str(buffer))
        if buffer.read(1):
            raise FormatError("trailing bytes after catalog")
        return FeatureCatalog(field_names=field_names, field_of=field_of, tokens=tokens, frequencies=frequencies, d=d)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @staticmethod
    def load(path: str | Path) -> FeatureCatalog:
        return FeatureCatalog.from_bytes(Path(path).read_bytes())


class GroupAssignment(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    group_of: np.ndarray
    g: int
    group_size: int
    freq_sums: np.ndarray
    order: np.ndarray

    @property
    def regularizer_sums(self) -> np.ndarray:
        """Group frequency sums floored at 1 so unseen groups never divide by zero."""
        return np.maximum(self.freq_sums, 1).astype(np.float64)

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group_of, minlength=self.g)

    def members(self, k: int) -> np.ndarray:
        """Feature ids of group k, most frequent first."""
        return self.order[k * self.group_size : (k + 1) * self.group_size]


class Dataset(BaseModel):
    """Samples as an (N, F) id matrix with binary labels and split tags."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    ids: np.ndarray
    labels: np.ndarray
    split_of: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]

    def split(self, name: str) -> Dataset:
        mask = self.split_of == SPLITS.index(name)
        return Dataset(ids=self.ids[mask], labels=self.labels[mask], split_of=self.split_of[mask])


def group_frequencies(frequencies: np.ndarray, group_size: int) -> GroupAssignment:
    """Sort features by descending frequency (ties by id) and cut into groups."""
    frequencies = np.asarray(frequencies, dtype=np.int64)
    n = frequencies.shape[0]
    if n == 0:
        raise ValueError("cannot group an empty catalog")
    if group_size < 1:
        raise ValueError(f"group size must be positive, got {group_size}")

    order = np.argsort(-frequencies, kind="stable")
    g = -(-n // group_size)
    group_of = np.empty(n, dtype=np.int64)
    group_of[order] = np.arange(n) // group_size
    freq_sums = np.bincount(group_of, weights=frequencies, minlength=g).astype(np.int64)
    return GroupAssignment(group_of=group_of, g=g, group_size=group_size, freq_sums=freq_sums, order=order)


def group_by_frequency(catalog: FeatureCatalog, group_size: int) -> GroupAssignment:
    return group_frequencies(catalog.frequencies, group_size)


def ingest(
    raw_rows: Iterable[str], schema: list[str] | None = None, seed: int = 0, d: int = 16
) -> tuple[FeatureCatalog, Dataset]:
    """Build the vocabulary and an 8:1:1 split from a stream of TSV rows.

    When `schema` is omitted the field names are `field_<j>`, with the field
    count taken from the first row.
    """
    labels: list[int] = []
    columns: list[list[str]] = []
    for line_number, line in enumerate(raw_rows, start=1):
        parts = line.rstrip("\r\n").split("\t")
        if schema is None:
            schema = [f"field_{j}" for j in range(len(parts) - 1)]
        if len(parts) != len(schema) + 1 or not schema:
            raise IngestError(f"expected {len(schema) + 1} columns, got {len(parts)}", line_number)
        if parts[0] not in ("0", "1"):
            raise IngestError(f"label must be 0 or 1, got {parts[0]!r}", line_number)
        if not columns:
            columns = [[] for _ in schema]
        labels.append(int(parts[0]))
        for column, token in zip(columns, parts[1:]):
            column.append(token)

    if not labels:
        raise IngestError("empty input")
    assert schema is not None
    num_samples = len(labels)

    rng = np.random.default_rng(seed)
    permutation = rng.permutation(num_samples)
    num_train = num_samples * 8 // 10
    num_valid = num_samples // 10
    split_of = np.full(num_samples, 2, dtype=np.int8)
    split_of[permutation[:num_train]] = 0
    split_of[permutation[num_train : num_train + num_valid]] = 1
    train_mask = split_of == 0

    # Per field: local index 0 is the OOV feature, then kept tokens in sorted order.
    local_ids, local_tokens, local_freqs, local_fields = [], [], [], []
    for field, column in enumerate(columns):
        uniques, inverse, counts = np.unique(np.array(column, dtype=object), return_inverse=True, return_counts=True)
        keep = (counts >= 2) & (uniques != OOV_TOKEN)
        local_of_unique = np.where(keep, np.cumsum(keep), 0)
        local = local_of_unique[inverse]
        kept_tokens = [OOV_TOKEN] + uniques[keep].tolist()
        local_ids.append(local)
        local_tokens.append(kept_tokens)
        local_freqs.append(np.bincount(local[train_mask], minlength=len(kept_tokens)))
        local_fields.append(np.full(len(kept_tokens), field))
        logger.debug("field %s: %d tokens, %d folded into OOV", schema[field], len(uniques), int((~keep).sum()))

    all_freqs = np.concatenate(local_freqs).astype(np.int64)
    all_fields = np.concatenate(local_fields)
    all_locals = np.concatenate([np.arange(len(tokens)) for tokens in local_tokens])
    all_tokens = [token for tokens in local_tokens for token in tokens]

    order = np.lexsort((all_locals, all_fields, -all_freqs))
    global_of = np.empty_like(order)
    global_of[order] = np.arange(order.shape[0])

    starts = np.cumsum([0] + [len(tokens) for tokens in local_tokens])
    ids = np.column_stack([global_of[starts[field] + local] for field, local in enumerate(local_ids)]).astype(np.int32)

    catalog = FeatureCatalog(
        field_names=list(schema),
        field_of=all_fields[order].astype(np.int64),
        tokens=[all_tokens[i] for i in order],
        frequencies=all_freqs[order],
        d=d,
    )
    dataset = Dataset(ids=ids, labels=np.array(labels, dtype=np.float64), split_of=split_of)
    logger.info(
        "ingested %d samples, %d features over %d fields (train/valid/test = %d/%d/%d)",
        num_samples, catalog.n, catalog.num_fields, num_train, num_valid, num_samples - num_train - num_valid,
    )
    return catalog, dataset


def save_splits(dataset: Dataset, directory: str | Path) -> None:
    directory = Path(directory)
    for name in SPLITS:
        part = dataset.split(name)
        np.save(directory / f"{name}.npy", np.column_stack([part.labels.astype(np.int64), part.ids.astype(np.int64)]))


def load_splits(directory: str | Path) -> Dataset:
    directory = Path(directory)
    ids, labels, split_of = [], [], []
    for index, name in enumerate(SPLITS):
        path = directory / f"{name}.npy"
        if not path.exists():
            raise FileNotFoundError(f"missing split file {path}")
        table = np.load(path)
        labels.append(table[:, 0].astype(np.float64))
        ids.append(table[:, 1:].astype(np.int32))
        split_of.append(np.full(table.shape[0], index, dtype=np.int8))
    return Dataset(ids=np.concatenate(ids), labels=np.concatenate(labels), split_of=np.concatenate(split_of))


def _write_str(buffer: io.BytesIO, value: str) -> None:
    encoded = value.encode("utf-8")
    buffer.write(struct.pack("<H", len(encoded)))
    buffer.write(encoded)


def _read(buffer: io.BytesIO, fmt: str) -> tuple:
    size = struct.calcsize(fmt)
    chunk = buffer.read(size)
    if len(chunk) != size:
        raise FormatError("truncated catalog")
    return struct.unpack(fmt, chunk)


def _read_str(buffer: io.BytesIO) -> str:
    (length,) = _read(buffer, "<H")
    chunk = buffer.read(length)
    if len(chunk) != length:
        raise FormatError("truncated catalog")
    return chunk.decode("utf-8")
