"""
Bit-packed mixed-precision embedding store.

Each feature's integer codes are written as b-bit two's complement values,
concatenated least-significant-bit first, and zero-padded to a whole number
of 16-bit words. A feature at bit width b therefore occupies
ceil(d * b / 16) words and features at b = 0 occupy none. Features are laid
out group by group in descending-frequency order. The directory stores one
(bit width, first rank, count, payload offset) record per group, so a feature's
word offset is computed arithmetically.

File layout (all little-endian):

    magic "MPEPACK1" | version u32 | n u32 | d u32 | m u8 | m x bit u8
    catalog sha256 (32 bytes) | g u32 | g x (bit u8, first u32, count u32, offset u64)
    k u8 | k x (bit u8, step f64) | d x offset f64
    has_slots u8 | [n x slot u32] | words u64 | words x u16
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict

from mpe.catalog import GroupAssignment
from mpe.errors import CatalogMismatchError, DimensionMismatchError, FormatError
from mpe.metrics import Metrics
from mpe.quant import QuantizerParams, bounds, quantize_array
from mpe.search import CandidateSet, SampledPrecision

PACK_MAGIC = b"MPEPACK1"
PACK_VERSION = 1
WORD_BITS = 16


class GroupRecord(BaseModel):
    bit_width: int
    first_rank: int
    count: int
    payload_offset: int


class PackedTable(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    n: int
    d: int
    candidate_bits: tuple[int, ...]
    directory: list[GroupRecord]
    step_sizes: dict[int, float]
    offsets: np.ndarray
    payload: np.ndarray
    catalog_hash: str
    # Rank of each feature in frequency order, present only when groups are not contiguous id ranges.
    slots: np.ndarray | None = None

    def to_bytes(self) -> bytes:
        buffer = io.BytesIO()
        buffer.write(PACK_MAGIC)
        buffer.write(struct.pack("<IIIB", PACK_VERSION, self.n, self.d, len(self.candidate_bits)))
        buffer.write(bytes(self.candidate_bits))
        buffer.write(_hash_bytes(self.catalog_hash))
        buffer.write(struct.pack("<I", len(self.directory)))
        for record in self.directory:
            buffer.write(struct.pack("<BIIQ", record.bit_width, record.first_rank, record.count, record.payload_offset))
        buffer.write(struct.pack("<B", len(self.step_sizes)))
        for bit in sorted(self.step_sizes):
            buffer.write(struct.pack("<Bd", bit, self.step_sizes[bit]))
        buffer.write(self.offsets.astype("<f8").tobytes())
        buffer.write(struct.pack("<B", self.slots is not None))
        if self.slots is not None:
            buffer.write(self.slots.astype("<u4").tobytes())
        buffer.write(struct.pack("<Q", self.payload.shape[0]))
        buffer.write(self.payload.astype("<u2").tobytes())
        return buffer.getvalue()

    @staticmethod
    def from_bytes(data: bytes) -> PackedTable:
        if data[: len(PACK_MAGIC)] != PACK_MAGIC:
            raise FormatError("bad packed-table magic")
        buffer = io.BytesIO(data[len(PACK_MAGIC):])
        version, n, d, m = _read(buffer, "<IIIB")
        if version != PACK_VERSION:
            raise FormatError(f"unsupported packed-table version {version}")
        candidate_bits = tuple(_read_bytes(buffer, m))
        raw_hash = _read_bytes(buffer, 32)
        catalog_hash = raw_hash.hex() if any(raw_hash) else ""
        (g,) = _read(buffer, "<I")
        directory = [
            GroupRecord(bit_width=bit, first_rank=first, count=count, payload_offset=offset)
            for bit, first, count, offset in (_read(buffer, "<BIIQ") for _ in range(g))
        ]
        (k,) = _read(buffer, "<B")
        step_sizes = dict(_read(buffer, "<Bd") for _ in range(k))
        offsets = np.frombuffer(_read_bytes(buffer, 8 * d), dtype="<f8").astype(np.float64)
        (has_slots,) = _read(buffer, "<B")
        slots = np.frombuffer(_read_bytes(buffer, 4 * n), dtype="<u4").astype(np.int64) if has_slots else None
        (words,) = _read(buffer, "<Q")
        payload = np.frombuffer(_read_bytes(buffer, 2 * words), dtype="<u2").astype(np.uint16)
        if buffer.read(1):
            raise FormatError("trailing bytes after packed payload")
        return PackedTable(
            n=n,
            d=d,
            candidate_bits=candidate_bits,
            directory=directory,
            step_sizes=step_sizes,
            offsets=offsets,
            payload=payload,
            catalog_hash=catalog_hash,
            slots=slots,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @staticmethod
    def load(path: str | Path, catalog_hash: str | None = None) -> PackedTable:
        """Read a packed table, refusing it when `catalog_hash` is given and differs."""
        table = PackedTable.from_bytes(Path(path).read_bytes())
        if catalog_hash is not None and table.catalog_hash != catalog_hash:
            raise CatalogMismatchError(
                f"{path} was packed for catalog {table.catalog_hash[:12]}, expected {catalog_hash[:12]}"
            )
        return table


class CompressionReport(Metrics):
    packed_bytes: int
    fp32_bytes: int
    ratio: float
    compression_factor: float
    avg_bits: float
    per_bit_feature_counts: dict[str, int]


def words_per_feature(d: int, b: int) -> int:
    return -(-d * b // WORD_BITS)


def encode_words(codes: np.ndarray, b: int) -> np.ndarray:
    """Pack an (count, d) code matrix into (count, words) uint16, LSB first."""
    count, d = codes.shape
    width = words_per_feature(d, b)
    unsigned = (codes & ((1 << b) - 1)).astype(np.uint64)
    bits = ((unsigned[..., None] >> np.arange(b, dtype=np.uint64)) & 1).astype(np.uint8).reshape(count, d * b)
    bits = np.pad(bits, ((0, 0), (0, width * WORD_BITS - d * b)))
    packed = np.packbits(bits, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u2").astype(np.uint16).reshape(count, width)


def decode_words(words: np.ndarray, b: int, d: int) -> np.ndarray:
    """Inverse of `encode_words`, sign-extending each b-bit code."""
    count = words.shape[0]
    raw = np.ascontiguousarray(words.astype("<u2")).view(np.uint8).reshape(count, -1)
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, : d * b].reshape(count, d, b).astype(np.int64)
    unsigned = (bits << np.arange(b, dtype=np.int64)).sum(axis=-1)
    return np.where(unsigned >= 1 << (b - 1), unsigned - (1 << b), unsigned)


def pack(
    embeddings: np.ndarray,
    sampled: SampledPrecision,
    params: QuantizerParams,
    groups: GroupAssignment,
    catalog_hash: str = "",
    candidates: CandidateSet | None = None,
) -> PackedTable:
    n, d = embeddings.shape
    if d != params.d:
        raise DimensionMismatchError(f"embeddings have dimension {d}, quantizer has {params.d}")
    if groups.group_of.shape[0] != n:
        raise DimensionMismatchError(f"grouping covers {groups.group_of.shape[0]} features, table has {n}")
    if len(sampled.bit_of_group) != groups.g:
        raise DimensionMismatchError(f"{len(sampled.bit_of_group)} sampled bit widths for {groups.g} groups")

    slots = None
    if not np.array_equal(groups.order, np.arange(n)):
        slots = np.empty(n, dtype=np.int64)
        slots[groups.order] = np.arange(n)

    directory = []
    chunks = []
    offset = 0
    for k, b in enumerate(sampled.bit_of_group):
        members = groups.members(k)
        directory.append(GroupRecord(bit_width=b, first_rank=k * groups.group_size, count=members.shape[0], payload_offset=offset))
        if b == 0:
            continue
        _, codes = quantize_array(embeddings[members], params.step_size(b), params.offsets, b)
        lo, hi = bounds(b)
        assert codes.min(initial=lo) >= lo and codes.max(initial=hi) <= hi, "code outside the b-bit range"
        words = encode_words(codes, b)
        chunks.append(words.reshape(-1))
        offset += words.size

    if candidates is None:
        candidates = CandidateSet(bits=tuple(sorted({0, *params.bits, *sampled.bit_of_group})))
    payload = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.uint16)
    return PackedTable(
        n=n,
        d=d,
        candidate_bits=candidates.bits,
        directory=directory,
        step_sizes=params.step_size_map(),
        offsets=params.offsets.copy(),
        payload=payload,
        catalog_hash=catalog_hash,
        slots=slots,
    )


def _locate(table: PackedTable, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per feature id: its bit width, its first payload word and its group."""
    if ids.size and (ids.min() < 0 or ids.max() >= table.n):
        raise IndexError(f"feature id out of range [0, {table.n})")
    ranks = table.slots[ids] if table.slots is not None else ids
    firsts = np.array([record.first_rank for record in table.directory], dtype=np.int64)
    group = np.searchsorted(firsts, ranks, side="right") - 1
    bit_of_group = np.array([record.bit_width for record in table.directory], dtype=np.int64)
    offset_of_group = np.array([record.payload_offset for record in table.directory], dtype=np.int64)
    width = -(-table.d * bit_of_group // WORD_BITS)
    start = offset_of_group[group] + (ranks - firsts[group]) * width[group]
    return bit_of_group[group], start, group


def unpack_codes(table: PackedTable, feature_id: int) -> np.ndarray:
    bits, start, _ = _locate(table, np.array([feature_id], dtype=np.int64))
    b = int(bits[0])
    if b == 0:
        return np.zeros(table.d, dtype=np.int64)
    words = table.payload[start[0] : start[0] + words_per_feature(table.d, b)]
    return decode_words(words[None, :], b, table.d)[0]


def lookup_batch(table: PackedTable, ids: np.ndarray) -> np.ndarray:
    """Dequantized embeddings for an id array of any shape, shaped (*ids.shape, d)."""
    ids = np.asarray(ids, dtype=np.int64)
    flat = ids.reshape(-1)
    bits, start, _ = _locate(table, flat)
    out = np.zeros((flat.shape[0], table.d), dtype=np.float64)
    for b in np.unique(bits).tolist():
        if b == 0:
            continue
        selected = np.flatnonzero(bits == b)
        width = words_per_feature(table.d, b)
        words = table.payload[start[selected, None] + np.arange(width)]
        codes = decode_words(words, b, table.d).astype(np.float64)
        out[selected] = table.step_sizes[b] * codes + table.offsets
    return out.reshape(*ids.shape, table.d)


def lookup(table: PackedTable, feature_id: int) -> np.ndarray:
    return lookup_batch(table, np.array([feature_id]))[0]


def report(table: PackedTable) -> CompressionReport:
    packed_bytes = len(table.to_bytes())
    fp32_bytes = table.n * table.d * 4
    counts: dict[str, int] = {}
    total_bits = 0
    for record in table.directory:
        counts[str(record.bit_width)] = counts.get(str(record.bit_width), 0) + record.count
        total_bits += record.bit_width * record.count
    ratio = packed_bytes / fp32_bytes
    return CompressionReport(
        packed_bytes=packed_bytes,
        fp32_bytes=fp32_bytes,
        ratio=ratio,
        compression_factor=1.0 / ratio,
        avg_bits=total_bits / table.n,
        per_bit_feature_counts=dict(sorted(counts.items(), key=lambda item: int(item[0]))),
    )


def dump(table: PackedTable, features_per_group: int = 1) -> str:
    """Text view of the directory with the codes of each group's first features."""
    lines = [f"n={table.n}\td={table.d}\tcandidates={list(table.candidate_bits)}\tcatalog={table.catalog_hash}"]
    rank_to_id = None
    if table.slots is not None:
        rank_to_id = np.empty(table.n, dtype=np.int64)
        rank_to_id[table.slots] = np.arange(table.n)
    for k, record in enumerate(table.directory):
        lines.append(f"group {k}\tbit={record.bit_width}\toffset={record.payload_offset}\tcount={record.count}")
        for rank in range(record.first_rank, record.first_rank + min(features_per_group, record.count)):
            feature_id = int(rank_to_id[rank]) if rank_to_id is not None else rank
            codes = unpack_codes(table, feature_id)
            lines.append(f"  feature {feature_id}\t{' '.join(str(code) for code in codes.tolist())}")
    return "\n".join(lines) + "\n"


def _hash_bytes(digest: str) -> bytes:
    if not digest:
        return bytes(32)
    raw = bytes.fromhex(digest)
    if len(raw) != 32:
        raise FormatError(f"catalog hash must be a sha256 hex digest, got {digest!r}")
    return raw


def _read_bytes(buffer: io.BytesIO, size: int) -> bytes:
    chunk = buffer.read(size)
    if len(chunk) != size:
        raise FormatError("truncated packed table")
    return chunk


def _read(buffer: io.BytesIO, fmt: str) -> tuple:
    return struct.unpack(fmt, _read_bytes(buffer, struct.calcsize(fmt)))
