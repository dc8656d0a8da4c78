"""Binary feature stores for video/query embedding corpora.

File format (little-endian):
    bytes 0-5   magic: b"GRDFV1" (video) or b"GRDFQ1" (query)
    bytes 6-7   reserved, zero
    bytes 8-11  u32 record count
    bytes 12-15 u32 dimension d_f
    records     video: u64 video_id, d_f * f32
                query: u64 query_id, u64 target_video_id,
                       u32 text_length, UTF-8 text, d_f * f32

Vectors are stored raw (single precision); unit-normalization is an
explicit post-load step so cosine consumers can opt in once.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

VIDEO_MAGIC = b"GRDFV1"
QUERY_MAGIC = b"GRDFQ1"
HEADER_SIZE = 16

# Smallest positive normal float32; anything below is treated as zero norm.
_ZERO_NORM = 1.2e-38


class StoreFormatError(Exception):
    """Base class for malformed feature files."""


class BadMagicError(StoreFormatError):
    pass


class TruncatedFileError(StoreFormatError):
    pass


class TrailingDataError(StoreFormatError):
    pass


class DimensionError(StoreFormatError):
    pass


class DuplicateIdError(StoreFormatError):
    pass


class ZeroNormError(ValueError):
    """Raised by normalize() on a zero-norm vector when degenerate handling is off."""


@dataclass
class VideoRecord:
    video_id: int
    features: np.ndarray


@dataclass
class QueryRecord:
    query_id: int
    features: np.ndarray
    target_video_id: int
    text: str = ""


@dataclass
class FeatureStore:
    """Id-addressed collection of fixed-dimension float32 vectors.

    Immutable after construction; safe for concurrent readers.
    """

    kind: str  # "video" | "query"
    dimension: int
    ids: np.ndarray  # (n,) uint64
    features: np.ndarray  # (n, dimension) float32, C-order
    target_video_ids: np.ndarray | None = None  # queries only, (n,) uint64
    texts: list[str] | None = None  # queries only
    normalized: bool = False
    degenerate_count: int = 0
    _id_index: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("video", "query"):
            raise ValueError(f"unknown store kind {self.kind!r}")
        if self.dimension <= 0:
            raise DimensionError("store dimension must be positive")
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.shape != (len(self.ids), self.dimension):
            raise ValueError(
                f"feature matrix shape {self.features.shape} does not match "
                f"({len(self.ids)}, {self.dimension})"
            )
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature component")
        self._id_index = {int(i): pos for pos, i in enumerate(self.ids)}
        if len(self._id_index) != len(self.ids):
            raise DuplicateIdError(f"duplicate id in {self.kind} store")
        if self.normalized and len(self.ids):
            norms = np.linalg.norm(self.features.astype(np.float64), axis=1)
            if not np.all(np.abs(norms - 1.0) < 1e-5):
                raise ValueError("normalized store holds a non-unit vector")
        if self.kind == "query":
            if self.target_video_ids is None:
                raise ValueError("query store requires target_video_ids")
            self.target_video_ids = np.ascontiguousarray(self.target_video_ids, dtype=np.uint64)
            if self.texts is None:
                self.texts = [""] * len(self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, record_id: int) -> bool:
        return int(record_id) in self._id_index

    def row(self, record_id: int) -> int:
        return self._id_index[int(record_id)]

    def vector(self, record_id: int) -> np.ndarray:
        return self.features[self.row(record_id)]

    def records(self):
        """Yield VideoRecord / QueryRecord views over the backing arrays."""
        for pos in range(len(self.ids)):
            if self.kind == "video":
                yield VideoRecord(int(self.ids[pos]), self.features[pos])
            else:
                yield QueryRecord(
                    int(self.ids[pos]),
                    self.features[pos],
                    int(self.target_video_ids[pos]),
                    self.texts[pos],
                )


def _magic_for(kind: str) -> bytes:
    return VIDEO_MAGIC if kind == "video" else QUERY_MAGIC


def load_store(path, kind: str) -> FeatureStore:
    """Load a feature file, validating structure byte-for-byte.

    Raises BadMagicError, TruncatedFileError, TrailingDataError,
    DimensionError or DuplicateIdError on malformed input. Vectors are
    read verbatim; no normalization happens here.
    """
    if kind not in ("video", "query"):
        raise ValueError(f"unknown store kind {kind!r}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER_SIZE:
        raise TruncatedFileError(f"{path}: file shorter than header")
    if blob[:6] != _magic_for(kind):
        raise BadMagicError(f"{path}: expected {kind} magic, found {blob[:6]!r}")
    count, dim = struct.unpack_from("<II", blob, 8)
    if dim == 0:
        raise DimensionError(f"{path}: declared dimension is 0")

    if kind == "video":
        rec_size = 8 + 4 * dim
        expected = HEADER_SIZE + count * rec_size
        if len(blob) < expected:
            raise TruncatedFileError(
                f"{path}: {count} records declared, file holds "
                f"{(len(blob) - HEADER_SIZE) // rec_size}"
            )
        if len(blob) > expected:
            raise TrailingDataError(f"{path}: {len(blob) - expected} trailing bytes")
        rec_dtype = np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])
        raw = np.frombuffer(blob, dtype=rec_dtype, count=count, offset=HEADER_SIZE)
        ids = raw["id"].copy()
        feats = raw["vec"].reshape(count, dim).copy()
        return FeatureStore(kind="video", dimension=int(dim), ids=ids, features=feats)

    # Query records are variable length (text), parsed sequentially.
    ids = np.empty(count, dtype=np.uint64)
    targets = np.empty(count, dtype=np.uint64)
    texts: list[str] = []
    feats = np.empty((count, dim), dtype=np.float32)
    off = HEADER_SIZE
    vec_bytes = 4 * dim
    for i in range(count):
        if off + 20 > len(blob):
            raise TruncatedFileError(f"{path}: record {i} header truncated")
        qid, tgt, tlen = struct.unpack_from("<QQI", blob, off)
        off += 20
        if off + tlen + vec_bytes > len(blob):
            raise TruncatedFileError(f"{path}: record {i} payload truncated")
        texts.append(blob[off : off + tlen].decode("utf-8"))
        off += tlen
        feats[i] = np.frombuffer(blob, dtype="<f4", count=dim, offset=off)
        off += vec_bytes
        ids[i] = qid
        targets[i] = tgt
    if off != len(blob):
        raise TrailingDataError(f"{path}: {len(blob) - off} trailing bytes")
    return FeatureStore(
        kind="query",
        dimension=int(dim),
        ids=ids,
        features=feats,
        target_video_ids=targets,
        texts=texts,
    )


def store_bytes(store: FeatureStore) -> bytes:
    """Serialize a store to the exact on-disk byte layout."""
    out = bytearray()
    out += _magic_for(store.kind)
    out += b"\x00\x00"
    out += struct.pack("<II", len(store), store.dimension)
    if store.kind == "video":
        rec_dtype = np.dtype([("id", "<u8"), ("vec", "<f4", (store.dimension,))])
        raw = np.empty(len(store), dtype=rec_dtype)
        raw["id"] = store.ids
        raw["vec"] = store.features
        out += raw.tobytes()
    else:
        for i in range(len(store)):
            text = store.texts[i].encode("utf-8")
            out += struct.pack(
                "<QQI", int(store.ids[i]), int(store.target_video_ids[i]), len(text)
            )
            out += text
            out += store.features[i].astype("<f4", copy=False).tobytes()
    return bytes(out)


def save_store(store: FeatureStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(store_bytes(store))


def normalize(store: FeatureStore, replace_degenerate: bool = False) -> FeatureStore:
    """Return a copy with every vector scaled to unit Euclidean norm.

    Norms are accumulated in double precision, the result stored back to
    float32. Zero-norm vectors raise ZeroNormError unless
    replace_degenerate is set, in which case they become the first
    standard basis vector and are counted in degenerate_count.
    Idempotent: an already-normalized store is returned unchanged.
    """
    if store.normalized:
        return store
    feats64 = store.features.astype(np.float64)
    norms = np.linalg.norm(feats64, axis=1)
    degenerate = norms < _ZERO_NORM
    n_degenerate = int(degenerate.sum())
    if n_degenerate and not replace_degenerate:
        bad = int(store.ids[np.argmax(degenerate)])
        raise ZeroNormError(f"zero-norm vector for id {bad}")
    safe = np.where(degenerate, 1.0, norms)
    unit = (feats64 / safe[:, None]).astype(np.float32)
    if n_degenerate:
        unit[degenerate] = 0.0
        unit[degenerate, 0] = 1.0
        log.warning(
            "replaced %d zero-norm vector(s) with the first basis vector", n_degenerate
        )
    return FeatureStore(
        kind=store.kind,
        dimension=store.dimension,
        ids=store.ids.copy(),
        features=unit,
        target_video_ids=None if store.target_video_ids is None else store.target_video_ids.copy(),
        texts=None if store.texts is None else list(store.texts),
        normalized=True,
        degenerate_count=n_degenerate,
    )


def validate_pairing(videos: FeatureStore, queries: FeatureStore) -> None:
    """Check that every query target resolves in the video store."""
    missing = [int(t) for t in queries.target_video_ids if int(t) not in videos]
    if missing:
        raise ValueError(
            f"{len(missing)} query targets missing from video store "
            f"(first: {missing[0]})"
        )
