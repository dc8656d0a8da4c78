import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genret.features import (
    BadMagicError,
    DimensionError,
    DuplicateIdError,
    FeatureStore,
    TrailingDataError,
    TruncatedFileError,
    ZeroNormError,
    load_store,
    normalize,
    save_store,
    store_bytes,
    validate_pairing,
)


def video_store(ids, rows, dim=None):
    rows = np.asarray(rows, dtype=np.float32)
    dim = rows.shape[1] if dim is None else dim
    return FeatureStore(
        kind="video",
        dimension=dim,
        ids=np.asarray(ids, dtype=np.uint64),
        features=rows,
    )


def random_video_store(seed, n, dim):
    rng = np.random.default_rng(seed)
    return video_store(
        rng.choice(10_000, size=n, replace=False),
        rng.standard_normal((n, dim)).astype(np.float32),
    )


def random_query_store(seed, n, dim):
    rng = np.random.default_rng(seed)
    return FeatureStore(
        kind="query",
        dimension=dim,
        ids=rng.choice(10_000, size=n, replace=False),
        features=rng.standard_normal((n, dim)).astype(np.float32),
        target_video_ids=rng.integers(0, 50, size=n, dtype=np.uint64),
        texts=[f"query {i} ☃" if i % 2 else "" for i in range(n)],
    )


# ----------------------------------------------------------------------
# load / save
# ----------------------------------------------------------------------

def test_load_empty_store(tmp_path):
    path = tmp_path / "empty.feat"
    path.write_bytes(b"GRDFV1\x00\x00" + struct.pack("<II", 0, 4))
    store = load_store(path, "video")
    assert len(store) == 0
    assert store.dimension == 4


def test_save_empty_store_is_header_only(tmp_path):
    path = tmp_path / "empty.feat"
    save_store(video_store([], np.empty((0, 4), dtype=np.float32), dim=4), path)
    blob = path.read_bytes()
    assert len(blob) == 16
    assert blob[:6] == b"GRDFV1"
    assert struct.unpack("<II", blob[8:16]) == (0, 4)


def test_single_record_byte_layout():
    blob = store_bytes(video_store([7], [[1.0, 0.0]]))
    assert len(blob) == 16 + 8 + 8
    assert struct.unpack("<Q", blob[16:24]) == (7,)
    assert blob[24:32] == struct.pack("<ff", 1.0, 0.0)


def test_round_trip_two_records(tmp_path):
    store = random_video_store(0, 2, 3)
    path = tmp_path / "s.feat"
    save_store(store, path)
    loaded = load_store(path, "video")
    assert np.array_equal(loaded.ids, store.ids)
    assert loaded.features.tobytes() == store.features.tobytes()
    assert store_bytes(loaded) == path.read_bytes()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 12), dim=st.integers(1, 9))
def test_round_trip_random_video_stores(tmp_path_factory, seed, n, dim):
    store = random_video_store(seed, n, dim)
    blob = store_bytes(store)
    path = tmp_path_factory.mktemp("rt") / "s.feat"
    path.write_bytes(blob)
    assert store_bytes(load_store(path, "video")) == blob


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 10), dim=st.integers(1, 6))
def test_round_trip_random_query_stores(tmp_path_factory, seed, n, dim):
    store = random_query_store(seed, n, dim)
    blob = store_bytes(store)
    path = tmp_path_factory.mktemp("rt") / "q.feat"
    path.write_bytes(blob)
    loaded = load_store(path, "query")
    assert store_bytes(loaded) == blob
    assert loaded.texts == store.texts
    assert np.array_equal(loaded.target_video_ids, store.target_video_ids)


def test_truncated_file_rejected(tmp_path):
    store = random_video_store(1, 5, 3)
    full = store_bytes(store)
    truncated = bytearray(full[: 16 + 3 * (8 + 12)])  # keep 3 of 5 records
    path = tmp_path / "t.feat"
    path.write_bytes(bytes(truncated))
    with pytest.raises(TruncatedFileError):
        load_store(path, "video")


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.feat"
    path.write_bytes(store_bytes(random_video_store(2, 2, 3)) + b"\x00")
    with pytest.raises(TrailingDataError):
        load_store(path, "video")


def test_query_file_length_checked_per_record(tmp_path):
    store = random_query_store(3, 4, 3)
    blob = store_bytes(store)
    path = tmp_path / "q.feat"
    path.write_bytes(blob[:-5])
    with pytest.raises(TruncatedFileError):
        load_store(path, "query")


def test_bad_magic(tmp_path):
    path = tmp_path / "b.feat"
    path.write_bytes(b"NOTMAG\x00\x00" + struct.pack("<II", 0, 4))
    with pytest.raises(BadMagicError):
        load_store(path, "video")
    # a query file is not a video file
    path.write_bytes(store_bytes(random_query_store(4, 1, 2)))
    with pytest.raises(BadMagicError):
        load_store(path, "video")


def test_zero_dimension_rejected(tmp_path):
    path = tmp_path / "d0.feat"
    path.write_bytes(b"GRDFV1\x00\x00" + struct.pack("<II", 0, 0))
    with pytest.raises(DimensionError):
        load_store(path, "video")


def test_duplicate_id_rejected(tmp_path):
    blob = bytearray(store_bytes(random_video_store(5, 2, 2)))
    blob[16:24] = blob[16 + 8 + 8 : 16 + 8 + 8 + 8]  # copy second id over first
    path = tmp_path / "dup.feat"
    path.write_bytes(bytes(blob))
    with pytest.raises(DuplicateIdError):
        load_store(path, "video")


# ----------------------------------------------------------------------
# normalize
# ----------------------------------------------------------------------

def test_normalize_three_four():
    store = normalize(video_store([1], [[3.0, 4.0]]))
    assert np.allclose(store.features[0], [0.6, 0.8], atol=1e-7)
    assert store.normalized


def test_normalize_unit_vector_unchanged():
    store = normalize(video_store([1], [[1.0, 0.0]]))
    assert np.allclose(store.features[0], [1.0, 0.0], atol=1e-7)


def test_normalize_idempotent_exact():
    store = normalize(random_video_store(6, 8, 5))
    again = normalize(store)
    assert again is store
    assert again.features.tobytes() == store.features.tobytes()


def test_normalize_zero_vector_requires_flag():
    store = video_store([1, 2], [[0.0, 0.0], [1.0, 2.0]])
    with pytest.raises(ZeroNormError):
        normalize(store)
    fixed = normalize(store, replace_degenerate=True)
    assert fixed.degenerate_count == 1
    assert np.array_equal(fixed.features[0], [1.0, 0.0])
    assert abs(np.linalg.norm(fixed.features[1]) - 1.0) < 1e-5


def test_normalized_store_norms_within_tolerance():
    store = normalize(random_video_store(7, 50, 16))
    norms = np.linalg.norm(store.features.astype(np.float64), axis=1)
    assert np.all(np.abs(norms - 1.0) < 1e-5)


# ----------------------------------------------------------------------
# invariants
# ----------------------------------------------------------------------

def test_store_rejects_nonfinite():
    with pytest.raises(ValueError):
        video_store([1], [[np.inf, 0.0]])


def test_validate_pairing():
    videos = random_video_store(8, 10, 4)
    queries = FeatureStore(
        kind="query",
        dimension=4,
        ids=np.array([1], dtype=np.uint64),
        features=np.ones((1, 4), dtype=np.float32),
        target_video_ids=np.array([999_999], dtype=np.uint64),
    )
    with pytest.raises(ValueError, match="missing"):
        validate_pairing(videos, queries)
