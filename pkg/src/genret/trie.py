"""Immutable prefix trie over corpus semantic IDs with posting lists.

Every root-to-leaf path has length exactly M (the number of codebook
layers); leaves carry sorted, duplicate-free (video_id, view_id)
posting lists. The trie is the decoding constraint for beam search:
only child codes present at the current prefix are valid extensions.

File format (little-endian): magic b"GRDIX1", u8 M, u16 K, u32 video
count, then a pre-order node stream. Internal nodes: u16 child count,
then per child (code: u8 when K <= 256 else u16, u32 subtree byte
length) followed by the child subtrees in ascending code order. Depth-M
leaves: u32 posting count, then per posting u64 video_id, u8 view_id.
"""

from __future__ import annotations

import struct

MAGIC = b"GRDIX1"


class TrieFormatError(Exception):
    pass


class TrieNode:
    __slots__ = ("children", "postings")

    def __init__(self):
        self.children: dict[int, TrieNode] = {}
        self.postings: list[tuple[int, int]] = []


class TrieIndex:
    def __init__(self, m_layers: int, k: int):
        if m_layers < 1 or k < 1:
            raise ValueError("m_layers and k must be >= 1")
        self.m_layers = m_layers
        self.k = k
        self.root = TrieNode()
        self.video_count = 0
        self.node_count = 1

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    def _insert(self, codes, video_id: int, view_id: int) -> None:
        if len(codes) != self.m_layers:
            raise ValueError(f"semantic ID length {len(codes)} != {self.m_layers}")
        node = self.root
        for code in codes:
            code = int(code)
            if not 0 <= code < self.k:
                raise ValueError(f"code {code} out of range [0, {self.k})")
            child = node.children.get(code)
            if child is None:
                child = TrieNode()
                node.children[code] = child
                self.node_count += 1
            node = child
        node.postings.append((int(video_id), int(view_id)))

    def _finalize(self) -> None:
        for leaf in self.leaves():
            leaf.postings = sorted(set(leaf.postings))

    def leaves(self):
        stack = [(self.root, 0)]
        while stack:
            node, depth = stack.pop()
            if depth == self.m_layers:
                yield node
            else:
                for code in sorted(node.children, reverse=True):
                    stack.append((node.children[code], depth + 1))

    # ------------------------------------------------------------------
    # queries
    # ------------------------------------------------------------------

    def node_at(self, prefix) -> TrieNode | None:
        node = self.root
        for code in prefix:
            node = node.children.get(int(code))
            if node is None:
                return None
        return node

    def allowed_next(self, prefix) -> set[int]:
        """Valid next codes after prefix; empty set when the prefix is not a path."""
        if len(prefix) >= self.m_layers:
            raise ValueError(f"prefix of length {len(prefix)} is already complete")
        node = self.node_at(prefix)
        return set() if node is None else set(node.children)

    def resolve(self, semantic_id) -> list[tuple[int, int]]:
        """Posting list for a full-length ID; empty when absent."""
        if len(semantic_id) != self.m_layers:
            raise ValueError(f"semantic ID length {len(semantic_id)} != {self.m_layers}")
        node = self.node_at(semantic_id)
        return [] if node is None else list(node.postings)

    def distinct_ids(self) -> int:
        return sum(1 for _ in self.leaves())

    def posting_count(self) -> int:
        return sum(len(leaf.postings) for leaf in self.leaves())

    # ------------------------------------------------------------------
    # serialization
    # ------------------------------------------------------------------

    @property
    def code_width(self) -> int:
        return 1 if self.k <= 256 else 2

    def _node_bytes(self, node: TrieNode, depth: int) -> bytes:
        if depth == self.m_layers:
            out = bytearray(struct.pack("<I", len(node.postings)))
            for vid, view in node.postings:
                out += struct.pack("<QB", vid, view)
            return bytes(out)
        codes = sorted(node.children)
        subtrees = [self._node_bytes(node.children[c], depth + 1) for c in codes]
        out = bytearray(struct.pack("<H", len(codes)))
        code_fmt = "<B" if self.code_width == 1 else "<H"
        for code, sub in zip(codes, subtrees):
            out += struct.pack(code_fmt, code)
            out += struct.pack("<I", len(sub))
        for sub in subtrees:
            out += sub
        return bytes(out)

    def to_bytes(self) -> bytes:
        header = MAGIC + struct.pack("<BHI", self.m_layers, self.k, self.video_count)
        return header + self._node_bytes(self.root, 0)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TrieIndex":
        if blob[:6] != MAGIC:
            raise TrieFormatError(f"bad index magic {blob[:6]!r}")
        m_layers, k, video_count = struct.unpack_from("<BHI", blob, 6)
        trie = cls(m_layers, k)
        trie.video_count = video_count
        code_fmt = "<B" if trie.code_width == 1 else "<H"
        code_size = trie.code_width

        def parse(node: TrieNode, off: int, depth: int) -> int:
            if depth == m_layers:
                (count,) = struct.unpack_from("<I", blob, off)
                off += 4
                for _ in range(count):
                    vid, view = struct.unpack_from("<QB", blob, off)
                    off += 9
                    node.postings.append((vid, view))
                return off
            (n_children,) = struct.unpack_from("<H", blob, off)
            off += 2
            codes = []
            for _ in range(n_children):
                (code,) = struct.unpack_from(code_fmt, blob, off)
                off += code_size + 4  # skip the subtree length
                codes.append(code)
            for code in codes:
                child = TrieNode()
                node.children[code] = child
                trie.node_count += 1
                off = parse(child, off, depth + 1)
            return off

        end = parse(trie.root, 13, 0)
        if end != len(blob):
            raise TrieFormatError(f"{len(blob) - end} trailing bytes in index")
        return trie

    @classmethod
    def load(cls, path) -> "TrieIndex":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build_trie(id_sets: dict[int, list], m_layers: int, k: int) -> TrieIndex:
    """Index every (video, view) semantic ID; collisions merge posting lists."""
    trie = TrieIndex(m_layers, k)
    for video_id in sorted(id_sets):
        for view_id, codes in enumerate(id_sets[video_id]):
            trie._insert(codes, video_id, view_id)
    trie.video_count = len(id_sets)
    trie._finalize()
    return trie


def _sig3(x: float) -> float:
    return float(f"{x:.3g}")


def storage_report(trie: TrieIndex, d_f: int, frame_count_assumption: int = 12) -> dict:
    """Index size vs dense embedding storage.

    id_payload_bytes counts only the raw per-(video, view) code bytes;
    index_file_bytes is the serialized trie including posting lists.
    Ratios are dense / index, 3 significant figures, None for an empty
    corpus.
    """
    index_bytes = len(trie.to_bytes())
    payload = trie.posting_count() * trie.m_layers * trie.code_width
    dense_video = trie.video_count * d_f * 4
    dense_frame = dense_video * frame_count_assumption
    report = {
        "video_count": trie.video_count,
        "distinct_ids": trie.distinct_ids(),
        "code_width_bytes": trie.code_width,
        "index_file_bytes": index_bytes,
        "id_payload_bytes": payload,
        "dense_video_bytes": dense_video,
        "dense_frame_bytes": dense_frame,
        "frame_count_assumption": frame_count_assumption,
    }
    if trie.video_count == 0 or payload == 0:
        report.update(
            video_payload_ratio=None, video_index_ratio=None,
            frame_payload_ratio=None, frame_index_ratio=None,
        )
    else:
        report.update(
            video_payload_ratio=_sig3(dense_video / payload),
            video_index_ratio=_sig3(dense_video / index_bytes),
            frame_payload_ratio=_sig3(dense_frame / payload),
            frame_index_ratio=_sig3(dense_frame / index_bytes),
        )
    return report
