"""Writer/reader for the XSMF feature-cache binary contract.

This is an independent implementation of the format consumed by the
recommendation engine; the two sides share only the byte layout:

    magic   b"XSMF"
    version u8   (1)
    modality u8  (0 = visual, 1 = textual)
    items   u32, layers u32, dim u32   (little-endian)
    per item: id_len u16, id UTF-8 bytes, layers*dim float32 (little-endian)
"""

import struct

import numpy as np

MAGIC = b"XSMF"
VERSION = 1
MODALITY_TAGS = {"visual": 0, "textual": 1}

_HEADER = struct.Struct("<4sBBIII")


def write_xsmf(path, modality, item_ids, vectors):
    """vectors: float array (items, layers, dim); written as float32 LE."""
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 3 or vectors.shape[0] != len(item_ids):
        raise ValueError(f"bad vectors shape {vectors.shape} for {len(item_ids)} items")
    if not np.all(np.isfinite(vectors)):
        raise ValueError("refusing to write non-finite feature vectors")
    if len(set(item_ids)) != len(item_ids):
        raise ValueError("duplicate item ids")
    n, layers, dim = vectors.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, MODALITY_TAGS[modality], n, layers, dim))
        for iid, vecs in zip(item_ids, vectors):
            raw = str(iid).encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(vecs.tobytes())


def read_xsmf(path):
    """Parse a cache back; returns (modality, item_ids, vectors)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, version, tag, n, layers, dim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC or version != VERSION:
        raise ValueError(f"{path}: not an XSMF v{VERSION} file")
    modality = {v: k for k, v in MODALITY_TAGS.items()}[tag]
    ids = []
    vectors = np.empty((n, layers, dim), dtype=np.float32)
    off = _HEADER.size
    for i in range(n):
        (id_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        ids.append(blob[off:off + id_len].decode("utf-8"))
        off += id_len
        vectors[i] = np.frombuffer(blob, dtype="<f4", count=layers * dim,
                                   offset=off).reshape(layers, dim)
        off += layers * dim * 4
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes")
    return modality, ids, vectors
