"""Interaction ingestion, binary feature caches, and synthetic streams.

The XSMF cache is the cross-tool contract for precomputed backbone
features. Layout (all integers little-endian):

    magic   b"XSMF"
    version u8   (currently 1)
    modality u8  (0 = visual, 1 = textual)
    items   u32
    layers  u32  (M+1 pooled vectors per item, l_0 .. l_M)
    dim     u32
    then per item: id_len u16, id bytes (UTF-8), layers*dim float32

The ground-truth sidecar written by the synthetic generator:

    magic   b"XSMG"
    version u8
    windows u32, users u32, items u32
    then per window: users*items float32, row-major
"""

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DataError
from .rng import labeled_rng

XSMF_MAGIC = b"XSMF"
XSMF_VERSION = 1
XSMG_MAGIC = b"XSMG"
XSMG_VERSION = 1
MODALITY_TAGS = {"visual": 0, "textual": 1}
TAG_MODALITIES = {v: k for k, v in MODALITY_TAGS.items()}

_XSMF_HEADER = struct.Struct("<4sBBIII")
_XSMG_HEADER = struct.Struct("<4sBIII")


class Interaction(NamedTuple):
    user: str
    item: str
    ts: int


# ---------------------------------------------------------------------------
# interaction text files
# ---------------------------------------------------------------------------

INTERACTION_HEADER = "user_id,item_id,timestamp"


def load_interactions(path) -> list:
    """Parse a comma-separated interaction file and stably sort it.

    Duplicate exact triples are allowed (repeat purchases). Any malformed
    row fails with its line number.
    """
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != INTERACTION_HEADER:
            raise DataError(f"{path}: expected header '{INTERACTION_HEADER}', got '{header}'")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: malformed row '{line}'")
            try:
                ts = int(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer timestamp '{parts[2]}'")
            out.append(Interaction(parts[0], parts[1], ts))
    out.sort(key=lambda r: (r.ts, r.user, r.item))
    return out


def write_interactions(path, interactions):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(INTERACTION_HEADER + "\n")
        for r in interactions:
            fh.write(f"{r.user},{r.item},{r.ts}\n")


# ---------------------------------------------------------------------------
# XSMF feature caches
# ---------------------------------------------------------------------------

@dataclass
class FeatureCache:
    """Per-item pooled backbone outputs for one modality."""

    modality: str
    item_ids: list
    vectors: np.ndarray  # (items, layers, dim) float32

    def __post_init__(self):
        if self.vectors.ndim != 3:
            raise DataError(f"feature vectors must be 3-D, got {self.vectors.shape}")
        if len(self.item_ids) != self.vectors.shape[0]:
            raise DataError("item id count does not match vector count")
        if len(set(self.item_ids)) != len(self.item_ids):
            raise DataError("duplicate item ids in feature cache")
        if not np.all(np.isfinite(self.vectors)):
            raise DataError("non-finite values in feature cache")
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self._index = {iid: i for i, iid in enumerate(self.item_ids)}

    @property
    def layers(self) -> int:
        return self.vectors.shape[1]

    @property
    def dim(self) -> int:
        return self.vectors.shape[2]

    def __contains__(self, item_id) -> bool:
        return item_id in self._index

    def stack(self, item_id) -> np.ndarray:
        return self.vectors[self._index[item_id]]


def write_cache(path, cache: FeatureCache):
    tag = MODALITY_TAGS.get(cache.modality)
    if tag is None:
        raise DataError(f"unknown modality '{cache.modality}'")
    with open(path, "wb") as fh:
        fh.write(_XSMF_HEADER.pack(
            XSMF_MAGIC, XSMF_VERSION, tag,
            len(cache.item_ids), cache.layers, cache.dim,
        ))
        for iid, vecs in zip(cache.item_ids, cache.vectors):
            raw = iid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise DataError(f"item id too long: {iid[:40]}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.ascontiguousarray(vecs, dtype="<f4").tobytes())


def read_cache(path) -> FeatureCache:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _XSMF_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, tag, n_items, layers, dim = _XSMF_HEADER.unpack_from(blob, 0)
    if magic != XSMF_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != XSMF_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if tag not in TAG_MODALITIES:
        raise DataError(f"{path}: unknown modality tag {tag}")
    if layers == 0 or dim == 0:
        raise DataError(f"{path}: degenerate dimensions layers={layers} dim={dim}")
    off = _XSMF_HEADER.size
    vec_bytes = layers * dim * 4
    ids = []
    vectors = np.empty((n_items, layers, dim), dtype=np.float32)
    for i in range(n_items):
        if off + 2 > len(blob):
            raise DataError(f"{path}: truncated at item {i}")
        (id_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        if off + id_len + vec_bytes > len(blob):
            raise DataError(f"{path}: truncated at item {i}")
        ids.append(blob[off:off + id_len].decode("utf-8"))
        off += id_len
        vectors[i] = np.frombuffer(
            blob, dtype="<f4", count=layers * dim, offset=off
        ).reshape(layers, dim)
        off += vec_bytes
    if off != len(blob):
        raise DataError(f"{path}: {len(blob) - off} trailing bytes")
    return FeatureCache(TAG_MODALITIES[tag], ids, vectors)


def validate_cache(path) -> dict:
    """Read and fully check a cache; returns its summary."""
    cache = read_cache(path)
    return {
        "modality": cache.modality,
        "items": len(cache.item_ids),
        "layers": cache.layers,
        "dim": cache.dim,
    }


# ---------------------------------------------------------------------------
# ground-truth affinity sidecar
# ---------------------------------------------------------------------------

def write_affinities(path, matrices):
    mats = [np.ascontiguousarray(m, dtype="<f4") for m in matrices]
    users, items = mats[0].shape
    if any(m.shape != (users, items) for m in mats):
        raise DataError("affinity matrices must share one shape")
    with open(path, "wb") as fh:
        fh.write(_XSMG_HEADER.pack(XSMG_MAGIC, XSMG_VERSION, len(mats), users, items))
        for m in mats:
            fh.write(m.tobytes())


def read_affinities(path) -> list:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _XSMG_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, windows, users, items = _XSMG_HEADER.unpack_from(blob, 0)
    if magic != XSMG_MAGIC or version != XSMG_VERSION:
        raise DataError(f"{path}: not an affinity sidecar")
    need = _XSMG_HEADER.size + windows * users * items * 4
    if len(blob) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(blob)}")
    out = []
    off = _XSMG_HEADER.size
    for _ in range(windows):
        out.append(np.frombuffer(blob, dtype="<f4", count=users * items,
                                 offset=off).reshape(users, items).copy())
        off += users * items * 4
    return out


# ---------------------------------------------------------------------------
# synthetic multimodal drift generator
# ---------------------------------------------------------------------------

@dataclass
class SynthResult:
    interactions: list
    caches: dict          # modality -> FeatureCache
    user_latents: np.ndarray  # (windows, users, k)
    item_latents: np.ndarray  # (items, k)
    affinities: list      # per window (users, items), over all items
    debut_window: np.ndarray  # (items,) first window each item can appear in


def _unit_rows(mat):
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    return mat / np.where(norms > 0, norms, 1.0)


def synthesize(seed, users, items, windows, drift, interactions_per_window,
               dim=32, depth=2, latent_dim=16, temperature=0.1,
               noise_base=0.25, initial_item_fraction=0.6) -> SynthResult:
    """Generate a drifting preference stream plus matching feature caches.

    Users hold latent taste vectors that blend toward fresh directions at
    rate `drift` each window; items hold fixed latents. Each modality's
    features are a frozen random projection of an overlapping half of the
    item latent, with noise that grows with layer index so deeper cached
    layers carry weaker signal. A slice of the catalog debuts in each
    window to recreate cold-start pressure.
    """
    if not (0.0 <= drift <= 1.0):
        raise DataError(f"drift {drift} outside [0, 1]")
    if users <= 0 or items <= 0 or windows < 2 or interactions_per_window <= 0:
        raise DataError("users, items, interactions must be positive; windows >= 2")

    rng_u = labeled_rng(seed, "synth/users")
    rng_i = labeled_rng(seed, "synth/items")
    rng_x = labeled_rng(seed, "synth/interactions")
    rng_f = labeled_rng(seed, "synth/features")

    item_lat = _unit_rows(rng_i.normal(size=(items, latent_dim)))

    user_lat = np.empty((windows, users, latent_dim))
    user_lat[0] = _unit_rows(rng_u.normal(size=(users, latent_dim)))
    for w in range(1, windows):
        fresh = _unit_rows(rng_u.normal(size=(users, latent_dim)))
        if drift == 0.0:
            user_lat[w] = user_lat[w - 1]
        else:
            user_lat[w] = _unit_rows((1.0 - drift) * user_lat[w - 1] + drift * fresh)

    # debut schedule: a head slice is live from the start, the rest arrives
    # round-robin over later windows
    order = rng_i.permutation(items)
    n_initial = max(1, int(round(items * initial_item_fraction)))
    debut = np.zeros(items, dtype=np.int64)
    late = order[n_initial:]
    for pos, idx in enumerate(late):
        debut[idx] = 1 + pos % (windows - 1)

    affinities = [user_lat[w] @ item_lat.T for w in range(windows)]

    interactions = []
    item_names = [f"i{j}" for j in range(items)]
    user_names = [f"u{j}" for j in range(users)]
    for w in range(windows):
        live = np.flatnonzero(debut <= w)
        logits = affinities[w][:, live] / temperature
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        who = rng_x.integers(0, users, size=interactions_per_window)
        for j, u in enumerate(who):
            pick = live[rng_x.choice(len(live), p=probs[u])]
            ts = w * interactions_per_window + j
            interactions.append(Interaction(user_names[u], item_names[pick], ts))

    # modality projections read overlapping halves of the item latent
    vis_sl = slice(0, latent_dim * 5 // 8)
    tex_sl = slice(latent_dim * 3 // 8, latent_dim)
    caches = {}
    for modality, sl in (("visual", vis_sl), ("textual", tex_sl)):
        part = item_lat[:, sl]
        width = part.shape[1]
        vecs = np.empty((items, depth + 1, dim), dtype=np.float32)
        for layer in range(depth + 1):
            proj = rng_f.normal(size=(dim, width)) / np.sqrt(width)
            clean = part @ proj.T
            noise = rng_f.normal(size=(items, dim)) / np.sqrt(dim)
            vecs[:, layer, :] = clean + noise_base * layer * noise
        caches[modality] = FeatureCache(modality, list(item_names), vecs)

    return SynthResult(interactions, caches, user_lat, item_lat, affinities, debut)


def write_synthetic_dataset(out_dir, result: SynthResult) -> dict:
    """Persist a SynthResult; returns the written paths."""
    import os

    paths = {
        "interactions": os.path.join(out_dir, "interactions.csv"),
        "visual": os.path.join(out_dir, "visual.xsmf"),
        "textual": os.path.join(out_dir, "textual.xsmf"),
        "affinities": os.path.join(out_dir, "affinities.xsmg"),
    }
    write_interactions(paths["interactions"], result.interactions)
    write_cache(paths["visual"], result.caches["visual"])
    write_cache(paths["textual"], result.caches["textual"])
    write_affinities(paths["affinities"], result.affinities)
    return paths
