"""Versioned binary model checkpoints.

Layout (integers little-endian):

    magic    b"XSMO"
    version  u8
    variant  u8 (index into model.VARIANTS)
    u32 x10: d, d_prime, d_embed, M, g, max_seq_len, blocks, heads,
             ffn_dim, n_side_nets
    per side net: modality tag u8, M x u32 per-layer expert counts
    then, in declared order:
      per side net, per layer: per expert (birth_window u32, frozen u8,
      w_down floats, w_up floats), then the router matrix
      fusion fc + bias
      every sequence-encoder parameter
    rng_len  u32, then the JSON-encoded dropout-generator state

Floats are float32 little-endian, so save -> load round-trips bit-exactly.
"""

import json
import struct

import numpy as np

from .data import MODALITY_TAGS, TAG_MODALITIES
from .errors import DataError
from .model import VARIANTS, ExpertNet, RecModel, Router, SideLayer, SideNetwork
from .numerics import Tensor
from .seqrec import SeqEncoder

XSMO_MAGIC = b"XSMO"
XSMO_VERSION = 1

_HEADER = struct.Struct("<4sBB10I")


def _write_array(fh, arr):
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.blob):
            raise DataError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def array(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).copy()


def save_model(path, model: RecModel):
    dims = model.dims
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(
            XSMO_MAGIC, XSMO_VERSION, VARIANTS.index(model.variant),
            dims["d"], dims["d_prime"], dims["d_embed"], dims["side_layers"],
            dims["group_factor"], dims["max_seq_len"], dims["blocks"],
            dims["heads"], dims["ffn_dim"], len(model.side_nets),
        ))
        for m in model.modalities:
            if m not in model.side_nets:
                continue
            net = model.side_nets[m]
            fh.write(struct.pack("<B", MODALITY_TAGS[m]))
            for layer in net.layers:
                fh.write(struct.pack("<I", layer.n_experts))
        for m in model.modalities:
            if m not in model.side_nets:
                continue
            for layer in model.side_nets[m].layers:
                for e in layer.experts:
                    fh.write(struct.pack("<IB", e.birth_window, 1 if e.frozen else 0))
                    _write_array(fh, e.w_down.data)
                    _write_array(fh, e.w_up.data)
                _write_array(fh, layer.router.weights.data)
        _write_array(fh, model.head.fc.data)
        _write_array(fh, model.head.bias.data)
        for t in model.encoder.parameters():
            _write_array(fh, t.data)
        rng_state = json.dumps(model._dropout_rng.bit_generator.state).encode("utf-8")
        fh.write(struct.pack("<I", len(rng_state)))
        fh.write(rng_state)


def load_model(path) -> RecModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size or blob[:4] != XSMO_MAGIC:
        raise DataError(f"{path}: not an XSMO checkpoint")
    (_, version, variant_idx, d, d_prime, d_embed, m_layers, g, max_len,
     blocks, heads, ffn_dim, n_nets) = _HEADER.unpack_from(blob, 0)
    if version != XSMO_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    variant = VARIANTS[variant_idx]
    rd = _Reader(blob, path)
    rd.off = _HEADER.size

    net_meta = []
    for _ in range(n_nets):
        tag = rd.u8()
        counts = [rd.u32() for _ in range(m_layers)]
        net_meta.append((TAG_MODALITIES[tag], counts))

    side_nets = {}
    for modality, counts in net_meta:
        layers = []
        for li, n_exp in enumerate(counts):
            experts = []
            for _ in range(n_exp):
                birth = rd.u32()
                frozen = rd.u8()
                w_down = Tensor(rd.array((d_prime, d)), requires_grad=not frozen)
                w_up = Tensor(rd.array((d, d_prime)), requires_grad=not frozen)
                w_down.name = f"{modality}/L{li}/down"
                w_up.name = f"{modality}/L{li}/up"
                experts.append(ExpertNet(w_down, w_up, birth_window=birth))
            router_w = Tensor(rd.array((n_exp + 1, d)), requires_grad=True)
            router_w.name = f"{modality}/L{li}/router"
            layers.append(SideLayer(experts, Router(router_w, li)))
        side_nets[modality] = SideNetwork(modality, layers, d, d_prime, g)

    modalities = tuple(m for m, _ in net_meta) or ("visual", "textual")
    from .model import FusionHead

    fc = Tensor(rd.array((d_embed, d * len(modalities))), requires_grad=True)
    fc.name = "fusion/fc"
    bias = Tensor(rd.array((d_embed,)), requires_grad=True)
    bias.name = "fusion/bias"
    head = FusionHead(fc, bias)

    encoder = SeqEncoder(d_embed, max_len, blocks=blocks, heads=heads, ffn_dim=ffn_dim)
    for t in encoder.parameters():
        t.data[...] = rd.array(t.data.shape)

    rng_len = rd.u32()
    rng_state = json.loads(rd.take(rng_len).decode("utf-8"))
    if rd.off != len(blob):
        raise DataError(f"{path}: {len(blob) - rd.off} trailing bytes")

    dims = {
        "d": d, "d_prime": d_prime, "d_embed": d_embed, "side_layers": m_layers,
        "group_factor": g, "max_seq_len": max_len, "blocks": blocks,
        "heads": heads, "ffn_dim": ffn_dim, "dropout": 0.1,
        "modalities": modalities,
        "include_backbone_in_utilization": False,
    }
    model = RecModel(variant, side_nets, head, encoder, dims)
    model._dropout_rng.bit_generator.state = rng_state
    return model
