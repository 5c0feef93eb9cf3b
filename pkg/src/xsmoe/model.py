"""Expandable side mixture-of-experts over cached backbone features.

Each modality gets an independent stack of side layers. A side layer holds
N feed-forward experts plus a router whose softmax mixes the frozen
backbone feature with every expert's output. At window boundaries the
layer freezes its experts and appends a fresh trainable one (warm-started
at the mean of its predecessors); underutilized experts are pruned based
on their share of the mixed output norm.
"""

import hashlib
import itertools

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ContractError, DataError, ShapeError
from .numerics import Tensor
from .rng import labeled_rng
from .seqrec import SeqEncoder

VARIANTS = ("xsmoe", "static", "noft", "visual", "textual")
DYNAMIC_VARIANTS = ("xsmoe", "visual", "textual")

_uid_counter = itertools.count(1)

_INIT_STD = 0.02


class ExpertNet:
    """Down-projection, exact-erf GELU, up-projection, skip connection."""

    def __init__(self, w_down: Tensor, w_up: Tensor, birth_window: int = 0):
        if w_down.ndim != 2 or w_up.ndim != 2 or w_down.shape != w_up.shape[::-1]:
            raise ShapeError(
                f"expert weights must be (d',d) and (d,d'), got {w_down.shape}/{w_up.shape}"
            )
        self.w_down = w_down
        self.w_up = w_up
        self.birth_window = int(birth_window)
        self.uid = next(_uid_counter)

    @property
    def frozen(self) -> bool:
        return not self.w_down.requires_grad

    def freeze(self):
        self.w_down.requires_grad = False
        self.w_up.requires_grad = False

    def forward(self, h: Tensor) -> Tensor:
        a = nm.linear(h, self.w_down)
        z = nm.linear(nm.gelu(a), self.w_up)
        return nm.add(z, h)

    def tensors(self):
        return [self.w_down, self.w_up]

    def byte_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.w_down.data).tobytes())
        digest.update(np.ascontiguousarray(self.w_up.data).tobytes())
        return digest.hexdigest()


class Router:
    """Linear map from the incoming hidden state to N+1 mixture logits.

    Row 0 is the backbone slot and is never removed; row j >= 1 belongs to
    expert j-1 and is created/removed together with it.
    """

    def __init__(self, weights: Tensor, layer_index: int):
        self.weights = weights
        self.layer_index = int(layer_index)

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    def mixture_weights(self, h: Tensor) -> Tensor:
        return nm.softmax(nm.linear(h, self.weights), axis=-1)

    def append_row(self):
        new = np.zeros((1, self.weights.shape[1]), dtype=self.weights.data.dtype)
        merged = Tensor(np.concatenate([self.weights.data, new], axis=0))
        merged.requires_grad = self.weights.requires_grad
        merged.name = self.weights.name
        self.weights = merged

    def remove_row(self, expert_index: int):
        merged = Tensor(np.delete(self.weights.data, expert_index + 1, axis=0))
        merged.requires_grad = self.weights.requires_grad
        merged.name = self.weights.name
        self.weights = merged


class SideLayer:
    """N experts plus a router, with utilization accounting for pruning."""

    def __init__(self, experts, router: Router, include_backbone_in_utilization=False):
        if not experts:
            raise ContractError("a side layer needs at least one expert")
        self.experts = list(experts)
        self.router = router
        self.include_backbone_in_utilization = bool(include_backbone_in_utilization)
        self.util_num = np.zeros(len(self.experts), dtype=np.float64)
        self.util_backbone = 0.0
        self.util_count = 0
        self.util_armed = False
        self.degenerate_windows = 0
        self._check_structure()

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def _check_structure(self):
        if self.router.rows != self.n_experts + 1:
            raise ContractError(
                f"router has {self.router.rows} rows for {self.n_experts} experts"
            )
        if len(self.util_num) != self.n_experts:
            raise ContractError("utilization accumulator out of sync with experts")

    def forward(self, h_prev: Tensor, backbone: Tensor) -> Tensor:
        """alpha[0]*backbone + sum_j alpha[j]*expert_j(h_prev)."""
        self._check_structure()
        alpha = self.router.mixture_weights(h_prev)
        outs = [e.forward(h_prev) for e in self.experts]
        mixed = nm.mul(nm.slice_axis(alpha, 1, 0, 1), backbone)
        for j, z in enumerate(outs):
            mixed = nm.add(mixed, nm.mul(nm.slice_axis(alpha, 1, j + 1, j + 2), z))
        if self.util_armed:
            a = alpha.data
            for j, z in enumerate(outs):
                norms = np.linalg.norm(z.data.astype(np.float64), axis=-1)
                self.util_num[j] += float(np.sum(a[:, j + 1] * norms))
            if self.include_backbone_in_utilization:
                bn = np.linalg.norm(backbone.data.astype(np.float64), axis=-1)
                self.util_backbone += float(np.sum(a[:, 0] * bn))
            self.util_count += h_prev.shape[0]
        return mixed

    def arm_utilization(self, flag: bool):
        self.util_armed = bool(flag)

    def reset_utilization(self):
        self.util_num = np.zeros(self.n_experts, dtype=np.float64)
        self.util_backbone = 0.0
        self.util_count = 0

    def finalize_utilization(self) -> np.ndarray:
        """Per-expert share of accumulated weighted-output norm; resets counters."""
        if self.util_count <= 0:
            raise ContractError("finalize_utilization before any armed forward pass")
        total = float(self.util_num.sum())
        if self.include_backbone_in_utilization:
            total += self.util_backbone
        if total <= 0.0:
            self.degenerate_windows += 1
            r = np.full(self.n_experts, 1.0 / self.n_experts)
        else:
            r = self.util_num / total
        self.reset_utilization()
        return r

    def prune(self, r: np.ndarray, tau: float):
        """Remove the single lowest-utilization expert if it falls below tau.

        Never empties the layer; ties break toward the lowest index. Returns
        the removed index or None.
        """
        if not (0.0 <= tau <= 1.0):
            raise ConfigError(f"pruning threshold {tau} outside [0, 1]")
        if len(r) != self.n_experts:
            raise ContractError("utilization vector length does not match experts")
        if self.n_experts <= 1:
            return None
        idx = int(np.argmin(r))
        if r[idx] >= tau:
            return None
        del self.experts[idx]
        self.router.remove_row(idx)
        self.util_num = np.zeros(self.n_experts, dtype=np.float64)
        self._check_structure()
        return idx

    def expand(self, window: int) -> ExpertNet:
        """Freeze every expert, append the mean-initialized trainable one."""
        down = np.mean([e.w_down.data for e in self.experts], axis=0)
        up = np.mean([e.w_up.data for e in self.experts], axis=0)
        for e in self.experts:
            e.freeze()
        fresh = ExpertNet(
            Tensor(down.copy(), requires_grad=True),
            Tensor(up.copy(), requires_grad=True),
            birth_window=window,
        )
        self.experts.append(fresh)
        self.router.append_row()
        self.util_num = np.append(self.util_num, 0.0)
        self._check_structure()
        return fresh

    def tensors(self):
        out = []
        for e in self.experts:
            out.extend(e.tensors())
        out.append(self.router.weights)
        return out


class SideNetwork:
    """M side layers for one modality, reading an (M+1)-deep feature stack."""

    def __init__(self, modality, layers, dim, bottleneck, group_factor=1):
        self.modality = modality
        self.layers = list(layers)
        self.dim = int(dim)
        self.bottleneck = int(bottleneck)
        self.group_factor = int(group_factor)

    @classmethod
    def build(cls, modality, dim, bottleneck, depth, rng, group_factor=1,
              include_backbone_in_utilization=False):
        layers = []
        for i in range(depth):
            w_down = Tensor(
                rng.normal(0.0, _INIT_STD, size=(bottleneck, dim)), requires_grad=True
            )
            w_up = Tensor(
                rng.normal(0.0, _INIT_STD, size=(dim, bottleneck)), requires_grad=True
            )
            w_down.name = f"{modality}/L{i}/expert0/down"
            w_up.name = f"{modality}/L{i}/expert0/up"
            router_w = Tensor(np.zeros((2, dim)), requires_grad=True)
            router_w.name = f"{modality}/L{i}/router"
            layers.append(
                SideLayer(
                    [ExpertNet(w_down, w_up, birth_window=0)],
                    Router(router_w, i),
                    include_backbone_in_utilization,
                )
            )
        return cls(modality, layers, dim, bottleneck, group_factor)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def forward(self, stack: np.ndarray) -> Tensor:
        """stack: (n, M+1, d) cached features l_0 .. l_M for n items."""
        if stack.ndim != 3 or stack.shape[1] != self.depth + 1 or stack.shape[2] != self.dim:
            raise DataError(
                f"{self.modality} feature stack {stack.shape} does not match "
                f"M={self.depth}, d={self.dim}"
            )
        h = Tensor(stack[:, 0, :])
        for i, layer in enumerate(self.layers):
            h = layer.forward(h, Tensor(stack[:, i + 1, :]))
        return h

    def expand(self, window: int):
        return [layer.expand(window) for layer in self.layers]

    def arm_utilization(self, flag: bool):
        for layer in self.layers:
            layer.arm_utilization(flag)

    def reset_utilization(self):
        for layer in self.layers:
            layer.reset_utilization()

    def expert_census(self):
        return [layer.n_experts for layer in self.layers]

    def param_counts(self):
        """Expert + router scalars, total and currently trainable."""
        total = 0
        trainable = 0
        for layer in self.layers:
            for t in layer.tensors():
                total += t.size
                if t.requires_grad:
                    trainable += t.size
        return {"total": int(total), "trainable": int(trainable)}

    def tensors(self):
        out = []
        for layer in self.layers:
            out.extend(layer.tensors())
        return out


class FusionHead:
    """Single fully-connected layer over the concatenated modality vectors."""

    def __init__(self, fc: Tensor, bias: Tensor):
        self.fc = fc
        self.bias = bias

    @classmethod
    def build(cls, out_dim, in_dim, rng):
        bound = np.sqrt(6.0 / (in_dim + out_dim))
        fc = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)), requires_grad=True)
        fc.name = "fusion/fc"
        bias = Tensor(np.zeros(out_dim), requires_grad=True)
        bias.name = "fusion/bias"
        return cls(fc, bias)

    def forward(self, *parts):
        x = parts[0] if len(parts) == 1 else nm.concat(list(parts), axis=1)
        if x.shape[-1] != self.fc.shape[1]:
            raise ShapeError(
                f"fusion head expects input dim {self.fc.shape[1]}, got {x.shape[-1]}"
            )
        return nm.add(nm.linear(x, self.fc), self.bias)

    def tensors(self):
        return [self.fc, self.bias]


class RecModel:
    """Side networks per modality + fusion head + sequence encoder."""

    def __init__(self, variant, side_nets, head, encoder, dims):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        self.variant = variant
        self.side_nets = dict(side_nets)  # modality -> SideNetwork ({} for noft)
        self.head = head
        self.encoder = encoder
        self.dims = dict(dims)  # d, d_prime, d_embed, side_layers, group_factor, ...
        self.modalities = self.dims["modalities"]
        # freeze-time byte hashes keyed by expert uid, for retention audits
        self.freeze_log = {}
        self._frozen_meta = {}
        self._dropout_rng = labeled_rng(0, "dropout")

    @classmethod
    def build(cls, variant, seed, d, d_prime, d_embed, side_layers, group_factor=1,
              max_seq_len=10, blocks=2, heads=2, ffn_dim=0, dropout=0.1,
              include_backbone_in_utilization=False):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        modalities = {
            "visual": ("visual",),
            "textual": ("textual",),
        }.get(variant, ("visual", "textual"))
        side_nets = {}
        if variant != "noft":
            for m in modalities:
                side_nets[m] = SideNetwork.build(
                    m, d, d_prime, side_layers, labeled_rng(seed, f"side/{m}"),
                    group_factor, include_backbone_in_utilization,
                )
        head = FusionHead.build(d_embed, d * len(modalities), labeled_rng(seed, "fusion"))
        encoder = SeqEncoder(
            d_embed, max_seq_len, blocks=blocks, heads=heads,
            ffn_dim=(ffn_dim or d_embed), dropout_rate=dropout,
            rng=labeled_rng(seed, "encoder"),
        )
        dims = {
            "d": d, "d_prime": d_prime, "d_embed": d_embed,
            "side_layers": side_layers, "group_factor": group_factor,
            "max_seq_len": max_seq_len, "blocks": blocks, "heads": heads,
            "ffn_dim": ffn_dim or d_embed, "dropout": dropout,
            "modalities": modalities,
            "include_backbone_in_utilization": include_backbone_in_utilization,
        }
        model = cls(variant, side_nets, head, encoder, dims)
        model._dropout_rng = labeled_rng(seed, "dropout")
        return model

    # -- forward ------------------------------------------------------------

    def item_embeddings(self, stacks, training=False):
        """Map per-modality feature stacks {mod: (n, M+1, d)} to (n, d_embed)."""
        parts = []
        for m in self.modalities:
            if m not in stacks:
                raise DataError(f"missing {m} feature stack")
            if self.variant == "noft":
                parts.append(Tensor(stacks[m][:, -1, :]))
            else:
                parts.append(self.side_nets[m].forward(stacks[m]))
        return self.head.forward(*parts)

    def encode_users(self, item_matrix, seqs, training=False):
        rng = self._dropout_rng if training else None
        return self.encoder.encode(item_matrix, seqs, training=training, rng=rng)

    # -- structural dynamics --------------------------------------------------

    def expand(self, window: int):
        """Freeze current experts, add one trainable expert per layer."""
        if self.variant not in DYNAMIC_VARIANTS:
            raise ContractError(f"expand called on variant {self.variant!r}")
        for net in self.side_nets.values():
            net.expand(window)
        self._log_frozen()

    def _log_frozen(self):
        for m, net in self.side_nets.items():
            for li, layer in enumerate(net.layers):
                for e in layer.experts:
                    if e.frozen and e.uid not in self.freeze_log:
                        self.freeze_log[e.uid] = e.byte_hash()
                        self._frozen_meta[e.uid] = (m, li, e.birth_window)

    def finalize_and_prune(self, tau: float):
        """Apply the utilization rule per layer; returns prune event dicts."""
        events = []
        for m, net in self.side_nets.items():
            for li, layer in enumerate(net.layers):
                r = layer.finalize_utilization()
                before = list(layer.experts)
                removed = layer.prune(r, tau)
                if removed is not None:
                    uid = before[removed].uid
                    self.freeze_log.pop(uid, None)
                    self._frozen_meta.pop(uid, None)
                events.append({
                    "modality": m,
                    "layer": li,
                    "utilization": [float(x) for x in r],
                    "removed_index": removed,
                })
        return events

    def arm_utilization(self, flag: bool):
        for net in self.side_nets.values():
            net.arm_utilization(flag)

    def utilization_samples(self) -> int:
        return sum(layer.util_count
                   for net in self.side_nets.values() for layer in net.layers)

    def frozen_expert_hashes(self):
        """Current byte hashes of every live frozen expert, keyed by uid."""
        out = {}
        for net in self.side_nets.values():
            for layer in net.layers:
                for e in layer.experts:
                    if e.frozen:
                        out[e.uid] = e.byte_hash()
        return out

    # -- parameters -----------------------------------------------------------

    def all_tensors(self):
        out = []
        for m in self.modalities:
            if m in self.side_nets:
                out.extend(self.side_nets[m].tensors())
        out.extend(self.head.tensors())
        out.extend(self.encoder.parameters())
        return out

    def parameters(self):
        return [t for t in self.all_tensors() if t.requires_grad]

    def param_report(self):
        side = {m: net.param_counts() for m, net in self.side_nets.items()}
        full_total = sum(t.size for t in self.all_tensors())
        full_trainable = sum(t.size for t in self.parameters())
        return {
            "side": side,
            "side_total": sum(c["total"] for c in side.values()),
            "side_trainable": sum(c["trainable"] for c in side.values()),
            "full_total": int(full_total),
            "full_trainable": int(full_trainable),
        }

    def expert_census(self):
        return {m: net.expert_census() for m, net in self.side_nets.items()}

    # -- snapshots for best-epoch restore --------------------------------------

    def snapshot(self):
        return [t.data.copy() for t in self.all_tensors()]

    def restore(self, snap):
        tensors = self.all_tensors()
        if len(snap) != len(tensors):
            raise ContractError("snapshot does not match current model structure")
        for t, arr in zip(tensors, snap):
            if t.data.shape != arr.shape:
                raise ContractError("snapshot tensor shape mismatch")
            t.data[...] = arr
