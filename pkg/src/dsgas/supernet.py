"""K-factor disentangled super-network over the shared operation pool."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkernel as nk
from . import ops
from .graphio import GraphBatch
from .numkernel import Tensor

THETA_INIT_SCALE = 1e-3
NORM_EPS = 1e-5


@dataclass(frozen=True)
class Slot:
    name: str
    category: str
    candidates: tuple[str, ...]
    layer: int


@dataclass
class SupernetSpec:
    in_dim: int
    hidden: int = 32
    num_layers: int = 3
    num_factors: int = 4
    task: str = "graph_level"
    norm: str = "batch"
    agg_ops: tuple[str, ...] = ops.AGG_OPS
    pool_ops: tuple[str, ...] = ops.POOL_OPS
    merge_ops: tuple[str, ...] = ops.MERGE_OPS

    def __post_init__(self):
        if self.num_factors < 1 or self.num_layers < 1 or self.hidden < 1 or self.in_dim < 1:
            raise ValueError("in_dim, hidden, num_layers and num_factors must be positive")
        if self.task not in ("graph_level", "node_level"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.norm not in ("batch", "layer", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        for group, cat in ((self.agg_ops, "Agg"), (self.pool_ops, "Pool"), (self.merge_ops, "Merge")):
            if not group or any(ops.category(k) != cat for k in group):
                raise ValueError(f"bad {cat} candidate list {group}")
        self.agg_ops, self.pool_ops, self.merge_ops = (
            tuple(self.agg_ops), tuple(self.pool_ops), tuple(self.merge_ops))

    def slots(self) -> list[Slot]:
        out = [Slot(f"agg{l}", "Agg", self.agg_ops, l) for l in range(self.num_layers)]
        if self.task == "graph_level":
            out += [Slot(f"pool{l}", "Pool", self.pool_ops, l) for l in range(self.num_layers)]
            out.append(Slot("merge", "Merge", self.merge_ops, self.num_layers))
        return out


@dataclass
class Architecture:
    """Discrete per-factor operation choice for every slot."""
    slots: list[Slot]
    choices: list[list[str]]  # choices[k][s]

    @property
    def num_factors(self) -> int:
        return len(self.choices)

    def to_dict(self) -> dict:
        return {"slots": [s.name for s in self.slots],
                "factors": [dict(zip((s.name for s in self.slots), c)) for c in self.choices]}

    def one_hot_alphas(self) -> dict[str, np.ndarray]:
        out = {}
        for s_idx, slot in enumerate(self.slots):
            mat = np.zeros((self.num_factors, len(slot.candidates)))
            for k in range(self.num_factors):
                mat[k, slot.candidates.index(self.choices[k][s_idx])] = 1.0
            out[slot.name] = mat
        return out


@dataclass
class FactorOutput:
    factors: list[Tensor]  # K tensors of N × d

    @property
    def Z(self) -> Tensor:
        return self.factors[0] if len(self.factors) == 1 else nk.concat(self.factors, axis=1)


@dataclass
class ForwardContext:
    """Transient forward-time perturbations; parameters themselves are never touched."""
    temperature: float = 1.0
    weight_noise: dict[str, np.ndarray] = field(default_factory=dict)
    dropout_rate: float = 0.0
    rng: np.random.Generator | None = None

    def weight(self, name: str, t: Tensor) -> Tensor:
        noise = self.weight_noise.get(name)
        return t if noise is None else t + Tensor(noise)

    def dropout(self, h: Tensor) -> Tensor:
        if self.dropout_rate <= 0:
            return h
        keep = self.rng.random(h.shape) >= self.dropout_rate
        return h * Tensor(keep.astype(np.float64))


def mixed_alpha(theta: Tensor, temperature: float = 1.0) -> Tensor:
    """Per-factor operation probabilities softmax(θ_k / τ)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return nk.softmax_rows(theta if theta.ndim == 2 else nk.reshape(theta, (1, -1)), temperature)


def mix(alpha: Tensor, k: int, outputs: Sequence[Tensor]) -> Tensor:
    """Σ_i α[k, i] · outputs[i]."""
    return nk.combine(alpha, k, outputs)


class SuperNet:
    def __init__(self, spec: SupernetSpec, seed: int = 0):
        self.spec = spec
        self.slots = spec.slots()
        rng = np.random.default_rng(seed)
        d, K = spec.hidden, spec.num_factors
        self.op_weights: dict[str, dict[str, ops.Weights]] = {}
        for slot in self.slots:
            d_in = spec.in_dim if (slot.category == "Agg" and slot.layer == 0) else d
            self.op_weights[slot.name] = {
                op: ops.init_weights(op, d_in, d, rng, num_layers=spec.num_layers)
                for op in slot.candidates}
        self.norm_weights: dict[str, Tensor] = {}
        if spec.norm != "none":
            for l in range(spec.num_layers):
                self.norm_weights[f"norm{l}.gamma"] = Tensor(np.ones(d), requires_grad=True)
                self.norm_weights[f"norm{l}.beta"] = Tensor(np.zeros(d), requires_grad=True)
        self.theta: dict[str, Tensor] = {
            slot.name: Tensor(THETA_INIT_SCALE * rng.standard_normal((K, len(slot.candidates))),
                              requires_grad=True)
            for slot in self.slots}
        self.prototypes = Tensor(rng.standard_normal((K, 2 * d)), requires_grad=True)
        width = sum(len(s.candidates) for s in self.slots)
        self.arch_encoder = ops.glorot(rng, width, d)

    # -------------------------------------------------------------- parameter groups
    @property
    def num_factors(self) -> int:
        return self.spec.num_factors

    def weight_params(self) -> dict[str, Tensor]:
        out = {f"{s}.{op}.{n}": t for s, by_op in self.op_weights.items()
               for op, ws in by_op.items() for n, t in ws.items()}
        out.update(self.norm_weights)
        return out

    def arch_params(self) -> dict[str, Tensor]:
        return {f"theta.{s}": t for s, t in self.theta.items()}

    def factor_params(self) -> dict[str, Tensor]:
        return {"prototypes": self.prototypes, "arch_encoder": self.arch_encoder}

    def named_tensors(self) -> dict[str, Tensor]:
        return {**self.weight_params(), **self.arch_params(), **self.factor_params()}

    def num_weight_parameters(self) -> int:
        return int(sum(t.data.size for t in self.weight_params().values()))

    # -------------------------------------------------------------- forward
    def alphas(self, temperature: float = 1.0) -> dict[str, Tensor]:
        return {name: mixed_alpha(theta, temperature) for name, theta in self.theta.items()}

    def _weights(self, slot: str, op: str, ctx: ForwardContext | None) -> ops.Weights:
        ws = self.op_weights[slot][op]
        if ctx is None or not ctx.weight_noise:
            return ws
        return {n: ctx.weight(f"{slot}.{op}.{n}", t) for n, t in ws.items()}

    def _norm(self, h: Tensor, layer: int, ctx: ForwardContext | None) -> Tensor:
        if self.spec.norm == "none":
            return h
        gamma = self.norm_weights[f"norm{layer}.gamma"]
        beta = self.norm_weights[f"norm{layer}.beta"]
        if ctx is not None:
            gamma = ctx.weight(f"norm{layer}.gamma", gamma)
            beta = ctx.weight(f"norm{layer}.beta", beta)
        axis = 0 if self.spec.norm == "batch" else 1
        centered = h - nk.mean(h, axis=axis, keepdims=True)
        var = nk.mean(centered * centered, axis=axis, keepdims=True)
        return centered / nk.sqrt(var + NORM_EPS) * gamma + beta

    def forward(self, batch: GraphBatch, ctx: ForwardContext | None = None,
                alphas: dict[str, Tensor | np.ndarray] | None = None) -> FactorOutput:
        spec = self.spec
        if batch.x.shape[1] != spec.in_dim:
            raise ValueError(f"batch has {batch.x.shape[1]} features, supernet expects {spec.in_dim}")
        if alphas is None:
            alphas = self.alphas(1.0 if ctx is None else ctx.temperature)
        else:
            alphas = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in alphas.items()}
        K = spec.num_factors
        hidden = [batch.x] * K
        layer_outs: list[list[Tensor]] = [[] for _ in range(K)]
        for l in range(spec.num_layers):
            slot = f"agg{l}"
            cache: dict[int, list[Tensor]] = {}
            alpha = alphas[slot]
            for k in range(K):
                key = id(hidden[k])
                if key not in cache:
                    cache[key] = [ops.apply_agg(op, hidden[k], batch.adj, self._weights(slot, op, ctx))
                                  for op in spec.agg_ops]
                h = mix(alpha, k, cache[key])
                if ctx is not None:
                    h = ctx.dropout(h)
                layer_outs[k].append(self._norm(nk.relu(h), l, ctx))
            hidden = [outs[-1] for outs in layer_outs]
        if spec.task == "node_level":
            return FactorOutput(hidden)

        factors = []
        for k in range(K):
            pooled = []
            for l, h in enumerate(layer_outs[k]):
                slot = f"pool{l}"
                cands = [ops.apply_pool(op, h, batch.segments, self._weights(slot, op, ctx))
                         for op in spec.pool_ops]
                pooled.append(mix(alphas[slot], k, cands))
            cands = [ops.apply_merge(op, pooled, self._weights("merge", op, ctx))
                     for op in spec.merge_ops]
            factors.append(mix(alphas["merge"], k, cands))
        return FactorOutput(factors)

    def embed(self, batch: GraphBatch) -> np.ndarray:
        """Concatenated representation Z as a plain array (no tape)."""
        return self.forward(batch).Z.data.copy()

    # -------------------------------------------------------------- architecture views
    def encode_arch(self, alphas: dict[str, Tensor] | None = None) -> Tensor:
        return encode_arch([(alphas or self.alphas())[s.name] for s in self.slots], self.arch_encoder)

    def discretize(self) -> Architecture:
        K = self.spec.num_factors
        choices = [[s.candidates[int(np.argmax(self.theta[s.name].data[k]))] for s in self.slots]
                   for k in range(K)]
        return Architecture(list(self.slots), choices)

    def alpha_matrix(self, k: int) -> np.ndarray:
        """Factor k's α over all slots, flattened."""
        return np.concatenate([a.data[k] for a in self.alphas().values()])


def encode_arch(slot_alphas: Sequence[Tensor], encoder: Tensor) -> Tensor:
    """Flatten each factor's α across slots and map it linearly to the encoding space."""
    flat = slot_alphas[0] if len(slot_alphas) == 1 else nk.concat(list(slot_alphas), axis=1)
    return flat @ encoder
