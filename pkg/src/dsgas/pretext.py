"""Contrastive pretext tasks: view generation and NT-Xent instance losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numkernel as nk
from .graphio import Graph, GraphBatch, batch_graphs
from .numkernel import Tensor

VIEW_KINDS = ("node_drop", "edge_perturb", "feature_mask")
TASK_KINDS = ("graph_contrastive", "node_contrastive")
# Smooths the cosine near zero vectors (dead projection units) so gradients stay bounded.
NORM_FLOOR = 1e-4


@dataclass(frozen=True)
class ViewAugSpec:
    kind: str
    ratio: float

    def __post_init__(self):
        if self.kind not in VIEW_KINDS:
            raise ValueError(f"unknown view augmentation {self.kind!r}")
        if not 0 <= self.ratio < 1:
            raise ValueError(f"view ratio must lie in [0, 1), got {self.ratio}")

    @classmethod
    def parse(cls, text: str) -> "ViewAugSpec":
        kind, _, ratio = text.partition(":")
        return cls(kind.strip(), float(ratio or 0.0))

    def __str__(self) -> str:
        return f"{self.kind}:{self.ratio}"


def _drop_nodes(g: Graph, ratio: float, rng: np.random.Generator) -> Graph:
    n = g.num_nodes
    drop = min(math.ceil(ratio * n - 1e-9), n - 1)
    if drop <= 0:
        return g
    keep = np.sort(rng.choice(n, n - drop, replace=False))
    remap = np.full(n, -1)
    remap[keep] = np.arange(len(keep))
    e = remap[g.edges]
    e = e[(e >= 0).all(axis=1)]
    return Graph(g.x[keep], e, g.label, g.meta)


def _sample_non_edges(n: int, existing: set, count: int, rng: np.random.Generator) -> list:
    if count == 0:
        return []
    if n <= 256:
        iu, ju = np.triu_indices(n, 1)
        pool = [(int(i), int(j)) for i, j in zip(iu, ju) if (int(i), int(j)) not in existing]
        pick = rng.choice(len(pool), min(count, len(pool)), replace=False)
        return [pool[p] for p in pick]
    added: list = []
    taken = set(existing)
    while len(added) < count:
        i, j = (int(v) for v in rng.integers(0, n, 2))
        pair = (min(i, j), max(i, j))
        if i != j and pair not in taken:
            taken.add(pair)
            added.append(pair)
    return added


def _perturb_edges(g: Graph, ratio: float, rng: np.random.Generator) -> Graph:
    m = g.num_edges
    count = int(ratio * m)
    if count == 0:
        return g
    removed = rng.choice(m, count, replace=False)
    keep = np.ones(m, dtype=bool)
    keep[removed] = False
    kept = g.edges[keep]
    existing = {(int(a), int(b)) for a, b in kept}
    added = _sample_non_edges(g.num_nodes, existing, count, rng)
    edges = np.concatenate([kept, np.array(added, dtype=np.int64).reshape(-1, 2)])
    return Graph(g.x, edges, g.label, g.meta)


def _mask_features(g: Graph, ratio: float, rng: np.random.Generator) -> Graph:
    F = g.x.shape[1]
    count = int(ratio * F)
    if count == 0:
        return g
    x = g.x.copy()
    x[:, rng.choice(F, count, replace=False)] = 0.0
    return Graph(x, g.edges, g.label, g.meta)


_APPLY = {"node_drop": _drop_nodes, "edge_perturb": _perturb_edges, "feature_mask": _mask_features}


def augment_view(g: Graph, spec: ViewAugSpec, rng: np.random.Generator) -> Graph:
    return _APPLY[spec.kind](g, spec.ratio, rng)


def make_views(g: Graph, spec1: ViewAugSpec, spec2: ViewAugSpec, seed) -> tuple[Graph, Graph]:
    """Two label-free views of ``g``; ``seed`` may be an int or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return augment_view(g, spec1, rng), augment_view(g, spec2, rng)


def l2_normalize(x: Tensor, floor: float = NORM_FLOOR) -> Tensor:
    """Rows scaled by 1/sqrt(|x|² + floor); floor=0 gives the exact unit rows."""
    sq = nk.sum(x * x, axis=1, keepdims=True)
    return x / nk.sqrt(sq + floor if floor else sq)


def nt_xent(z1: Tensor, z2: Tensor, temperature: float = 0.5,
            negatives: np.ndarray | None = None, norm_floor: float = NORM_FLOOR) -> Tensor:
    """Per-instance NT-Xent: -log exp(s_ii/t) / Σ_{j≠i} exp(s_ij/t), s = cosine.

    ``negatives`` optionally restricts the candidate set j to a subset of rows of z2.
    """
    n = z1.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 instances (min batch 2)")
    a, b = l2_normalize(z1, norm_floor), l2_normalize(z2, norm_floor)
    pos = nk.sum(a * b, axis=1) * (1.0 / temperature)
    if negatives is None:
        sim = (a @ b.T) * (1.0 / temperature)
        block = np.where(np.eye(n, dtype=bool), -np.inf, 0.0)
    else:
        negatives = np.asarray(negatives, dtype=np.int64)
        sim = (a @ nk.gather_rows(b, negatives).T) * (1.0 / temperature)
        block = np.where(negatives[None, :] == np.arange(n)[:, None], -np.inf, 0.0)
    return nk.logsumexp_rows(sim + Tensor(block)) - pos


def projection_head(d: int, rng: np.random.Generator) -> dict[str, Tensor]:
    from .ops import glorot
    return {"W1": glorot(rng, d, d), "b1": Tensor(np.zeros(d), requires_grad=True),
            "W2": glorot(rng, d, d), "b2": Tensor(np.zeros(d), requires_grad=True)}


@dataclass
class PretextTask:
    kind: str = "graph_contrastive"
    view1: ViewAugSpec = ViewAugSpec("node_drop", 0.2)
    view2: ViewAugSpec = ViewAugSpec("edge_perturb", 0.2)
    temperature: float = 0.5
    num_negatives: int = 256
    head: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown pretext task {self.kind!r}")
        if self.temperature <= 0:
            raise ValueError("NT-Xent temperature must be positive")

    @classmethod
    def default(cls, kind: str, d: int, seed: int = 0, **kw) -> "PretextTask":
        if kind == "node_contrastive":
            kw.setdefault("view1", ViewAugSpec("edge_perturb", 0.2))
            kw.setdefault("view2", ViewAugSpec("feature_mask", 0.2))
        return cls(kind=kind, head=projection_head(d, np.random.default_rng(seed)), **kw)

    def params(self) -> dict[str, Tensor]:
        return {f"head.{k}": v for k, v in self.head.items()}

    def project(self, z: Tensor) -> Tensor:
        h = self.head
        return nk.relu(z @ h["W1"] + h["b1"]) @ h["W2"] + h["b2"]

    def views(self, graphs: Sequence[Graph], rng: np.random.Generator) -> tuple[GraphBatch, GraphBatch]:
        pairs = [make_views(g, self.view1, self.view2, rng) for g in graphs]
        return batch_graphs([p[0] for p in pairs]), batch_graphs([p[1] for p in pairs])

    def negatives(self, n: int, rng: np.random.Generator) -> np.ndarray | None:
        if self.kind == "graph_contrastive" or n <= self.num_negatives:
            return None
        return np.sort(rng.choice(n, self.num_negatives, replace=False))

    def instance_loss(self, e1: Tensor, e2: Tensor, negatives: np.ndarray | None = None) -> Tensor:
        return nt_xent(self.project(e1), self.project(e2), self.temperature, negatives)


def pretext_loss(task: PretextTask, embed_fn: Callable[[GraphBatch], Tensor],
                 graphs: Sequence[Graph], seed) -> Tensor:
    """Loss vector l(f, G_i) for one architecture path ``embed_fn``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    b1, b2 = task.views(graphs, rng)
    e1, e2 = embed_fn(b1), embed_fn(b2)
    return task.instance_loss(e1, e2, task.negatives(e1.shape[0], rng))
