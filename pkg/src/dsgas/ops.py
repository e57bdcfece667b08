"""Candidate operations: node aggregation, graph pooling and layer merging."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numkernel as nk
from .numkernel import Segments, SparseAdj, Tensor

AGG_OPS = ("GCN", "GAT", "GIN", "GraphSage", "GraphConv", "MLP")
POOL_OPS = ("MeanPool", "MaxPool", "SumPool", "AttentionPool")
MERGE_OPS = ("MaxMerge", "ConcatMerge", "SumMerge", "MeanMerge")

CATEGORIES = {"Agg": AGG_OPS, "Pool": POOL_OPS, "Merge": MERGE_OPS}

GAT_SLOPE = 0.2

Weights = dict[str, Tensor]


def category(kind: str) -> str:
    for cat, members in CATEGORIES.items():
        if kind in members:
            return cat
    raise ValueError(f"unknown operation {kind!r}")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_weights(kind: str, d_in: int, d_out: int, rng: np.random.Generator,
                 num_layers: int = 1) -> Weights:
    """Fresh learnable tensors for one candidate operation."""
    cat = category(kind)
    if kind in ("GCN", "MLP"):
        return {"W": glorot(rng, d_in, d_out), "b": _zeros(d_out)}
    if kind == "GAT":
        return {"W": glorot(rng, d_in, d_out),
                "a_src": glorot(rng, d_out, 1, shape=(d_out,)),
                "a_dst": glorot(rng, d_out, 1, shape=(d_out,)),
                "b": _zeros(d_out)}
    if kind == "GIN":
        return {"eps": _zeros(1),
                "W1": glorot(rng, d_in, d_out), "b1": _zeros(d_out),
                "W2": glorot(rng, d_out, d_out), "b2": _zeros(d_out)}
    if kind in ("GraphSage", "GraphConv"):
        return {"W_self": glorot(rng, d_in, d_out), "W_neigh": glorot(rng, d_in, d_out),
                "b": _zeros(d_out)}
    if kind == "AttentionPool":
        return {"a": glorot(rng, d_in, 1, shape=(d_in,))}
    if kind == "ConcatMerge" and num_layers > 1:
        return {"P": glorot(rng, num_layers * d_in, d_out)}
    if cat in ("Pool", "Merge"):
        return {}
    raise AssertionError(kind)


# ---------------------------------------------------------------- derived adjacency

def gcn_adjacency(adj: SparseAdj) -> SparseAdj:
    """D̃^{-1/2}(A+I)D̃^{-1/2} as a weighted edge list."""
    if "gcn" not in adj.derived:
        loops = np.arange(adj.num_nodes)
        edges = np.concatenate([adj.edges, np.stack([loops, loops], 1)])
        tilde = SparseAdj(adj.num_nodes, edges)
        deg = tilde.in_degree().astype(np.float64)
        inv = 1.0 / np.sqrt(deg)
        adj.derived["gcn"] = SparseAdj(adj.num_nodes, tilde.edges, inv[tilde.src] * inv[tilde.dst])
    return adj.derived["gcn"]


def isolated_loop_adjacency(adj: SparseAdj) -> SparseAdj:
    """The graph plus a self-loop on every node without incoming edges."""
    if "isolated_loops" not in adj.derived:
        lonely = np.flatnonzero(adj.in_degree() == 0)
        edges = np.concatenate([adj.edges, np.stack([lonely, lonely], 1)])
        adj.derived["isolated_loops"] = SparseAdj(adj.num_nodes, edges)
    return adj.derived["isolated_loops"]


def mean_adjacency(adj: SparseAdj) -> SparseAdj:
    if "mean" not in adj.derived:
        base = isolated_loop_adjacency(adj)
        deg = base.in_degree().astype(np.float64)
        adj.derived["mean"] = SparseAdj(adj.num_nodes, base.edges, 1.0 / deg[base.dst])
    return adj.derived["mean"]


def _dst_segments(adj: SparseAdj) -> Segments:
    if "dst_segments" not in adj.derived:
        adj.derived["dst_segments"] = Segments(adj.dst, adj.num_nodes)
    return adj.derived["dst_segments"]


# ---------------------------------------------------------------- operations

def apply_agg(kind: str, H: Tensor, adj: SparseAdj, w: Weights) -> Tensor:
    if category(kind) != "Agg":
        raise ValueError(f"{kind} is not an aggregation operation")
    if kind == "MLP":
        return H @ w["W"] + w["b"]
    if kind == "GCN":
        return nk.spmm(gcn_adjacency(adj), H @ w["W"]) + w["b"]
    if kind == "GraphConv":
        return H @ w["W_self"] + nk.spmm(adj, H) @ w["W_neigh"] + w["b"]
    if kind == "GraphSage":
        return H @ w["W_self"] + nk.spmm(mean_adjacency(adj), H) @ w["W_neigh"] + w["b"]
    if kind == "GIN":
        mixed = H * (w["eps"] + 1.0) + nk.spmm(adj, H)
        hidden = nk.relu(mixed @ w["W1"] + w["b1"])
        return hidden @ w["W2"] + w["b2"]
    if kind == "GAT":
        att_adj = isolated_loop_adjacency(adj)
        Wh = H @ w["W"]
        s_src = nk.matmul(Wh, nk.reshape(w["a_src"], (-1, 1)))
        s_dst = nk.matmul(Wh, nk.reshape(w["a_dst"], (-1, 1)))
        e = nk.leaky_relu(nk.gather_rows(s_src, att_adj.src) + nk.gather_rows(s_dst, att_adj.dst),
                          GAT_SLOPE)
        coef = nk.segment_softmax(e, _dst_segments(att_adj))
        return nk.spmm(att_adj, Wh, coef) + w["b"]
    raise AssertionError(kind)


def apply_pool(kind: str, H: Tensor, segments: Segments, w: Weights) -> Tensor:
    if category(kind) != "Pool":
        raise ValueError(f"{kind} is not a pooling operation")
    segments.require_nonempty()
    if kind == "MeanPool":
        return nk.segment_reduce(H, segments, "mean")
    if kind == "MaxPool":
        return nk.segment_reduce(H, segments, "max")
    if kind == "SumPool":
        return nk.segment_reduce(H, segments, "sum")
    scores = nk.matmul(H, nk.reshape(w["a"], (-1, 1)))
    weight = nk.segment_softmax(scores, segments)
    return nk.segment_reduce(H * weight, segments, "sum")


def apply_merge(kind: str, zs: Sequence[Tensor], w: Weights) -> Tensor:
    if category(kind) != "Merge":
        raise ValueError(f"{kind} is not a merge operation")
    if not zs:
        raise ValueError("merge needs at least one layer output")
    if any(z.shape != zs[0].shape for z in zs):
        raise ValueError(f"merge inputs disagree in shape: {[z.shape for z in zs]}")
    if kind == "MaxMerge":
        return zs[0] if len(zs) == 1 else nk.maximum(zs)
    if kind in ("SumMerge", "MeanMerge"):
        out = zs[0]
        for z in zs[1:]:
            out = out + z
        return out * (1.0 / len(zs)) if kind == "MeanMerge" and len(zs) > 1 else out
    if len(zs) == 1:
        return zs[0]
    return nk.concat(zs, axis=1) @ w["P"]
