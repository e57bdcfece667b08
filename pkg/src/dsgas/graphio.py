"""Dataset ingestion, planted-factor synthesis and block-diagonal batching."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numkernel import Segments, SparseAdj, Tensor

_SPLIT = re.compile(r"[,\s]+")


@dataclass
class Graph:
    x: np.ndarray                 # n × F node features
    edges: np.ndarray             # m × 2 undirected pairs, i < j, unique
    label: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValueError("a graph needs at least one node and a 2-D feature matrix")
        self.edges = canonical_edges(self.edges, self.num_nodes)
        self._adj = None

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return len(self.edges)

    @property
    def adj(self) -> SparseAdj:
        if self._adj is None:
            self._adj = SparseAdj(self.num_nodes, directed_pairs(self.edges))
        return self._adj


def canonical_edges(edges, num_nodes: int) -> np.ndarray:
    """Undirected, deduplicated (i <= j) edge list sorted lexicographically."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        raise IndexError(f"edge index out of range for {num_nodes} nodes")
    lo, hi = np.minimum(edges[:, 0], edges[:, 1]), np.maximum(edges[:, 0], edges[:, 1])
    return np.unique(np.stack([lo, hi], axis=1), axis=0)


def directed_pairs(edges: np.ndarray) -> np.ndarray:
    loops = edges[:, 0] == edges[:, 1]
    return np.concatenate([edges, edges[~loops][:, ::-1]])


@dataclass
class GraphDataset:
    graphs: list[Graph]
    num_features: int
    num_classes: int
    task: str = "graph_level"
    name: str = ""

    def __post_init__(self):
        if self.task not in ("graph_level", "node_level"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "node_level" and len(self.graphs) != 1:
            raise ValueError("node-level datasets hold exactly one graph")
        for g in self.graphs:
            if g.x.shape[1] != self.num_features:
                raise ValueError("feature width differs across graphs")

    def __len__(self) -> int:
        return len(self.graphs)

    def labels(self) -> np.ndarray:
        """Evaluation labels: one per graph, or one per node for node-level data."""
        if self.task == "node_level":
            return np.asarray(self.graphs[0].meta["node_labels"])
        return np.array([-1 if g.label is None else g.label for g in self.graphs])

    def label_coverage(self) -> float:
        return float(np.mean(self.labels() >= 0))

    def stats(self) -> dict:
        undirected = sum(g.num_edges for g in self.graphs)
        directed = sum(g.adj.num_edges for g in self.graphs)
        n = len(self.graphs)
        return {
            "graphs": n,
            "avg_nodes": sum(g.num_nodes for g in self.graphs) / n,
            "avg_edges_undirected": undirected / n,
            "avg_edges_directed": directed / n,
            "features": self.num_features,
            "classes": self.num_classes,
        }


@dataclass
class GraphBatch:
    x: Tensor
    adj: SparseAdj
    segments: Segments
    num_graphs: int
    offsets: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.adj.num_nodes


# ---------------------------------------------------------------- text parsing

def _read_rows(path: Path) -> list[tuple[int, list[str]]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if line:
                rows.append((lineno, [t for t in _SPLIT.split(line) if t]))
    return rows


def _require(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"required dataset file missing: {path.name}")
    return path


def _dense_labels(values: Sequence) -> tuple[np.ndarray, int]:
    uniq = sorted(set(values))
    lookup = {v: i for i, v in enumerate(uniq)}
    return np.array([lookup[v] for v in values], dtype=np.int64), len(uniq)


def _one_hot(index: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(index), width))
    out[np.arange(len(index)), index] = 1.0
    return out


def parse_tudataset(directory, name: str, degree_features: bool = False) -> GraphDataset:
    """Read the TUDataset text layout (1-based node ids, comma or space separated)."""
    root = Path(directory)
    a_path = _require(root / f"{name}_A.txt")
    ind_path = _require(root / f"{name}_graph_indicator.txt")
    lab_path = _require(root / f"{name}_graph_labels.txt")

    indicator_rows = _read_rows(ind_path)
    if not indicator_rows:
        raise ValueError(f"{ind_path.name} is empty")
    indicator = np.array([int(r[0]) for _, r in indicator_rows], dtype=np.int64) - 1
    n_total = len(indicator)
    num_graphs = int(indicator.max()) + 1
    if indicator.min() < 0:
        raise ValueError(f"{ind_path.name}: graph ids must start at 1")

    graph_labels_raw = [int(r[0]) for _, r in _read_rows(lab_path)]
    if len(graph_labels_raw) != num_graphs:
        raise ValueError(f"{lab_path.name}: {len(graph_labels_raw)} labels for {num_graphs} graphs")
    graph_labels, num_classes = _dense_labels(graph_labels_raw)

    edges = []
    for lineno, row in _read_rows(a_path):
        if len(row) < 2:
            raise ValueError(f"{a_path.name} line {lineno}: expected two node ids")
        u, v = int(row[0]) - 1, int(row[1]) - 1
        if not (0 <= u < n_total and 0 <= v < n_total):
            raise ValueError(f"{a_path.name} line {lineno}: dangling node index")
        if indicator[u] != indicator[v]:
            raise ValueError(f"{a_path.name} line {lineno}: edge joins two different graphs")
        edges.append((u, v))
    edges = np.array(edges, dtype=np.int64).reshape(-1, 2)

    attr_path = root / f"{name}_node_attributes.txt"
    nlab_path = root / f"{name}_node_labels.txt"
    if attr_path.is_file():
        rows = _read_rows(attr_path)
        features = np.array([[float(t) for t in r] for _, r in rows])
    elif nlab_path.is_file():
        rows = _read_rows(nlab_path)
        node_labels, width = _dense_labels([int(r[0]) for _, r in rows])
        features = _one_hot(node_labels, width)
    else:
        features = None
    if features is not None and len(features) != n_total:
        raise ValueError(f"node feature rows ({len(features)}) do not match node count ({n_total})")

    order = np.argsort(indicator, kind="stable")
    if not np.array_equal(order, np.arange(n_total)):
        raise ValueError(f"{ind_path.name}: nodes must be grouped by graph")
    counts = np.bincount(indicator, minlength=num_graphs)
    if (counts == 0).any():
        raise ValueError(f"{ind_path.name}: graph {int(np.argmin(counts)) + 1} has no nodes")
    starts = np.concatenate([[0], np.cumsum(counts)])

    edge_graph = indicator[edges[:, 0]] if len(edges) else np.zeros(0, dtype=np.int64)
    graphs = []
    for gi in range(num_graphs):
        lo, hi = starts[gi], starts[gi + 1]
        local = edges[edge_graph == gi] - lo
        x = features[lo:hi] if features is not None else np.ones((hi - lo, 1))
        graphs.append(Graph(x, local, int(graph_labels[gi])))

    if features is None and degree_features:
        degs = [np.bincount(g.edges.ravel(), minlength=g.num_nodes) for g in graphs]
        width = int(max(d.max() for d in degs)) + 1
        graphs = [Graph(_one_hot(d, width), g.edges, g.label) for g, d in zip(graphs, degs)]
    width = graphs[0].x.shape[1]
    return GraphDataset(graphs, width, num_classes, "graph_level", name)


def parse_node_dataset(edge_file, feature_file, label_file, name: str = "") -> GraphDataset:
    """Single-graph node classification data in the plain whitespace format."""
    feats = np.array([[float(t) for t in r] for _, r in _read_rows(Path(feature_file))])
    labels_raw = [int(r[0]) for _, r in _read_rows(Path(label_file))]
    if len(feats) != len(labels_raw):
        raise ValueError(f"feature rows ({len(feats)}) and label rows ({len(labels_raw)}) differ")
    if len(feats) == 0:
        raise ValueError("node dataset has no nodes")
    n = len(feats)
    edges = []
    for lineno, row in _read_rows(Path(edge_file)):
        u, v = int(row[0]), int(row[1])
        if not (0 <= u < n and 0 <= v < n):
            raise ValueError(f"{Path(edge_file).name} line {lineno}: node index out of range")
        edges.append((u, v))
    labels, num_classes = _dense_labels(labels_raw)
    graph = Graph(feats, np.array(edges, dtype=np.int64).reshape(-1, 2), meta={"node_labels": labels})
    return GraphDataset([graph], feats.shape[1], num_classes, "node_level", name)


# ---------------------------------------------------------------- planted-factor synthesis

MOTIFS = ("community", "star", "ring", "path")
SIGNALS = ("mean", "max")


@dataclass(frozen=True)
class Variant:
    motif: str
    signal: str

    def __post_init__(self):
        if self.motif not in MOTIFS:
            raise ValueError(f"unknown motif {self.motif!r}; expected one of {MOTIFS}")
        if self.signal not in SIGNALS:
            raise ValueError(f"unknown signal {self.signal!r}; expected one of {SIGNALS}")


@dataclass(frozen=True)
class FactorSpec:
    """One latent factor: alternative (motif, feature signal) pairs on its own node block."""
    variants: tuple[Variant, ...]
    min_nodes: int = 6
    max_nodes: int = 10
    level: float = 1.0

    def __post_init__(self):
        if len(self.variants) < 2:
            raise ValueError("a factor needs at least two variants")
        if not 3 <= self.min_nodes <= self.max_nodes:
            raise ValueError("factor block sizes must satisfy 3 <= min_nodes <= max_nodes")

    @classmethod
    def from_dict(cls, d: dict) -> "FactorSpec":
        variants = tuple(Variant(**v) if isinstance(v, dict) else Variant(*v) for v in d["variants"])
        extra = {k: d[k] for k in ("min_nodes", "max_nodes", "level") if k in d}
        return cls(variants, **extra)


def default_factor_specs() -> list[FactorSpec]:
    return [
        FactorSpec((Variant("community", "mean"), Variant("star", "max"))),
        FactorSpec((Variant("ring", "max"), Variant("path", "mean"))),
    ]


def _motif_edges(motif: str, n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    if motif == "community":
        iu, ju = np.triu_indices(n, 1)
        keep = rng.random(len(iu)) < 0.7
        edges = list(zip(iu[keep], ju[keep]))
        edges += [(i, i + 1) for i in range(n - 1)]  # keep the block connected
        return edges
    if motif == "star":
        return [(0, i) for i in range(1, n)]
    if motif == "ring":
        return [(i, (i + 1) % n) for i in range(n)]
    return [(i, i + 1) for i in range(n - 1)]


def make_synthetic_factors(num_graphs: int, factors: Sequence[FactorSpec] | None = None,
                           seed: int = 0, bridge_prob: float = 0.05, noise: float = 0.1,
                           noise_dims: int = 2) -> GraphDataset:
    """Graphs built from one motif block per factor, joined by sparse random bridges.

    Feature column f carries factor f's signal: ``mean`` puts ``level`` on every
    node of the block, ``max`` puts ``level * block_size`` on a single node, so
    both variants have the same column sum and only differ in how it is spread.
    """
    factors = list(default_factor_specs() if factors is None else factors)
    if len(factors) < 2:
        raise ValueError("planted-factor data needs at least two factors")
    if num_graphs < 1:
        raise ValueError("num_graphs must be positive")
    rng = np.random.default_rng(seed)
    radices = [len(f.variants) for f in factors]
    num_classes = int(np.prod(radices))
    labels = np.arange(num_graphs) % num_classes
    rng.shuffle(labels)
    width = len(factors) + noise_dims + 1

    graphs = []
    for label in labels:
        choice, rest = [], int(label)
        for r in reversed(radices):
            choice.append(rest % r)
            rest //= r
        choice = choice[::-1]

        blocks, edges, feats, offset = [], [], [], 0
        for f, (spec, v_idx) in enumerate(zip(factors, choice)):
            variant = spec.variants[v_idx]
            n = int(rng.integers(spec.min_nodes, spec.max_nodes + 1))
            perm = rng.permutation(n)  # hub / outlier position is not tied to block order
            edges += [(offset + perm[i], offset + perm[j]) for i, j in _motif_edges(variant.motif, n, rng)]
            block = np.zeros((n, width))
            if variant.signal == "mean":
                block[:, f] = spec.level
            else:
                block[perm[0], f] = spec.level * n
            feats.append(block)
            blocks.append(np.arange(offset, offset + n))
            offset += n
        for a in range(len(blocks)):
            for b in range(a + 1, len(blocks)):
                pairs = [(i, j) for i in blocks[a] for j in blocks[b] if rng.random() < bridge_prob]
                if b == a + 1 and not pairs:
                    pairs = [(int(rng.choice(blocks[a])), int(rng.choice(blocks[b])))]
                edges += pairs
        x = np.concatenate(feats)
        x[:, :len(factors) + noise_dims] += noise * rng.standard_normal((offset, len(factors) + noise_dims))
        x[:, -1] = 1.0
        graphs.append(Graph(x, np.array(edges), int(label),
                            meta={"variants": tuple(choice), "blocks": [len(b) for b in blocks]}))
    return GraphDataset(graphs, width, num_classes, "graph_level", "synthetic")


def write_tudataset(dataset: GraphDataset, directory, name: str) -> None:
    """Write graph-level data in the TUDataset text layout (features as node attributes)."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(root / f"{name}_A.txt", "w", encoding="utf-8") as fa, \
            open(root / f"{name}_graph_indicator.txt", "w", encoding="utf-8") as fi, \
            open(root / f"{name}_graph_labels.txt", "w", encoding="utf-8") as fl, \
            open(root / f"{name}_node_attributes.txt", "w", encoding="utf-8") as fx:
        for gi, g in enumerate(dataset.graphs, 1):
            for u, v in directed_pairs(g.edges):
                fa.write(f"{u + offset + 1}, {v + offset + 1}\n")
            for row in g.x:
                fi.write(f"{gi}\n")
                fx.write(", ".join(repr(float(t)) for t in row) + "\n")
            fl.write(f"{-1 if g.label is None else g.label}\n")
            offset += g.num_nodes


# ---------------------------------------------------------------- batching

def batch_graphs(graphs: Sequence[Graph]) -> GraphBatch:
    if not graphs:
        raise ValueError("cannot batch an empty graph list")
    width = graphs[0].x.shape[1]
    if any(g.x.shape[1] != width for g in graphs):
        raise ValueError("feature width differs across graphs in the batch")
    counts = np.array([g.num_nodes for g in graphs])
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pairs = [directed_pairs(g.edges) + off for g, off in zip(graphs, offsets)]
    total = int(counts.sum())
    adj = SparseAdj(total, np.concatenate(pairs) if pairs else np.zeros((0, 2), dtype=np.int64))
    segments = Segments(np.repeat(np.arange(len(graphs)), counts), len(graphs))
    x = Tensor(np.concatenate([g.x for g in graphs]))
    return GraphBatch(x, adj, segments, len(graphs), offsets)
