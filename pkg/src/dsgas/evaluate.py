"""Linear probing of frozen embeddings and DOT export of searched architectures."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .supernet import Architecture

PROTOCOLS = ("logreg_10fold_graph", "logreg_splits_node")
RESTRATIFY_TRIES = 10
# Okabe-Ito, colour-blind safe; factor k uses entry k mod 8
PALETTE = ("#E69F00", "#56B4E9", "#009E73", "#F0E442", "#0072B2", "#D55E00", "#CC79A7", "#000000")


@dataclass(frozen=True)
class ProbeProtocol:
    kind: str = "logreg_10fold_graph"
    folds: int = 10
    repetitions: int = 5
    splits: int = 20
    split_ratio: tuple[float, float, float] = (0.1, 0.1, 0.8)
    l2: float = 1e-4
    iterations: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PROTOCOLS:
            raise ValueError(f"unknown probe protocol {self.kind!r}; choose from {PROTOCOLS}")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")


@dataclass
class ProbeReport:
    mean: float
    std: float
    per_fold: list[float] = field(default_factory=list)

    def __str__(self) -> str:
        return f"{100 * self.mean:.1f} ± {100 * self.std:.1f} (n={len(self.per_fold)})"


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class LogisticProbe:
    """Multinomial logistic regression by full-batch gradient descent with step 1/L.

    L is the Böhning bound ‖X‖₂²/(2N) on the cross-entropy Hessian plus the L2 weight.
    """

    def __init__(self, l2: float = 1e-4, iterations: int = 500):
        self.l2, self.iterations = l2, iterations

    def fit(self, X: np.ndarray, y: np.ndarray, num_classes: int | None = None) -> "LogisticProbe":
        X = np.asarray(X, dtype=np.float64)
        self.mu = X.mean(axis=0)
        self.sd = X.std(axis=0)
        self.sd[self.sd < 1e-12] = 1.0
        A = self._design(X)
        n = len(y)
        C = int(num_classes or y.max() + 1)
        Y = np.eye(C)[y]
        lip = 0.5 * np.linalg.norm(A, 2) ** 2 / n + self.l2
        W = np.zeros((A.shape[1], C))
        reg = np.ones((A.shape[1], 1))
        reg[-1] = 0.0  # bias is not penalised
        for _ in range(self.iterations):
            grad = A.T @ (_softmax(A @ W) - Y) / n + self.l2 * reg * W
            W -= grad / lip
        self.W = W
        return self

    def _design(self, X: np.ndarray) -> np.ndarray:
        Xs = (np.asarray(X, dtype=np.float64) - self.mu) / self.sd
        return np.hstack([Xs, np.ones((len(Xs), 1))])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self._design(X) @ self.W, axis=1)

    def score(self, X: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(X) == y))


def stratified_folds(y: np.ndarray, folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Deal each class's shuffled indices round-robin across folds."""
    out: list[list[int]] = [[] for _ in range(folds)]
    start = 0
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        for j, i in enumerate(idx):
            out[(start + j) % folds].append(int(i))
        start += len(idx)
    return [np.sort(np.array(f, dtype=np.int64)) for f in out]


def stratified_split(y: np.ndarray, ratios, rng: np.random.Generator) -> list[np.ndarray]:
    """Per-class split by ``ratios`` with at least one train example per class."""
    parts: list[list[int]] = [[] for _ in ratios]
    bounds = np.cumsum(ratios)[:-1]
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        cuts = np.maximum(np.round(bounds * len(idx)).astype(int), 1)
        for p, chunk in enumerate(np.split(idx, cuts)):
            parts[p].extend(int(i) for i in chunk)
    return [np.sort(np.array(p, dtype=np.int64)) for p in parts]


def _usable(y_train: np.ndarray) -> bool:
    return len(np.unique(y_train)) > 1


def linear_probe(Z, labels, protocol: ProbeProtocol = ProbeProtocol()) -> ProbeReport:
    Z = np.asarray(Z.data if hasattr(Z, "data") and not isinstance(Z, np.ndarray) else Z,
                   dtype=np.float64).copy()
    y = np.asarray(labels)
    keep = y >= 0
    Z, y = Z[keep], y[keep]
    if len(np.unique(y)) < 2:
        raise ValueError("probing needs at least two classes")
    C = int(y.max() + 1)
    rng = np.random.default_rng(protocol.seed)
    accs: list[float] = []
    if protocol.kind == "logreg_10fold_graph":
        for _ in range(protocol.repetitions):
            for attempt in range(RESTRATIFY_TRIES):
                folds = stratified_folds(y, protocol.folds, rng)
                trains = [np.setdiff1d(np.arange(len(y)), f) for f in folds]
                if all(len(f) and _usable(y[t]) for f, t in zip(folds, trains)):
                    break
            else:
                raise ValueError("could not build folds with two classes in every training split")
            for f, t in zip(folds, trains):
                probe = LogisticProbe(protocol.l2, protocol.iterations).fit(Z[t], y[t], C)
                accs.append(probe.score(Z[f], y[f]))
    else:
        for _ in range(protocol.splits):
            for attempt in range(RESTRATIFY_TRIES):
                train, _val, test = stratified_split(y, protocol.split_ratio, rng)
                if _usable(y[train]) and len(test):
                    break
            else:
                raise ValueError("could not build a split with two classes in the training part")
            probe = LogisticProbe(protocol.l2, protocol.iterations).fit(Z[train], y[train], C)
            accs.append(probe.score(Z[test], y[test]))
    return ProbeReport(float(np.mean(accs)), float(np.std(accs)), accs)


# ---------------------------------------------------------------- visualization

def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(arch: Architecture, K: int | None = None) -> str:
    """Graphviz text: one node per (slot, chosen op), one coloured edge chain per factor."""
    K = arch.num_factors if K is None else K
    if K != arch.num_factors:
        raise ValueError(f"architecture has {arch.num_factors} factors, asked for {K}")
    slots = {s.name: i for i, s in enumerate(arch.slots)}
    aggs = [s.name for s in arch.slots if s.category == "Agg"]
    pools = {s.layer: s.name for s in arch.slots if s.category == "Pool"}

    def node(k: int, slot: str) -> str:
        return f"{slot}_{arch.choices[k][slots[slot]]}"

    lines = ["digraph architecture {", "  rankdir=LR;", '  node [shape=box, fontname="Helvetica"];',
             '  INPUT [shape=ellipse, label="INPUT"];']
    seen: list[str] = []
    for slot in arch.slots:
        for k in range(K):
            nid = node(k, slot.name)
            if nid not in seen:
                seen.append(nid)
                label = f"{slot.name}: {arch.choices[k][slots[slot.name]]}"
                lines.append(f"  {_quote(nid)} [label={_quote(label)}];")
    for k in range(K):
        edges = []
        prev = "INPUT"
        for name in aggs:
            edges.append((prev, node(k, name)))
            prev = node(k, name)
        if pools:
            for l, name in enumerate(aggs):
                edges.append((node(k, name), node(k, pools[l])))
                edges.append((node(k, pools[l]), node(k, "merge")))
        color = PALETTE[k % len(PALETTE)]
        for a, b in edges:
            lines.append(f'  {_quote(a)} -> {_quote(b)} [color="{color}", label="k{k}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
