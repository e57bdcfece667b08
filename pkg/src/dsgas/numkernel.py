"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Operations only record onto a tape when one is active (``with Tape() as tape``)
and at least one input requires a gradient.  Outside a tape every op is a plain
forward computation, which keeps evaluation code cheap.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, key: getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of primitive ops; ``backward`` replays it in reverse."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.live = True

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        out._tape = self
        self.nodes.append((out, inputs, fn))

    def backward(self, loss: Tensor) -> None:
        if not self.live:
            raise RuntimeError("tape already consumed by a previous backward")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise RuntimeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._tape is not self:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.nodes.clear()
        self.live = False


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise RuntimeError("loss is not attached to a live tape")
    loss._tape.backward(loss)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 \
        else np.asarray(data, dtype=np.float64)
    out.grad = None
    out._tape = None
    stack = getattr(_state, "tapes", None)
    out.requires_grad = bool(stack) and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        stack[-1].record(out, inputs, fn)
    return out


# Branch log: nonsmooth ops append their switching pattern so gradient checks
# can tell when a perturbation crossed a kink.
def _note_branch(pattern: np.ndarray) -> None:
    log = getattr(_state, "branch_log", None)
    if log is not None:
        log.append(np.ascontiguousarray(pattern).tobytes())


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def power(a: Tensor, p: float) -> Tensor:
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _note_branch(mask)
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    _note_branch(mask)
    scale = np.where(mask, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def maximum(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise max over same-shape tensors; ties go to the earliest tensor."""
    stacked = np.stack([t.data for t in tensors])
    idx = np.argmax(stacked, axis=0)
    _note_branch(idx)
    out = np.take_along_axis(stacked, idx[None], axis=0)[0]
    return _make(out, tuple(tensors),
                 lambda g: tuple(np.where(idx == i, g, 0.0) for i in range(len(tensors))))


def combine(coeffs: Tensor, row: int, tensors: Sequence[Tensor]) -> Tensor:
    """Σ_i coeffs[row, i] · tensors[i] for same-shape tensors."""
    c = coeffs.data[row]
    out = c[0] * tensors[0].data
    for ci, t in zip(c[1:], tensors[1:]):
        out = out + ci * t.data

    def fn(g):
        gc = np.zeros_like(coeffs.data)
        gc[row] = [np.vdot(g, t.data) for t in tensors]
        return (gc,) + tuple(ci * g for ci in c)
    return _make(out, (coeffs,) + tuple(tensors), fn)


# ---------------------------------------------------------------- shape / linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, key) -> Tensor:
    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)
    return _make(np.array(a.data[key]), (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), fn)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)
    return _make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), fn)


# ---------------------------------------------------------------- softmax family

def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return ((out * (g - (g * out).sum(axis=-1, keepdims=True))) / temperature,)
    return _make(out, (x,), fn)


def log_softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def fn(g):
        return ((g - soft * g.sum(axis=-1, keepdims=True)) / temperature,)
    return _make(out, (x,), fn)


def logsumexp_rows(x: Tensor) -> Tensor:
    """log Σ_j exp(x[i, j]) as an (m,) vector."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    soft = e / s
    return _make(out, (x,), lambda g: (soft * g[..., None],))


# ---------------------------------------------------------------- sparse / segment ops

class SparseAdj:
    """Directed edge list over ``num_nodes`` nodes; messages flow src -> dst.

    Edges are deduplicated and stored sorted by (dst, src) so that per-edge
    arrays line up with the CSR row layout used by ``spmm``.
    """

    def __init__(self, num_nodes: int, edges, edge_weight=None):
        self.num_nodes = int(num_nodes)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= self.num_nodes):
            raise IndexError(f"edge index out of range for {self.num_nodes} nodes")
        weight = None if edge_weight is None else np.asarray(edge_weight, dtype=np.float64)
        if weight is not None and len(weight) != len(edges):
            raise ValueError("edge_weight length does not match edge count")
        key = edges[:, 1] * max(self.num_nodes, 1) + edges[:, 0]
        _, first = np.unique(key, return_index=True)
        order = first[np.argsort(key[first], kind="stable")]
        self.src = edges[order, 0].copy()
        self.dst = edges[order, 1].copy()
        self.edge_weight = None if weight is None else weight[order].copy()
        self.indptr = np.concatenate(
            [[0], np.cumsum(np.bincount(self.dst, minlength=self.num_nodes))]).astype(np.int64)
        self._csr = None
        self.derived: dict = {}  # per-structure caches filled by operations

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def edges(self) -> np.ndarray:
        return np.stack([self.src, self.dst], axis=1)

    def csr(self, weight: np.ndarray | None = None) -> sp.csr_matrix:
        """Row i holds the incoming edges of node i."""
        if weight is None:
            if self._csr is None:
                w = self.edge_weight if self.edge_weight is not None else np.ones(self.num_edges)
                self._csr = sp.csr_matrix((w, self.src, self.indptr),
                                          shape=(self.num_nodes, self.num_nodes))
            return self._csr
        return sp.csr_matrix((weight, self.src, self.indptr), shape=(self.num_nodes, self.num_nodes))

    def in_degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.num_nodes, self.num_nodes))
        w = self.edge_weight if self.edge_weight is not None else np.ones(self.num_edges)
        dense[self.dst, self.src] = w
        return dense

    def with_self_loops(self, weight=None) -> "SparseAdj":
        """Copy with an i->i edge added for every node that lacks one."""
        loops = np.arange(self.num_nodes)
        edges = np.concatenate([self.edges, np.stack([loops, loops], 1)])
        if weight is None and self.edge_weight is None:
            return SparseAdj(self.num_nodes, edges)
        base = self.edge_weight if self.edge_weight is not None else np.ones(self.num_edges)
        extra = np.full(self.num_nodes, 1.0 if weight is None else weight)
        return SparseAdj(self.num_nodes, edges, np.concatenate([base, extra]))


def spmm(adj: SparseAdj, x: Tensor, edge_weight: Tensor | None = None) -> Tensor:
    """out[i] = Σ_{(j, i) ∈ edges} w_ji · x[j]."""
    if x.shape[0] != adj.num_nodes:
        raise ValueError(f"spmm: adjacency has {adj.num_nodes} nodes, x has {x.shape[0]} rows")
    if edge_weight is None:
        mat = adj.csr()
        return _make(np.asarray(mat @ x.data), (x,), lambda g: (np.asarray(mat.T @ g),))
    w = edge_weight.data.reshape(-1)
    mat = adj.csr(w)

    def fn(g):
        gw = np.einsum("ed,ed->e", g[adj.dst], x.data[adj.src]).reshape(edge_weight.shape)
        return np.asarray(mat.T @ g), gw
    return _make(np.asarray(mat @ x.data), (x, edge_weight), fn)


class Segments:
    """A node -> group assignment with cached reduction helpers."""

    def __init__(self, ids, num_segments: int | None = None):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.num_segments = int(self.ids.max()) + 1 if num_segments is None else int(num_segments)
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.num_segments):
            raise IndexError("segment id out of range")
        self.counts = np.bincount(self.ids, minlength=self.num_segments)
        self.order = np.argsort(self.ids, kind="stable")
        self.starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]]).astype(np.int64)
        n = len(self.ids)
        self.matrix = sp.csr_matrix((np.ones(n), (self.ids, np.arange(n))),
                                    shape=(self.num_segments, n))

    def __len__(self) -> int:
        return len(self.ids)

    def require_nonempty(self) -> None:
        if self.counts.size and self.counts.min() == 0:
            raise ValueError(f"empty segment(s): {np.flatnonzero(self.counts == 0).tolist()}")

    def sum(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.matrix @ x)


def as_segments(segments, num_segments: int | None = None) -> Segments:
    return segments if isinstance(segments, Segments) else Segments(segments, num_segments)


def segment_reduce(x: Tensor, segments, mode: str = "sum", num_segments: int | None = None) -> Tensor:
    seg = as_segments(segments, num_segments)
    seg.require_nonempty()
    if len(seg) != x.shape[0]:
        raise ValueError("segment map length does not match row count")
    if mode == "sum":
        return _make(seg.sum(x.data), (x,), lambda g: (g[seg.ids],))
    if mode == "mean":
        inv = 1.0 / seg.counts[:, None]
        return _make(seg.sum(x.data) * inv, (x,), lambda g: ((g * inv)[seg.ids],))
    if mode == "max":
        xs = x.data[seg.order]
        out = np.maximum.reduceat(xs, seg.starts, axis=0)
        rows = np.where(xs == out[seg.ids[seg.order]], seg.order[:, None], len(seg))
        arg = np.minimum.reduceat(rows, seg.starts, axis=0)
        _note_branch(arg)
        cols = np.broadcast_to(np.arange(x.shape[1]), arg.shape)

        def fn(g):
            full = np.zeros_like(x.data)
            full[arg, cols] = g
            return (full,)
        return _make(out, (x,), fn)
    raise ValueError(f"unknown segment reduction {mode!r}")


def segment_softmax(scores: Tensor, segments, num_segments: int | None = None) -> Tensor:
    """Softmax of a score vector within each segment."""
    seg = as_segments(segments, num_segments)
    s = scores.data.reshape(-1)
    peak = np.full(seg.num_segments, -np.inf)
    np.maximum.at(peak, seg.ids, s)
    e = np.exp(s - peak[seg.ids])
    y = e / seg.sum(e)[seg.ids]

    def fn(g):
        g = g.reshape(-1)
        return ((y * (g - seg.sum(g * y)[seg.ids])).reshape(scores.shape),)
    return _make(y.reshape(scores.shape), (scores,), fn)


def gather_rows(x: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def fn(g):
        scatter = sp.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))),
                                shape=(n, len(index)))
        return (np.asarray(scatter @ g.reshape(len(index), -1)).reshape(x.shape),)
    return _make(x.data[index], (x,), fn)


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: tuple | None = None  # (param position, coordinate, analytic, numeric)


_EPS64 = float(np.finfo(np.float64).eps)
ROUNDOFF_ULPS = 4.0
RICHARDSON_TRIGGER = 1e-6


def gradient_check(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
                   max_coords: int | None = None, rng: np.random.Generator | None = None
                   ) -> GradCheckReport:
    """Compare tape gradients against central differences.

    A coordinate whose ±eps probes land on different branches of a nonsmooth
    op (ReLU, max, ...) is retried with eps/10 twice before being skipped.
    Disagreement up to the rounding error of the difference quotient itself is
    forgiven. A coordinate still off by more than 1e-6 gets a second estimate
    at eps/2, combined with the first by Richardson extrapolation.
    ``max_coords`` samples at most that many entries per tensor.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def probe() -> tuple[float, list]:
        _state.branch_log = []
        try:
            value = float(fn().data)
            return value, _state.branch_log
        finally:
            _state.branch_log = None

    _, base_branches = probe()
    worst, checked, skipped, where = 0.0, 0, 0, None
    for pos, (p, a) in enumerate(zip(params, analytic)):
        coords = list(np.ndindex(p.shape))
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = [coords[i] for i in rng.choice(len(coords), max_coords, replace=False)]
        for idx in coords:
            orig = p.data[idx]
            h = eps
            for _ in range(3):
                p.data[idx] = orig + h
                f_plus, b_plus = probe()
                p.data[idx] = orig - h
                f_minus, b_minus = probe()
                p.data[idx] = orig
                if b_plus == base_branches and b_minus == base_branches:
                    break
                h /= 10
            else:
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * h)
            # float64 rounding of f itself bounds what the difference quotient can resolve
            roundoff = ROUNDOFF_ULPS * _EPS64 * (abs(f_plus) + abs(f_minus)) / (2 * h)
            err = max(abs(a[idx] - numeric) - roundoff, 0.0) / (abs(a[idx]) + 1e-8)
            if err > RICHARDSON_TRIGGER:
                # cancel the h^2 truncation term, which dominates on near-zero gradients
                p.data[idx] = orig + h / 2
                g_plus, c_plus = probe()
                p.data[idx] = orig - h / 2
                g_minus, c_minus = probe()
                p.data[idx] = orig
                if c_plus == base_branches and c_minus == base_branches:
                    extrapolated = (4 * (g_plus - g_minus) / h - numeric) / 3
                    roundoff_x = (4 * ROUNDOFF_ULPS * _EPS64 * (abs(g_plus) + abs(g_minus)) / h
                                  + roundoff) / 3
                    err_x = max(abs(a[idx] - extrapolated) - roundoff_x, 0.0) / (abs(a[idx]) + 1e-8)
                    if err_x < err:
                        numeric, err = extrapolated, err_x
            if err > worst or where is None:
                worst, where = max(err, worst), (pos, idx, float(a[idx]), float(numeric))
            checked += 1
    return GradCheckReport(float(worst), checked, skipped, where)


def finite_diff_check(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8)."""
    return gradient_check(fn, params, eps).max_rel_error
