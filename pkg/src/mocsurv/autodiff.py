"""Small static-graph reverse-mode differentiation engine.

Graphs are declared once from a closed vocabulary of array ops, then evaluated
with concrete parameters and inputs.  Every value is a float64 numpy array and
row-major; batches are stacked along axis 0.

Example
-------
>>> g = Graph()
>>> x = g.input("x", shape=(None, 1))
>>> y = g.sigmoid(g.affine(x, g.param("W"), g.param("b")))
>>> g.set_output(g.sum(y))
>>> float(g.forward({"W": np.array([[2.0]]), "b": np.array([1.0])},
...                 {"x": np.zeros((1, 1))}))  # doctest: +ELLIPSIS
0.731058578...
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805


class ShapeError(ValueError):
    """Raised when a node receives arrays of the wrong shape."""

    def __init__(self, node: str, expected, actual):
        self.node = node
        self.expected = expected
        self.actual = actual
        super().__init__(f"node {node!r}: expected shape {expected}, got {actual}")


class GraphStateError(RuntimeError):
    pass


class GradientCheckError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# parameter containers


class ParamSet:
    """Ordered collection of named float64 arrays with a flat view.

    The flat view concatenates every array in insertion order, which makes
    copying and averaging whole models a single vector operation.  Arrays
    passed in are not copied; use ``copy()`` for an independent snapshot.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        items = arrays.items() if isinstance(arrays, Mapping) else arrays
        self._arrays: OrderedDict[str, np.ndarray] = OrderedDict(
            (k, np.asarray(v, dtype=np.float64)) for k, v in items
        )

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self._arrays[name] = np.array(value, dtype=np.float64)

    def __contains__(self, name: object) -> bool:
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._arrays.items()}

    @property
    def size(self) -> int:
        return sum(v.size for v in self._arrays.values())

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._arrays.values()])

    def with_flat(self, flat: np.ndarray) -> "ParamSet":
        """Return a ParamSet with this layout and values taken from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeError("ParamSet.with_flat", (self.size,), flat.shape)
        out, pos = [], 0
        for name, v in self._arrays.items():
            out.append((name, flat[pos:pos + v.size].reshape(v.shape).copy()))
            pos += v.size
        return ParamSet(out)

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self._arrays.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v)) for k, v in self._arrays.items())

    def prefixed(self, prefix: str) -> dict[str, np.ndarray]:
        return {prefix + k: v for k, v in self._arrays.items()}

    def allfinite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._arrays.values())

    def equals(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(v, other[k]) for k, v in self._arrays.items()
        )

    @staticmethod
    def average(a: "ParamSet", b: "ParamSet") -> "ParamSet":
        if a.shapes() != b.shapes():
            raise ShapeError("ParamSet.average", a.shapes(), b.shapes())
        return ParamSet((k, 0.5 * (v + b[k])) for k, v in a.items())


class GradStore(ParamSet):
    """Gradient arrays aligned with a ParamSet; starts zeroed."""

    @classmethod
    def for_shapes(cls, shapes: Mapping[str, tuple[int, ...]]) -> "GradStore":
        return cls((k, np.zeros(s)) for k, s in shapes.items())

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self._arrays[name] += grad

    def add(self, other: "GradStore") -> None:
        for k, v in other.items():
            self._arrays[k] += v

    def subset(self, prefix: str) -> "GradStore":
        """Gradients whose names start with ``prefix``, prefix stripped."""
        n = len(prefix)
        return GradStore((k[n:], v) for k, v in self._arrays.items() if k.startswith(prefix))


# ---------------------------------------------------------------------------
# elementwise helpers


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def selu(x):
    x = np.asarray(x, dtype=np.float64)
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def selu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return SELU_LAMBDA * np.where(x >= 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def segment_ids(offsets: np.ndarray, total: int) -> np.ndarray:
    counts = np.diff(np.append(offsets, total))
    return np.repeat(np.arange(len(offsets)), counts)


# ---------------------------------------------------------------------------
# op vocabulary
#
# forward(values, attrs, ctx) -> (out, aux)
# backward(grad_out, values, out, aux, attrs) -> tuple of grads (None = no grad)


@dataclass
class _Op:
    forward: Callable
    backward: Callable


def _check_same(node, a, b):
    if a.shape != b.shape:
        raise ShapeError(node, a.shape, b.shape)


def _affine_fwd(vals, attrs, ctx):
    x, W = vals[0], vals[1]
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ShapeError(ctx.node_name, ("m", W.shape[1] if W.ndim == 2 else "?"), x.shape)
    out = x @ W.T
    if len(vals) == 3:
        b = vals[2]
        if b.shape != (W.shape[0],):
            raise ShapeError(ctx.node_name, (W.shape[0],), b.shape)
        out = out + b
    return out, None


def _affine_bwd(g, vals, out, aux, attrs):
    x, W = vals[0], vals[1]
    grads = [g @ W, g.T @ x]
    if len(vals) == 3:
        grads.append(g.sum(axis=0))
    return tuple(grads)


def _tanh_fwd(vals, attrs, ctx):
    return np.tanh(vals[0]), None


def _sigmoid_fwd(vals, attrs, ctx):
    return sigmoid(vals[0]), None


def _relu_fwd(vals, attrs, ctx):
    return np.maximum(vals[0], 0.0), None


def _selu_fwd(vals, attrs, ctx):
    return selu(vals[0]), None


def _binary_fwd(fn):
    def fwd(vals, attrs, ctx):
        _check_same(ctx.node_name, vals[0], vals[1])
        return fn(vals[0], vals[1]), None
    return fwd


def _scale_fwd(vals, attrs, ctx):
    return attrs["c"] * vals[0], None


def _sum_fwd(vals, attrs, ctx):
    return np.asarray(vals[0].sum()), None


def _clamp_fwd(vals, attrs, ctx):
    return np.clip(vals[0], attrs["lo"], attrs["hi"]), None


def _seg_softmax_fwd(vals, attrs, ctx):
    s, offsets = vals
    if s.ndim != 2 or s.shape[1] != 1:
        raise ShapeError(ctx.node_name, ("n", 1), s.shape)
    offsets = offsets.astype(np.int64)
    col = s[:, 0]
    seg = segment_ids(offsets, len(col))
    shifted = col - np.maximum.reduceat(col, offsets)[seg]
    e = np.exp(shifted)
    alpha = e / np.add.reduceat(e, offsets)[seg]
    return alpha[:, None], seg


def _seg_softmax_bwd(g, vals, out, seg, attrs):
    offsets = vals[1].astype(np.int64)
    a = out[:, 0]
    ga = g[:, 0]
    inner = np.add.reduceat(a * ga, offsets)[seg]
    return (a * (ga - inner))[:, None], None


def _seg_wsum_fwd(vals, attrs, ctx):
    a, f, offsets = vals
    if a.shape != (f.shape[0], 1):
        raise ShapeError(ctx.node_name, (f.shape[0], 1), a.shape)
    offsets = offsets.astype(np.int64)
    return np.add.reduceat(a * f, offsets, axis=0), segment_ids(offsets, f.shape[0])


def _seg_wsum_bwd(g, vals, out, seg, attrs):
    a, f, _ = vals
    gs = g[seg]
    return (gs * f).sum(axis=1, keepdims=True), gs * a, None


def _dropout_fwd(vals, attrs, ctx):
    x = vals[0]
    rate = attrs["rate"]
    rng = ctx.rng_for(attrs["stream"])
    if rng is None or rate == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def _dropout_bwd(g, vals, out, keep, attrs):
    return (g if keep is None else g * keep,)


def alpha_dropout_coefficients(rate: float) -> tuple[float, float, float]:
    """Affine correction (a, b) and saturation value keeping zero mean, unit variance."""
    sat = -SELU_LAMBDA * SELU_ALPHA
    q = 1.0 - rate
    a = (q * (1.0 + rate * sat ** 2)) ** -0.5
    b = -a * sat * rate
    return a, b, sat


def _alpha_dropout_fwd(vals, attrs, ctx):
    x = vals[0]
    rate = attrs["rate"]
    rng = ctx.rng_for(attrs["stream"])
    if rng is None or rate == 0.0:
        return x, None
    a, b, sat = alpha_dropout_coefficients(rate)
    keep = rng.random(x.shape) >= rate
    return a * np.where(keep, x, sat) + b, a * keep


def _cox_fwd(vals, attrs, ctx):
    s, t, e = vals
    s = s.reshape(-1)
    t = t.reshape(-1)
    e = e.reshape(-1).astype(bool)
    if not (s.shape == t.shape == e.shape):
        raise ShapeError(ctx.node_name, s.shape, (t.shape, e.shape))
    if not e.any():
        return np.asarray(0.0), None
    m = s.max()
    w = np.exp(s - m)
    at_risk = t[None, :] >= t[:, None]  # row i: j in risk set of i
    denom = at_risk @ w
    loss = -np.sum(s[e] - m - np.log(denom[e]))
    return np.asarray(loss), (w, at_risk, denom, e)


def _cox_bwd(g, vals, out, aux, attrs):
    shape = vals[0].shape
    if aux is None:
        return np.zeros(shape), None, None
    w, at_risk, denom, e = aux
    # d/ds_k = -e_k + sum_{i: e_i, k in R_i} w_k / denom_i
    grad = -e.astype(float) + w * (at_risk[e].T @ (1.0 / denom[e]))
    return (float(g) * grad).reshape(shape), None, None


def _unary(fwd, dfn):
    return _Op(fwd, lambda g, vals, out, aux, attrs: (g * dfn(vals[0], out),))


OPS: dict[str, _Op] = {
    "affine": _Op(_affine_fwd, _affine_bwd),
    "tanh": _unary(_tanh_fwd, lambda x, y: 1.0 - y * y),
    "sigmoid": _unary(_sigmoid_fwd, lambda x, y: y * (1.0 - y)),
    "relu": _unary(_relu_fwd, lambda x, y: (x > 0).astype(np.float64)),
    "selu": _unary(_selu_fwd, lambda x, y: selu_grad(x)),
    "mul": _Op(_binary_fwd(np.multiply), lambda g, v, o, a, at: (g * v[1], g * v[0])),
    "add": _Op(_binary_fwd(np.add), lambda g, v, o, a, at: (g, g)),
    "ratio": _Op(_binary_fwd(np.divide),
                 lambda g, v, o, a, at: (g / v[1], -g * v[0] / (v[1] * v[1]))),
    "scale": _Op(_scale_fwd, lambda g, v, o, a, at: (at["c"] * g,)),
    "sum": _Op(_sum_fwd, lambda g, v, o, a, at: (np.broadcast_to(g, v[0].shape).copy(),)),
    "clamp": _Op(_clamp_fwd, lambda g, v, o, a, at: (
        g * ((v[0] >= at["lo"]) & (v[0] <= at["hi"])),)),
    "segment_softmax": _Op(_seg_softmax_fwd, _seg_softmax_bwd),
    "segment_weighted_sum": _Op(_seg_wsum_fwd, _seg_wsum_bwd),
    "dropout": _Op(_dropout_fwd, _dropout_bwd),
    "alpha_dropout": _Op(_alpha_dropout_fwd, _dropout_bwd),
    "cox_npll": _Op(_cox_fwd, _cox_bwd),
}


# ---------------------------------------------------------------------------
# graph


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    name: str


@dataclass
class _NodeSpec:
    op: str
    inputs: tuple[int, ...]
    name: str
    attrs: dict = field(default_factory=dict)


class _Ctx:
    def __init__(self, rng):
        self.rng = rng
        self.node_name = ""

    def rng_for(self, stream):
        if self.rng is None:
            return None
        if isinstance(self.rng, Mapping):
            return self.rng[stream]
        return self.rng


class Graph:
    """A topologically ordered list of nodes built from the fixed op vocabulary.

    Leaves are either data inputs (``input``) or trainable parameters
    (``param``).  Nodes can only reference earlier nodes, so insertion order is
    a valid topological order and ``backward`` simply walks it in reverse.

    A single graph instance caches one forward pass at a time and must not be
    shared across threads.
    """

    def __init__(self):
        self._nodes: list[_NodeSpec] = []
        self._output: int | None = None
        self._inputs: dict[str, tuple[int, tuple | None]] = {}
        self._params: dict[str, int] = {}
        self._values: list | None = None
        self._aux: list | None = None
        self._param_shapes: dict[str, tuple[int, ...]] | None = None
        self._node_grads: list | None = None

    # -- construction -----------------------------------------------------

    def _add(self, op: str, inputs: Iterable[Node], name: str | None = None, **attrs) -> Node:
        ids = tuple(n.id for n in inputs)
        for i in ids:
            if not 0 <= i < len(self._nodes):
                raise GraphStateError(f"unknown input node {i}")
        nid = len(self._nodes)
        name = name or f"{op}_{nid}"
        self._nodes.append(_NodeSpec(op, ids, name, attrs))
        self._values = None
        return Node(nid, op, name)

    def input(self, name: str, shape: tuple | None = None) -> Node:
        if name in self._inputs:
            return Node(self._inputs[name][0], "input", name)
        node = self._add("input", (), name)
        self._inputs[name] = (node.id, shape)
        return node

    def param(self, name: str) -> Node:
        if name in self._params:
            return Node(self._params[name], "param", name)
        node = self._add("param", (), name)
        self._params[name] = node.id
        return node

    def affine(self, x: Node, W: Node, b: Node | None = None, name=None) -> Node:
        return self._add("affine", (x, W) if b is None else (x, W, b), name)

    def tanh(self, x, name=None):
        return self._add("tanh", (x,), name)

    def sigmoid(self, x, name=None):
        return self._add("sigmoid", (x,), name)

    def relu(self, x, name=None):
        return self._add("relu", (x,), name)

    def selu(self, x, name=None):
        return self._add("selu", (x,), name)

    def activation(self, kind: str, x, name=None):
        if kind == "identity":
            return x
        if kind not in ("tanh", "sigmoid", "relu", "selu"):
            raise ValueError(f"unknown activation {kind!r}")
        return self._add(kind, (x,), name)

    def mul(self, a, b, name=None):
        return self._add("mul", (a, b), name)

    def add(self, a, b, name=None):
        return self._add("add", (a, b), name)

    def ratio(self, a, b, name=None):
        return self._add("ratio", (a, b), name)

    def scale(self, x, c: float, name=None):
        return self._add("scale", (x,), name, c=float(c))

    def sum(self, x, name=None):
        return self._add("sum", (x,), name)

    def clamp(self, x, lo: float, hi: float, name=None):
        return self._add("clamp", (x,), name, lo=lo, hi=hi)

    def segment_softmax(self, scores, offsets, name=None):
        return self._add("segment_softmax", (scores, offsets), name)

    def segment_weighted_sum(self, weights, feats, offsets, name=None):
        return self._add("segment_weighted_sum", (weights, feats, offsets), name)

    def dropout(self, x, rate: float, stream: str = "default", name=None):
        return self._add("dropout", (x,), name, rate=float(rate), stream=stream)

    def alpha_dropout(self, x, rate: float, stream: str = "default", name=None):
        return self._add("alpha_dropout", (x,), name, rate=float(rate), stream=stream)

    def cox_npll(self, scores, times, events, name=None):
        return self._add("cox_npll", (scores, times, events), name)

    def set_output(self, node: Node) -> None:
        self._output = node.id

    @property
    def param_names(self) -> list[str]:
        return list(self._params)

    @property
    def input_names(self) -> list[str]:
        return list(self._inputs)

    def __len__(self) -> int:
        return len(self._nodes)

    # -- evaluation -------------------------------------------------------

    def forward(self, params: Mapping[str, np.ndarray], inputs: Mapping[str, np.ndarray],
                rng=None) -> np.ndarray:
        """Evaluate the graph and cache intermediates for ``backward``.

        ``rng`` switches dropout nodes on: a Generator, or a mapping from
        stream name to Generator.  With ``rng=None`` the graph runs in
        evaluation mode and is fully deterministic.
        """
        if self._output is None:
            raise GraphStateError("graph has no output")
        ctx = _Ctx(rng)
        values: list = [None] * len(self._nodes)
        aux: list = [None] * len(self._nodes)
        for nid, spec in enumerate(self._nodes):
            ctx.node_name = spec.name
            if spec.op == "input":
                if spec.name not in inputs:
                    raise KeyError(f"missing input {spec.name!r}")
                v = np.asarray(inputs[spec.name], dtype=np.float64)
                _, shape = self._inputs[spec.name]
                if shape is not None and (
                    v.ndim != len(shape)
                    or any(s is not None and s != a for s, a in zip(shape, v.shape))
                ):
                    raise ShapeError(spec.name, shape, v.shape)
                values[nid] = v
            elif spec.op == "param":
                if spec.name not in params:
                    raise KeyError(f"missing parameter {spec.name!r}")
                values[nid] = np.asarray(params[spec.name], dtype=np.float64)
            else:
                out, a = OPS[spec.op].forward([values[i] for i in spec.inputs], spec.attrs, ctx)
                values[nid] = out
                aux[nid] = a
        self._values = values
        self._aux = aux
        self._param_shapes = {n: values[i].shape for n, i in self._params.items()}
        return values[self._output]

    def value(self, node: Node) -> np.ndarray:
        if self._values is None:
            raise GraphStateError("forward has not been run")
        return self._values[node.id]

    def backward(self, upstream: float = 1.0, grads: GradStore | None = None) -> GradStore:
        """Reverse-mode pass from the output; gradients are added into ``grads``."""
        if self._values is None:
            raise GraphStateError("backward called before forward")
        if not np.isfinite(upstream):
            raise ValueError("upstream gradient must be finite")
        if grads is None:
            grads = GradStore.for_shapes(self._param_shapes)
        node_grads: list = [None] * len(self._nodes)
        out = self._values[self._output]
        node_grads[self._output] = np.full(out.shape, float(upstream))
        for nid in range(self._output, -1, -1):
            g = node_grads[nid]
            if g is None:
                continue
            spec = self._nodes[nid]
            if spec.op == "param":
                grads.accumulate(spec.name, g)
                continue
            if spec.op == "input":
                continue
            in_vals = [self._values[i] for i in spec.inputs]
            in_grads = OPS[spec.op].backward(g, in_vals, self._values[nid], self._aux[nid], spec.attrs)
            for i, ig in zip(spec.inputs, in_grads):
                if ig is None:
                    continue
                node_grads[i] = ig if node_grads[i] is None else node_grads[i] + ig
        self._node_grads = node_grads
        return grads

    def grad_of(self, node: Node) -> np.ndarray | None:
        """Gradient of the output w.r.t. ``node`` from the last backward pass."""
        if self._node_grads is None:
            raise GraphStateError("backward has not been run")
        return self._node_grads[node.id]


# ---------------------------------------------------------------------------
# gradient checking


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def check_gradients(graph: Graph, params: Mapping[str, np.ndarray], inputs: Mapping[str, np.ndarray],
                    h: float = 1e-5, *, seed: int | None = None, max_entries: int | None = None) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    When ``seed`` is given, dropout is active and every evaluation replays the
    same masks.  ``max_entries`` samples that many parameter entries per array
    (deterministically) instead of visiting all of them.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-7, 1e-3]")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def rng():
        return None if seed is None else np.random.default_rng(seed)

    graph.forward(params, inputs, rng())
    analytic = graph.backward(1.0)
    worst = 0.0
    pick = np.random.default_rng(0)
    for name in graph.param_names:
        arr = params[name]
        idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            idx = np.sort(pick.choice(arr.size, size=max_entries, replace=False))
        flat = arr.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(graph.forward(params, inputs, rng()))
            flat[i] = orig - h
            fm = float(graph.forward(params, inputs, rng()))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradientCheckError(f"non-finite output perturbing {name}[{i}]")
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, _rel_err(float(analytic[name].reshape(-1)[i]), numeric))
    # leave caches consistent with the unperturbed point
    graph.forward(params, inputs, rng())
    return worst
