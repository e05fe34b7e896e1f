"""A small reverse-mode autodiff tape over numpy arrays.

A :class:`Graph` records primitive ops in insertion order, which is also a
valid topological order. Nodes are computed eagerly as soon as all of their
inputs carry values, so model code reads like plain numpy, but the recorded
graph can be replayed later with different leaf bindings via
:func:`evaluate`. :func:`backward` walks the tape in reverse.

Only the ops the models in this package need are provided.
"""
import math

import numpy as np

from vacs import kernels


class GraphError(ValueError):
    """Raised for malformed graphs: shape mismatches, unbound leaves."""


class Node:
    __slots__ = ("graph", "index", "op", "inputs", "attrs", "value", "cache",
                 "kind", "name")

    def __init__(self, graph, index, op, inputs, attrs, kind=None, name=None):
        self.graph = graph
        self.index = index
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.kind = kind
        self.name = name
        self.value = None
        self.cache = None

    @property
    def shape(self):
        return None if self.value is None else self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Node({self.index}, {label}, shape={self.shape})"

    # sugar so small expressions read naturally
    def __add__(self, other):
        return self.graph.add(self, other)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _log_softmax(x, allowed):
    if allowed is not None:
        x = np.where(allowed, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# op table: name -> (forward(values, attrs) -> (value, cache),
#                    backward(g, values, out, cache, attrs) -> grads per input)


def _fw_add(v, a):
    return v[0] + v[1], None


def _bw_add(g, v, out, cache, a):
    return [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)]


def _fw_sub(v, a):
    return v[0] - v[1], None


def _bw_sub(g, v, out, cache, a):
    return [_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)]


def _fw_mul(v, a):
    return v[0] * v[1], None


def _bw_mul(g, v, out, cache, a):
    return [_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)]


def _fw_scale(v, a):
    return v[0] * a["c"], None


def _bw_scale(g, v, out, cache, a):
    return [g * a["c"]]


def _fw_matmul(v, a):
    x, w = v
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise GraphError(f"matmul shapes {x.shape} @ {w.shape}")
    return x @ w, None


def _bw_matmul(g, v, out, cache, a):
    x, w = v
    gx = g @ w.T
    if x.ndim == 1:
        gw = np.outer(x, g)
    else:
        gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return [gx, gw]


def _fw_tanh(v, a):
    return np.tanh(v[0]), None


def _bw_tanh(g, v, out, cache, a):
    return [g * (1.0 - out * out)]


def _fw_sigmoid(v, a):
    return kernels._sigmoid(np.asarray(v[0], dtype=np.float64)), None


def _bw_sigmoid(g, v, out, cache, a):
    return [g * out * (1.0 - out)]


def _fw_relu(v, a):
    return np.maximum(v[0], 0.0), None


def _bw_relu(g, v, out, cache, a):
    return [g * (v[0] > 0)]


def _fw_exp(v, a):
    return np.exp(v[0]), None


def _bw_exp(g, v, out, cache, a):
    return [g * out]


def _fw_log(v, a):
    return np.log(v[0]), None


def _bw_log(g, v, out, cache, a):
    return [g / v[0]]


def _fw_concat(v, a):
    ax = a["axis"]
    lead = [x.shape[:ax] if ax >= 0 else x.shape[:x.ndim + ax] for x in v]
    if any(s != lead[0] for s in lead):
        raise GraphError(f"concat leading shapes differ: {[x.shape for x in v]}")
    return np.concatenate(v, axis=ax), [x.shape[ax] for x in v]


def _bw_concat(g, v, out, cache, a):
    cuts = np.cumsum(cache)[:-1]
    return np.split(g, cuts, axis=a["axis"])


def _fw_stack(v, a):
    if any(x.shape != v[0].shape for x in v):
        raise GraphError(f"stack shapes differ: {[x.shape for x in v]}")
    return np.stack(v, axis=a["axis"]), None


def _bw_stack(g, v, out, cache, a):
    return [np.take(g, k, axis=a["axis"]) for k in range(len(v))]


def _fw_slice(v, a):
    idx = [slice(None)] * v[0].ndim
    idx[a["axis"]] = slice(a["start"], a["stop"])
    return v[0][tuple(idx)], tuple(idx)


def _bw_slice(g, v, out, cache, a):
    full = np.zeros_like(v[0])
    full[cache] = g
    return [full]


def _fw_reshape(v, a):
    return v[0].reshape(a["shape"]), None


def _bw_reshape(g, v, out, cache, a):
    return [g.reshape(v[0].shape)]


def _fw_gather(v, a):
    table = v[0]
    ids = a["ids"]
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise GraphError(f"gather ids out of range for table of {table.shape[0]} rows")
    return table[ids], None


def _bw_gather(g, v, out, cache, a):
    full = np.zeros_like(v[0])
    np.add.at(full, a["ids"].reshape(-1), g.reshape(-1, v[0].shape[-1]))
    return [full]


def _fw_softmax(v, a):
    x = v[0]
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True), None


def _bw_softmax(g, v, out, cache, a):
    return [out * (g - np.sum(g * out, axis=-1, keepdims=True))]


def _fw_log_softmax(v, a):
    return _log_softmax(v[0], a.get("allowed")), None


def _bw_log_softmax(g, v, out, cache, a):
    p = np.exp(out)
    g = np.where(np.isfinite(out), g, 0.0)
    return [g - p * np.sum(g, axis=-1, keepdims=True)]


def _fw_pick(v, a):
    x, idx = v[0], a["idx"]
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise GraphError(f"pick expects (N, K) values and (N,) indices, got {x.shape}, {idx.shape}")
    return x[np.arange(x.shape[0]), idx], None


def _bw_pick(g, v, out, cache, a):
    full = np.zeros_like(v[0])
    full[np.arange(full.shape[0]), a["idx"]] = g
    return [full]


def _fw_sum(v, a):
    return np.sum(v[0], axis=a["axis"]), None


def _bw_sum(g, v, out, cache, a):
    ax = a["axis"]
    if ax is None:
        return [np.broadcast_to(g, v[0].shape).copy()]
    return [np.broadcast_to(np.expand_dims(g, ax), v[0].shape).copy()]


def _fw_max(v, a):
    x = v[0]
    arg = np.argmax(x, axis=a["axis"])
    return np.take_along_axis(x, np.expand_dims(arg, a["axis"]), a["axis"]).squeeze(a["axis"]), arg


def _bw_max(g, v, out, cache, a):
    full = np.zeros_like(v[0])
    np.put_along_axis(full, np.expand_dims(cache, a["axis"]), np.expand_dims(g, a["axis"]), a["axis"])
    return [full]


def _fw_lstm(v, a):
    x, state, wx, wh, b = v
    H = wh.shape[0]
    if state.ndim != 2 or state.shape[1] != 2 * H:
        raise GraphError(f"lstm state must be (B, {2 * H}), got {state.shape}")
    if x.shape[-1] != wx.shape[0] or wx.shape[1] != 4 * H or b.shape != (4 * H,):
        raise GraphError(f"lstm weights {wx.shape}, {wh.shape}, {b.shape} do not fit input {x.shape}")
    h_prev = state[:, :H]
    c_prev = np.ascontiguousarray(state[:, H:])
    pre = x @ wx + h_prev @ wh + b
    gates, c, tc, h = kernels.lstm_forward(pre, c_prev)
    new = np.concatenate([h, c], axis=1)
    m = a.get("mask")
    if m is not None:
        m = m[:, None]
        new = m * new + (1.0 - m) * state
    return new, (gates, c_prev, tc)


def _bw_lstm(g, v, out, cache, a):
    x, state, wx, wh, b = v
    gates, c_prev, tc = cache
    H = wh.shape[0]
    m = a.get("mask")
    if m is not None:
        m = m[:, None]
        g_new, g_pass = g * m, g * (1.0 - m)
    else:
        g_new, g_pass = g, None
    dpre, dc_prev = kernels.lstm_backward(gates, c_prev, tc,
                                          np.ascontiguousarray(g_new[:, :H]),
                                          np.ascontiguousarray(g_new[:, H:]))
    h_prev = state[:, :H]
    dstate = np.concatenate([dpre @ wh.T, dc_prev], axis=1)
    if g_pass is not None:
        dstate += g_pass
    return [dpre @ wx.T, dstate, x.T @ dpre, h_prev.T @ dpre, dpre.sum(axis=0)]


OPS = {
    "add": (_fw_add, _bw_add),
    "sub": (_fw_sub, _bw_sub),
    "mul": (_fw_mul, _bw_mul),
    "scale": (_fw_scale, _bw_scale),
    "matmul": (_fw_matmul, _bw_matmul),
    "tanh": (_fw_tanh, _bw_tanh),
    "sigmoid": (_fw_sigmoid, _bw_sigmoid),
    "relu": (_fw_relu, _bw_relu),
    "exp": (_fw_exp, _bw_exp),
    "log": (_fw_log, _bw_log),
    "concat": (_fw_concat, _bw_concat),
    "stack": (_fw_stack, _bw_stack),
    "slice": (_fw_slice, _bw_slice),
    "reshape": (_fw_reshape, _bw_reshape),
    "gather": (_fw_gather, _bw_gather),
    "softmax": (_fw_softmax, _bw_softmax),
    "log_softmax": (_fw_log_softmax, _bw_log_softmax),
    "pick": (_fw_pick, _bw_pick),
    "sum": (_fw_sum, _bw_sum),
    "max": (_fw_max, _bw_max),
    "lstm": (_fw_lstm, _bw_lstm),
}

LEAF_KINDS = ("param", "input", "const")


class Graph:
    """Ordered op tape. Leaves are parameters, named inputs, or constants."""

    def __init__(self):
        self.nodes = []
        self.leaves = {}

    def __len__(self):
        return len(self.nodes)

    def _leaf(self, kind, name, value):
        if name is not None and name in self.leaves:
            raise GraphError(f"duplicate leaf name {name!r}")
        node = Node(self, len(self.nodes), "leaf", [], {}, kind=kind, name=name)
        if value is not None:
            node.value = np.asarray(value, dtype=np.float64)
        self.nodes.append(node)
        if name is not None:
            self.leaves[name] = node
        return node

    def param(self, name, value):
        return self._leaf("param", name, value)

    def input(self, name, value=None):
        return self._leaf("input", name, value)

    def const(self, value):
        return self._leaf("const", None, value)

    def _lift(self, x):
        if isinstance(x, Node):
            if x.graph is not self:
                raise GraphError("node belongs to a different graph")
            return x
        return self.const(x)

    def _op(self, op, inputs, **attrs):
        inputs = [self._lift(x) for x in inputs]
        node = Node(self, len(self.nodes), op, inputs, attrs)
        self.nodes.append(node)
        if all(x.value is not None for x in inputs):
            _run(node)
        return node

    # elementwise / linear algebra
    def add(self, a, b):
        return self._op("add", [a, b])

    def sub(self, a, b):
        return self._op("sub", [a, b])

    def mul(self, a, b):
        return self._op("mul", [a, b])

    def scale(self, a, c):
        return self._op("scale", [a], c=float(c))

    def matmul(self, a, b):
        return self._op("matmul", [a, b])

    def tanh(self, a):
        return self._op("tanh", [a])

    def sigmoid(self, a):
        return self._op("sigmoid", [a])

    def relu(self, a):
        return self._op("relu", [a])

    def exp(self, a):
        return self._op("exp", [a])

    def log(self, a):
        return self._op("log", [a])

    # structure
    def concat(self, nodes, axis=-1):
        return self._op("concat", list(nodes), axis=axis)

    def stack(self, nodes, axis=0):
        return self._op("stack", list(nodes), axis=axis)

    def slice(self, a, start, stop, axis=-1):
        return self._op("slice", [a], start=start, stop=stop, axis=axis)

    def reshape(self, a, shape):
        return self._op("reshape", [a], shape=tuple(shape))

    def gather(self, table, ids):
        """Row lookup ``table[ids]``; ``ids`` is a constant integer array."""
        return self._op("gather", [table], ids=np.asarray(ids, dtype=np.int64))

    def pick(self, a, idx):
        """``a[n, idx[n]]`` for a 2-D node and constant integer indices."""
        return self._op("pick", [a], idx=np.asarray(idx, dtype=np.int64))

    # normalisation / reductions
    def softmax(self, a):
        return self._op("softmax", [a])

    def log_softmax(self, a, allowed=None):
        """Log-softmax over the last axis; entries where ``allowed`` is False get -inf."""
        if allowed is not None:
            allowed = np.asarray(allowed, dtype=bool)
        return self._op("log_softmax", [a], allowed=allowed)

    def sum(self, a, axis=None):
        return self._op("sum", [a], axis=axis)

    def mean(self, a):
        a = self._lift(a)
        n = a.value.size if a.value is not None else None
        if n is None:
            raise GraphError("mean needs a bound input to know its size")
        return self.scale(self.sum(a), 1.0 / n)

    def max(self, a, axis):
        return self._op("max", [a], axis=axis)

    def lstm(self, x, state, wx, wh, b, mask=None):
        """Fused LSTM step on a packed (B, 2H) ``[h | c]`` state.

        Rows where ``mask`` is 0 carry ``state`` through unchanged.
        """
        if mask is not None:
            mask = np.asarray(mask, dtype=np.float64)
        return self._op("lstm", [x, state, wx, wh, b], mask=mask)


def _run(node):
    fw = OPS[node.op][0]
    vals = [x.value for x in node.inputs]
    try:
        with np.errstate(all="ignore"):
            node.value, node.cache = fw(vals, node.attrs)
    except GraphError as e:
        raise GraphError(f"node {node.index} ({node.op}): {e}") from None
    except ValueError as e:
        raise GraphError(f"node {node.index} ({node.op}): shape mismatch: {e}") from None


def evaluate(graph, inputs=None, outputs=None):
    """Re-run the tape with leaf values taken from ``inputs`` (by name).

    Leaves not named in ``inputs`` keep their current value; a leaf with no
    value at all is an error. Returns ``{name_or_index: value}`` for the
    requested outputs (default: every named leaf plus the last node).
    """
    inputs = inputs or {}
    unknown = set(inputs) - set(graph.leaves)
    if unknown:
        raise GraphError(f"no leaves named {sorted(unknown)}")
    for node in graph.nodes:
        if node.op == "leaf":
            if node.name in inputs:
                new = np.asarray(inputs[node.name], dtype=np.float64)
                if node.value is not None and new.shape != node.value.shape:
                    raise GraphError(f"leaf {node.name!r}: bound shape {new.shape}, "
                                     f"expected {node.value.shape}")
                node.value = new
            elif node.value is None:
                raise GraphError(f"unbound leaf {node.name or node.index}")
        else:
            _run(node)
    if outputs is None:
        outputs = [graph.nodes[-1]]
    result = {}
    for out in outputs:
        node = graph.leaves[out] if isinstance(out, str) else out
        result[node.name if node.name is not None else node.index] = node.value
    return result


def backward(graph, output, wrt=None):
    """Gradients of a scalar ``output`` w.r.t. parameter leaves.

    ``wrt`` restricts or extends the set (any leaf names); by default all
    ``param`` leaves are returned, zeros for those the output ignores.
    """
    if output.value is None:
        raise GraphError("backward called before the output was evaluated")
    if output.value.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {output.value.shape}")
    if wrt is None:
        targets = [n for n in graph.leaves.values() if n.kind == "param"]
    else:
        targets = [graph.leaves[name] for name in wrt]
    target_idx = {n.index for n in targets}
    live = [False] * (output.index + 1)
    for node in graph.nodes[:output.index + 1]:
        live[node.index] = node.index in target_idx or any(live[x.index] for x in node.inputs)
    grads = [None] * (output.index + 1)
    grads[output.index] = np.ones_like(output.value)
    for node in reversed(graph.nodes[:output.index + 1]):
        g = grads[node.index]
        if g is None or node.op == "leaf" or not live[node.index]:
            continue
        vals = [x.value for x in node.inputs]
        with np.errstate(all="ignore"):
            gins = OPS[node.op][1](g, vals, node.value, node.cache, node.attrs)
        for x, gx in zip(node.inputs, gins):
            if gx is None or not live[x.index]:
                continue
            if grads[x.index] is None:
                grads[x.index] = np.array(gx, dtype=np.float64)
            else:
                grads[x.index] = grads[x.index] + gx
    out = {}
    for node in targets:
        g = grads[node.index] if node.index <= output.index else None
        out[node.name] = np.zeros_like(node.value) if g is None else g.reshape(node.value.shape)
    return out


def grad_check(fn, point, step=1e-5):
    """Max relative error between tape gradients and central differences.

    ``fn(graph, leaves)`` builds a scalar output from parameter leaves
    created from ``point`` (a dict of arrays, or a single array bound as
    ``"x"``). Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if not isinstance(point, dict):
        point = {"x": point}
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    g = Graph()
    leaves = {k: g.param(k, v) for k, v in point.items()}
    out = fn(g, leaves)
    if not isinstance(out, Node):
        # constant function: no dependence on the point
        if not np.isfinite(out):
            raise ValueError("function value is not finite")
        return 0.0
    if not np.all(np.isfinite(out.value)):
        raise ValueError("function value is not finite")
    analytic = backward(g, out, wrt=list(point))
    worst = 0.0
    for name, base in point.items():
        flat = base.reshape(-1)
        for k in range(flat.size):
            vals = []
            for delta in (step, -step):
                probe = flat.copy()
                probe[k] += delta
                v = evaluate(g, {name: probe.reshape(base.shape)}, [out])
                v = float(next(iter(v.values())))
                if not math.isfinite(v):
                    raise ValueError("function value is not finite")
                vals.append(v)
            numeric = (vals[0] - vals[1]) / (2 * step)
            a = float(analytic[name].reshape(-1)[k])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        evaluate(g, {name: base})
    return worst
