"""Reverse-mode automatic differentiation on a single-use tape.

Values are dense float64 C-order numpy arrays. Every operation records a
node holding the forward result and one vector-Jacobian closure per parent;
``Tape.backward`` sweeps the node list in reverse creation order, which is a
valid topological order because parents are always created before children.

A tape is meant to be built, differentiated once (or a few times with
``Tape.gradient``), and discarded. Tapes are not thread-safe; concurrent
evaluations must use independent tapes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

# Scan node values for NaN/Inf as they are recorded. Costs a few percent of
# runtime at desk scale and turns silent numerical blowups into exceptions.
CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """A tensor produced by an operation contains NaN or Inf."""


def as_tensor(x) -> np.ndarray:
    """Coerce to a float64 C-order array (the only tensor type used here)."""
    return np.asarray(x, dtype=np.float64, order="C")


class Node:
    """One operation record: forward value plus vjp closures into parents."""

    __slots__ = ("tape", "value", "parents", "vjps", "requires", "name", "grad")

    def __init__(self, tape, value, parents, vjps, requires, name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.requires = requires
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    # Arithmetic sugar so builder code reads like numpy.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Ordered record of nodes; creation order is a topological order."""

    def __init__(self, check_finite: bool | None = None):
        self.nodes: list[Node] = []
        self.check_finite = CHECK_FINITE if check_finite is None else check_finite

    def leaf(self, value, name: str | None = None, requires: bool = True) -> Node:
        node = Node(self, as_tensor(value), (), (), requires, name)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self.leaf(value, requires=False)

    def record(self, value, parents: tuple, vjps: tuple, name=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite result in operation {name or '<anon>'}")
        requires = any(p.requires for p in parents)
        node = Node(self, value, parents, vjps, requires, name)
        self.nodes.append(node)
        return node

    def backward(self, root: Node, check_finite: bool | None = None) -> None:
        """Accumulate d(root)/d(node) into ``node.grad`` for reachable nodes.

        ``root`` must be scalar. Any previous adjoints on this tape are
        cleared first.
        """
        if root.value.ndim != 0:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        for n in self.nodes:
            n.grad = None
        root.grad = np.ones(())
        check = self.check_finite if check_finite is None else check_finite
        stop = self.nodes.index(root) if self.nodes[-1] is not root else len(self.nodes) - 1
        for node in reversed(self.nodes[: stop + 1]):
            g = node.grad
            if g is None or not node.requires:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                if not parent.requires:
                    continue
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib.copy() if contrib.base is not None else contrib
                else:
                    parent.grad = parent.grad + contrib
        if check:
            for n in self.nodes[: stop + 1]:
                if n.grad is not None and not np.all(np.isfinite(n.grad)):
                    raise NonFiniteError("non-finite adjoint during backward")

    def gradient(self, root: Node, leaves: Mapping[str, Node]) -> dict[str, np.ndarray]:
        """Run backward from ``root`` and collect per-leaf gradients.

        Leaves not on any path to the root get zero gradients.
        """
        self.backward(root)
        out = {}
        for name, leaf in leaves.items():
            out[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        return out


# ---------------------------------------------------------------------------
# op helpers


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise TypeError("at least one argument must be a Node")


def _wrap(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops


def add(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _wrap(t, a), _wrap(t, b)
    return t.record(
        a.value + b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.value.shape), lambda g: _unbroadcast(g, b.value.shape)),
        "add",
    )


def sub(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _wrap(t, a), _wrap(t, b)
    return t.record(
        a.value - b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.value.shape), lambda g: _unbroadcast(-g, b.value.shape)),
        "sub",
    )


def mul(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _wrap(t, a), _wrap(t, b)
    return t.record(
        a.value * b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
        "mul",
    )


def div(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _wrap(t, a), _wrap(t, b)
    inv = 1.0 / b.value
    return t.record(
        a.value * inv,
        (a, b),
        (
            lambda g: _unbroadcast(g * inv, a.value.shape),
            lambda g: _unbroadcast(-g * a.value * inv * inv, b.value.shape),
        ),
        "div",
    )


def neg(a: Node) -> Node:
    return a.tape.record(-a.value, (a,), (lambda g: -g,), "neg")


def square(a: Node) -> Node:
    return a.tape.record(a.value**2, (a,), (lambda g: g * (2.0 * a.value),), "square")


def power(a: Node, k: float) -> Node:
    val = a.value**k
    return a.tape.record(val, (a,), (lambda g: g * (k * a.value ** (k - 1)),), "power")


def exp(a: Node) -> Node:
    val = np.exp(a.value)
    return a.tape.record(val, (a,), (lambda g: g * val,), "exp")


def log(a: Node) -> Node:
    return a.tape.record(np.log(a.value), (a,), (lambda g: g / a.value,), "log")


def sqrt(a: Node) -> Node:
    val = np.sqrt(a.value)
    return a.tape.record(val, (a,), (lambda g: g * (0.5 / val),), "sqrt")


def tanh(a: Node) -> Node:
    val = np.tanh(a.value)
    return a.tape.record(val, (a,), (lambda g: g * (1.0 - val * val),), "tanh")


def sigmoid(a: Node) -> Node:
    val = 1.0 / (1.0 + np.exp(-a.value))
    return a.tape.record(val, (a,), (lambda g: g * val * (1.0 - val),), "sigmoid")


def silu(a: Node) -> Node:
    """x * sigmoid(x), a smooth approximately-linear-for-large-x activation."""
    s = 1.0 / (1.0 + np.exp(-a.value))
    val = a.value * s
    return a.tape.record(val, (a,), (lambda g: g * (s * (1.0 + a.value * (1.0 - s))),), "silu")


def sin(a: Node) -> Node:
    return a.tape.record(np.sin(a.value), (a,), (lambda g: g * np.cos(a.value),), "sin")


def cos(a: Node) -> Node:
    return a.tape.record(np.cos(a.value), (a,), (lambda g: g * -np.sin(a.value),), "cos")


# ---------------------------------------------------------------------------
# reductions, shaping, linear algebra


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.value.shape).copy()

    return a.tape.record(val, (a,), (vjp,), "sum")


def mean_(a: Node, axis=None, keepdims: bool = False) -> Node:
    if axis is None:
        count = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.value.shape[i] for i in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max_(a: Node, axis: int) -> Node:
    """Max along one axis; the gradient routes to the (first) argmax."""
    val = a.value.max(axis=axis)
    idx = a.value.argmax(axis=axis)

    def vjp(g):
        out = np.zeros_like(a.value)
        grid = np.ogrid[tuple(slice(s) for s in val.shape)]
        key = list(grid)
        key.insert(axis if axis >= 0 else a.value.ndim + axis, idx)
        out[tuple(key)] = g
        return out

    return a.tape.record(val, (a,), (vjp,), "max")


def matmul(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _wrap(t, a), _wrap(t, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    return t.record(
        a.value @ b.value,
        (a, b),
        (lambda g: g @ b.value.T, lambda g: a.value.T @ g),
        "matmul",
    )


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    return a.tape.record(a.value.reshape(shape), (a,), (lambda g: g.reshape(old),), "reshape")


def transpose(a: Node, axes=None) -> Node:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.value.ndim)))
    inv = np.argsort(axes)
    return a.tape.record(
        a.value.transpose(axes), (a,), (lambda g: g.transpose(inv),), "transpose"
    )


def getitem(a: Node, key) -> Node:
    def vjp(g):
        out = np.zeros_like(a.value)
        out[key] = g
        return out

    return a.tape.record(a.value[key], (a,), (vjp,), "getitem")


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    t = _tape_of(*nodes)
    nodes = [_wrap(t, n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def make_vjp(i):
        def vjp(g):
            return np.split(g, splits, axis=axis)[i]

        return vjp

    return t.record(
        np.concatenate([n.value for n in nodes], axis=axis),
        tuple(nodes),
        tuple(make_vjp(i) for i in range(len(nodes))),
        "concat",
    )


def broadcast_to(a: Node, shape) -> Node:
    old = a.value.shape
    return a.tape.record(
        np.broadcast_to(a.value, shape).copy(),
        (a,),
        (lambda g: _unbroadcast(g, old),),
        "broadcast",
    )


def softmax(a: Node, axis: int = -1) -> Node:
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * val).sum(axis=axis, keepdims=True)
        return val * (g - dot)

    return a.tape.record(val, (a,), (vjp,), "softmax")


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-6) -> Node:
    """Normalize along the last axis, then apply per-feature gain and bias.

    Fused into one node: the decoder calls this on every block, and the
    composed form would make five extra passes over the activations.
    """
    t = x.tape
    gain, bias = _wrap(t, gain), _wrap(t, bias)
    m = x.value.mean(axis=-1, keepdims=True)
    d = x.value - m
    v = (d * d).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    xn = d * inv
    out = xn * gain.value + bias.value

    def vjp_x(g):
        dxn = g * gain.value
        return inv * (
            dxn
            - dxn.mean(axis=-1, keepdims=True)
            - xn * (dxn * xn).mean(axis=-1, keepdims=True)
        )

    def vjp_gain(g):
        return _unbroadcast(g * xn, gain.value.shape)

    def vjp_bias(g):
        return _unbroadcast(g, bias.value.shape)

    return t.record(out, (x, gain, bias), (vjp_x, vjp_gain, vjp_bias), "layer_norm")


# ---------------------------------------------------------------------------
# structured ops: convolution, bilinear sampling, Cholesky quadratic form


def _pad2d(x: np.ndarray, mode: str) -> np.ndarray:
    if mode == "zero":
        return np.pad(x, ((0, 0), (1, 1), (1, 1)))
    if mode == "periodic":
        return np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="wrap")
    raise ValueError(f"unknown padding mode {mode!r}")


def conv3x3(x: Node, w: Node, b: Node, pad_mode: str = "zero") -> Node:
    """3x3 same-size convolution on a (C_in, H, W) map.

    ``w`` has shape (9*C_in, C_out) with the taps laid out offset-major
    (offset index k = 3*di + dj, each holding a C_in slab). ``pad_mode``
    'periodic' exists for shift-equivariance tests only.
    """
    t = x.tape
    cin, h, wd = x.value.shape
    cout = w.value.shape[1]
    xp = _pad2d(x.value, pad_mode)
    cols = np.empty((h * wd, 9 * cin))
    for k in range(9):
        di, dj = divmod(k, 3)
        cols[:, k * cin : (k + 1) * cin] = (
            xp[:, di : di + h, dj : dj + wd].reshape(cin, -1).T
        )
    out = (cols @ w.value + b.value).T.reshape(cout, h, wd)

    def vjp_x(g):
        gm = g.reshape(cout, -1).T  # (HW, C_out)
        dcols = gm @ w.value.T  # (HW, 9*C_in)
        dxp = np.zeros_like(xp)
        for k in range(9):
            di, dj = divmod(k, 3)
            dxp[:, di : di + h, dj : dj + wd] += (
                dcols[:, k * cin : (k + 1) * cin].T.reshape(cin, h, wd)
            )
        if pad_mode == "zero":
            return dxp[:, 1:-1, 1:-1]
        # periodic: wrap the pad rows/cols back into the interior
        dxp[:, 1, :] += dxp[:, -1, :]
        dxp[:, -2, :] += dxp[:, 0, :]
        core = dxp[:, 1:-1, :]
        core[:, :, 1] += core[:, :, -1]
        core[:, :, -2] += core[:, :, 0]
        return core[:, :, 1:-1]

    def vjp_w(g):
        return cols.T @ g.reshape(cout, -1).T

    def vjp_b(g):
        return g.reshape(cout, -1).sum(axis=1)

    return t.record(out, (x, w, b), (vjp_x, vjp_w, vjp_b), "conv3x3")


def conv1x1(x: Node, w: Node, b: Node) -> Node:
    """Per-pixel channel mix on a (C_in, H, W) map; ``w`` is (C_in, C_out)."""
    cin, h, wd = x.value.shape
    flat = reshape(x, (cin, h * wd))
    out = add(matmul(transpose(flat), w), b)
    return reshape(transpose(out), (w.value.shape[1], h, wd))


def bilinear_sample(fmap: Node, pts: np.ndarray, extent: tuple[float, float]) -> Node:
    """Sample a (C, H, W) map at continuous (x, y) points, clamped at borders.

    Grid nodes are evenly spaced with the corner nodes at ``extent[0]`` and
    ``extent[1]`` on both axes (x indexes columns / W, y indexes rows / H).
    Returns an (n, C) node. Gradients flow into the map, not the points.
    """
    t = fmap.tape
    c, h, w = fmap.value.shape
    lo, hi = extent
    x = np.clip((pts[:, 0] - lo) / (hi - lo) * (w - 1), 0.0, w - 1)
    y = np.clip((pts[:, 1] - lo) / (hi - lo) * (h - 1), 0.0, h - 1)
    x0 = np.minimum(x.astype(np.int64), w - 2) if w > 1 else np.zeros(len(x), np.int64)
    y0 = np.minimum(y.astype(np.int64), h - 2) if h > 1 else np.zeros(len(y), np.int64)
    fx = (x - x0) if w > 1 else np.zeros_like(x)
    fy = (y - y0) if h > 1 else np.zeros_like(y)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    fm = fmap.value
    out = (
        fm[:, y0, x0] * w00 + fm[:, y0, x1] * w01 + fm[:, y1, x0] * w10 + fm[:, y1, x1] * w11
    ).T

    def vjp(g):
        gT = g.T  # (C, n)
        df = np.zeros_like(fm)
        flat = df.reshape(c, -1)
        np.add.at(flat.T, y0 * w + x0, (gT * w00).T)
        np.add.at(flat.T, y0 * w + x1, (gT * w01).T)
        np.add.at(flat.T, y1 * w + x0, (gT * w10).T)
        np.add.at(flat.T, y1 * w + x1, (gT * w11).T)
        return df

    return t.record(out, (fmap,), (vjp,), "bilinear")


def half_quad_chol(x: Node, chol_lower: np.ndarray) -> Node:
    """0.5 * x^T A^{-1} x given the lower Cholesky factor of A.

    Evaluated through triangular solves; A^{-1} is never formed.
    """
    from scipy.linalg import solve_triangular

    w = solve_triangular(chol_lower, x.value, lower=True)
    val = 0.5 * float(w @ w)

    def vjp(g):
        return g * solve_triangular(chol_lower.T, w, lower=False)

    return x.tape.record(np.asarray(val), (x,), (vjp,), "half_quad_chol")


# ---------------------------------------------------------------------------
# Graph: a named-leaf wrapper over the tape, plus the finite-difference oracle


class Graph:
    """A scalar-rooted computation with named leaves.

    ``build`` receives a dict of leaf nodes and returns the scalar root.
    The tape is rebuilt on every ``forward`` call; ``backward`` requires a
    completed forward pass.
    """

    def __init__(self, build: Callable[[dict[str, Node]], Node], leaf_names: Iterable[str]):
        self.build = build
        self.leaf_names = list(leaf_names)
        self.tape: Tape | None = None
        self.leaves: dict[str, Node] | None = None
        self.root: Node | None = None
        self._leaf_values: dict[str, np.ndarray] | None = None

    def forward(self, leaf_values: Mapping[str, np.ndarray]) -> float:
        missing = [n for n in self.leaf_names if n not in leaf_values]
        if missing:
            raise ValueError(f"unbound leaves: {missing}")
        self.tape = Tape()
        self.leaves = {n: self.tape.leaf(leaf_values[n], n) for n in self.leaf_names}
        self._leaf_values = {n: self.leaves[n].value for n in self.leaf_names}
        self.root = self.build(self.leaves)
        if self.root.value.ndim != 0:
            raise ValueError(f"graph root must be scalar, got shape {self.root.shape}")
        if not np.isfinite(self.root.value):
            raise NonFiniteError("non-finite graph value")
        return float(self.root.value)

    def backward(self) -> dict[str, np.ndarray]:
        if self.root is None:
            raise RuntimeError("backward called before forward")
        return self.tape.gradient(self.root, self.leaves)


def finite_diff_check(
    graph: Graph,
    leaf: str,
    step: float,
    entries: Sequence[int] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Perturbs the named leaf entry by entry around the values bound in the
    last ``forward`` call. ``entries`` restricts the check to a subset of
    flat indices (all entries by default). The relative error for entry i is
    |analytic_i - numeric_i| / (|analytic_i| + 1e-8).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if graph.root is None:
        raise RuntimeError("finite_diff_check requires a completed forward pass")
    base = {k: v.copy() for k, v in graph._leaf_values.items()}
    analytic = graph.backward()[leaf].ravel()
    x = base[leaf]
    flat_idx = range(x.size) if entries is None else entries
    worst = 0.0
    for i in flat_idx:
        for sgn in (+1.0, -1.0):
            pert = x.copy().ravel()
            pert[i] += sgn * step
            base[leaf] = pert.reshape(x.shape)
            if sgn > 0:
                f_plus = graph.forward(base)
            else:
                f_minus = graph.forward(base)
        base[leaf] = x
        numeric = (f_plus - f_minus) / (2.0 * step)
        if not np.isfinite(numeric):
            raise NonFiniteError(f"non-finite difference quotient at entry {i}")
        err = abs(analytic[i] - numeric) / (abs(analytic[i]) + 1e-8)
        worst = max(worst, err)
    graph.forward(base)  # restore original binding
    return worst
