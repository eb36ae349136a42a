"""Minimal define-by-run reverse-mode differentiation over float64 numpy arrays.

A :class:`Graph` is a tape. Every op evaluates eagerly, caches its output and
records a vector-Jacobian product closure; :meth:`Graph.backward` replays the
tape in reverse. Graphs are cheap and meant to be rebuilt for every step.

    g = Graph()
    w = g.param("w", np.array([1.5]))
    loss = g.sum(g.clip(w, 0.8, 1.2))
    grads = g.backward(loss)      # {"w": array([0.])}
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Node",
    "Graph",
    "grad_check",
    "GradCheckResult",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    if a == b:
        return True
    for small, big in ((a, b), (b, a)):
        if int(np.prod(small)) == 1 and len(small) <= len(big):
            return True
        if len(small) < len(big) and big[len(big) - len(small):] == small:
            return True
    return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One value on the tape. Arithmetic operators dispatch to the owning graph."""

    __slots__ = ("graph", "index", "value", "op", "parents", "vjp", "name")

    def __init__(self, graph, index, value, op, parents, vjp, name=None):
        self.graph = graph
        self.index = index
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.shape})"

    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __neg__(self):
        return self.graph.neg(self)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)


class Graph:
    """Tape of eagerly evaluated ops.

    With ``record=False`` ops still evaluate but keep no backward closures,
    which is what rollouts use.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    # -- leaves -----------------------------------------------------------

    def param(self, name: str, value) -> Node:
        """Differentiable leaf; gradients are reported under ``name``."""
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered on this graph")
        node = self._push("param", _as_array(value), (), None, name=name)
        self.params[name] = node
        return node

    def input(self, value, name: str | None = None) -> Node:
        return self._push("input", _as_array(value), (), None, name=name)

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise ValueError("node belongs to a different graph")
            return x
        return self.input(x)

    def _push(self, op, value, parents, vjp, name=None) -> Node:
        node = Node(self, len(self.nodes), value, op, parents, vjp if self.record else None, name)
        if self.record:
            self.nodes.append(node)
        else:
            node.parents = ()
        return node

    # -- elementwise binary -------------------------------------------------

    def _binary_shapes(self, op, a: Node, b: Node):
        if not _broadcast_ok(a.shape, b.shape):
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")

    def add(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        self._binary_shapes("add", a, b)
        sa, sb = a.shape, b.shape
        return self._push(
            "add", a.value + b.value, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    def sub(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        self._binary_shapes("sub", a, b)
        sa, sb = a.shape, b.shape
        return self._push(
            "sub", a.value - b.value, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        )

    def mul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        self._binary_shapes("mul", a, b)
        av, bv = a.value, b.value
        return self._push(
            "mul", av * bv, (a, b),
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        )

    def minimum(self, a, b) -> Node:
        """Elementwise min; the gradient goes to the smaller argument, ties to ``a``."""
        a, b = self._lift(a), self._lift(b)
        self._binary_shapes("minimum", a, b)
        take_a = a.value <= b.value
        sa, sb = a.shape, b.shape
        return self._push(
            "minimum", np.where(take_a, a.value, b.value), (a, b),
            lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)),
        )

    def neg(self, a) -> Node:
        a = self._lift(a)
        return self._push("neg", -a.value, (a,), lambda g: (-g,))

    # -- linear algebra -----------------------------------------------------

    def matmul(self, a, b) -> Node:
        """``a @ b`` for a of shape (n,) or (B, n) and b of shape (n, m)."""
        a, b = self._lift(a), self._lift(b)
        if b.value.ndim != 2 or a.value.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        av, bv = a.value, b.value

        def vjp(g):
            if av.ndim == 1:
                return g @ bv.T, np.outer(av, g)
            return g @ bv.T, av.T @ g

        return self._push("matmul", av @ bv, (a, b), vjp)

    # -- elementwise unary --------------------------------------------------

    def sigmoid(self, a) -> Node:
        a = self._lift(a)
        y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
        return self._push("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))

    def tanh(self, a) -> Node:
        a = self._lift(a)
        y = np.tanh(a.value)
        return self._push("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))

    def exp(self, a) -> Node:
        a = self._lift(a)
        y = np.exp(a.value)
        return self._push("exp", y, (a,), lambda g: (g * y,))

    def log(self, a) -> Node:
        a = self._lift(a)
        if np.any(a.value <= 0):
            raise ValueError(f"log: non-positive input (min {a.value.min()!r})")
        x = a.value
        return self._push("log", np.log(x), (a,), lambda g: (g / x,))

    def square(self, a) -> Node:
        a = self._lift(a)
        x = a.value
        return self._push("square", x * x, (a,), lambda g: (2.0 * g * x,))

    def clip(self, a, lo: float, hi: float) -> Node:
        """Clamp to [lo, hi]; identity gradient inside the closed interval, zero outside."""
        a = self._lift(a)
        x = a.value
        inside = (x >= lo) & (x <= hi)
        return self._push("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))

    # -- structural ---------------------------------------------------------

    def sum(self, a, axis: int | None = None) -> Node:
        a = self._lift(a)
        shape = a.shape
        if axis is None:
            return self._push("sum", np.asarray(a.value.sum()), (a,),
                              lambda g: (np.broadcast_to(g, shape).copy(),))
        y = a.value.sum(axis=axis)
        return self._push("sum", y, (a,),
                          lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))

    def mean(self, a, axis: int | None = None) -> Node:
        a = self._lift(a)
        shape = a.shape
        n = a.value.size if axis is None else shape[axis]
        y = np.asarray(a.value.mean(axis=axis))
        if axis is None:
            return self._push("mean", y, (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))
        return self._push("mean", y, (a,),
                          lambda g: (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),))

    def concat(self, items: Sequence, axis: int = -1) -> Node:
        nodes = [self._lift(x) for x in items]
        if not nodes:
            raise ShapeError("concat: no operands")
        ref = nodes[0].shape
        ax = axis % len(ref)
        for n in nodes[1:]:
            s = n.shape
            if len(s) != len(ref) or s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:]:
                raise ShapeError(f"concat: shapes {[m.shape for m in nodes]} do not conform on axis {axis}")
        sizes = [n.shape[ax] for n in nodes]
        cuts = np.cumsum(sizes)[:-1]
        return self._push(
            "concat", np.concatenate([n.value for n in nodes], axis=ax), tuple(nodes),
            lambda g: tuple(np.split(g, cuts, axis=ax)),
        )

    def stack(self, items: Sequence, axis: int = 0) -> Node:
        nodes = [self._lift(x) for x in items]
        shapes = {n.shape for n in nodes}
        if len(shapes) != 1:
            raise ShapeError(f"stack: shapes {sorted(shapes)} differ")
        return self._push(
            "stack", np.stack([n.value for n in nodes], axis=axis), tuple(nodes),
            lambda g: tuple(np.moveaxis(g, axis, 0)),
        )

    def slice(self, a, index) -> Node:
        a = self._lift(a)
        shape = a.shape

        def vjp(g):
            out = np.zeros(shape)
            out[index] = g
            return (out,)

        return self._push("slice", a.value[index], (a,), vjp)

    def reshape(self, a, shape) -> Node:
        a = self._lift(a)
        old = a.shape
        try:
            y = a.value.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from exc
        return self._push("reshape", y, (a,), lambda g: (g.reshape(old),))

    # -- fused recurrent cell ------------------------------------------------

    def gru_cell(self, x, h, wz, uz, bz, wr, ur, br, wh, uh, bh) -> Node:
        """One GRU step as a single tape entry.

        z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
        c = tanh(x Wh + (r*h) Uh + bh), h' = (1 - z) h + z c.
        ``x`` is (I,) or (B, I); ``h`` matches with H columns.
        """
        ops = [self._lift(v) for v in (x, h, wz, uz, bz, wr, ur, br, wh, uh, bh)]
        xn, hn = ops[0], ops[1]
        if xn.value.ndim != hn.value.ndim or xn.value.ndim not in (1, 2):
            raise ShapeError(f"gru_cell: input {xn.shape} and hidden {hn.shape} must both be 1-D or 2-D")
        n_in, n_h = xn.shape[-1], hn.shape[-1]
        expected = [(n_in, n_h), (n_h, n_h), (n_h,)] * 3
        for node, shape in zip(ops[2:], expected):
            if node.shape != shape:
                raise ShapeError(
                    f"gru_cell: weight shape {node.shape}, expected {shape} "
                    f"for input {xn.shape}, hidden {hn.shape}"
                )
        if xn.value.ndim == 2 and xn.shape[0] != hn.shape[0]:
            raise ShapeError(f"gru_cell: batch sizes differ, {xn.shape} vs {hn.shape}")

        flat = xn.value.ndim == 1
        xv = np.atleast_2d(xn.value)
        hv = np.atleast_2d(hn.value)
        Wz, Uz, bz_, Wr, Ur, br_, Wh, Uh, bh_ = (n.value for n in ops[2:])

        # same association order as gru_sequence, so both agree bit for bit
        z = 0.5 * (1.0 + np.tanh(0.5 * ((xv @ Wz + bz_) + hv @ Uz)))
        r = 0.5 * (1.0 + np.tanh(0.5 * ((xv @ Wr + br_) + hv @ Ur)))
        rh = r * hv
        c = np.tanh((xv @ Wh + bh_) + rh @ Uh)
        out = hv + z * (c - hv)

        def vjp(g):
            g = np.atleast_2d(g)
            dz = g * (c - hv)
            dc = g * z
            dh = g * (1.0 - z)
            dac = dc * (1.0 - c * c)
            drh = dac @ Uh.T
            dh += drh * r
            dar = drh * hv * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dx = daz @ Wz.T + dar @ Wr.T + dac @ Wh.T
            dh += daz @ Uz.T + dar @ Ur.T
            grads = (
                xv.T @ daz, hv.T @ daz, daz.sum(0),
                xv.T @ dar, hv.T @ dar, dar.sum(0),
                xv.T @ dac, rh.T @ dac, dac.sum(0),
            )
            if flat:
                dx, dh = dx[0], dh[0]
            return (dx, dh) + grads

        return self._push("gru_cell", out[0] if flat else out, tuple(ops), vjp)

    def gru_sequence(self, xs, h0, wz, uz, bz, wr, ur, br, wh, uh, bh) -> Node:
        """Run the :meth:`gru_cell` recurrence over a whole input sequence.

        ``xs`` is (L, I) with ``h0`` (H,), or (L, B, I) with ``h0`` (B, H).
        Returns every hidden state, shape (L, H) or (L, B, H). Input
        projections and weight gradients are batched over time, so this is much
        cheaper than L separate cells when the inputs do not depend on outputs.
        """
        ops = [self._lift(v) for v in (xs, h0, wz, uz, bz, wr, ur, br, wh, uh, bh)]
        xn, hn = ops[0], ops[1]
        if xn.value.ndim != hn.value.ndim + 1 or hn.value.ndim not in (1, 2):
            raise ShapeError(f"gru_sequence: inputs {xn.shape} and initial hidden {hn.shape} do not conform")
        n_in, n_h = xn.shape[-1], hn.shape[-1]
        expected = [(n_in, n_h), (n_h, n_h), (n_h,)] * 3
        for node, shape in zip(ops[2:], expected):
            if node.shape != shape:
                raise ShapeError(f"gru_sequence: weight shape {node.shape}, expected {shape}")
        if hn.value.ndim == 2 and xn.shape[1] != hn.shape[0]:
            raise ShapeError(f"gru_sequence: batch sizes differ, {xn.shape} vs {hn.shape}")

        Wz, Uz, bz_, Wr, Ur, br_, Wh, Uh, bh_ = (n.value for n in ops[2:])
        X = xn.value
        L = X.shape[0]
        xz = X @ Wz + bz_
        xr = X @ Wr + br_
        xh = X @ Wh + bh_
        H = np.empty((L + 1,) + hn.shape)
        H[0] = hn.value
        Z = np.empty((L,) + hn.shape)
        R = np.empty_like(Z)
        C = np.empty_like(Z)
        for t in range(L):
            h = H[t]
            z = 0.5 * (1.0 + np.tanh(0.5 * (xz[t] + h @ Uz)))
            r = 0.5 * (1.0 + np.tanh(0.5 * (xr[t] + h @ Ur)))
            c = np.tanh(xh[t] + (r * h) @ Uh)
            H[t + 1] = h + z * (c - h)
            Z[t], R[t], C[t] = z, r, c

        def vjp(G):
            DAZ = np.empty_like(Z)
            DAR = np.empty_like(Z)
            DAC = np.empty_like(Z)
            carry = np.zeros(hn.shape)
            for t in range(L - 1, -1, -1):
                gt = G[t] + carry
                h, z, r, c = H[t], Z[t], R[t], C[t]
                dac = gt * z * (1.0 - c * c)
                drh = dac @ Uh.T
                daz = gt * (c - h) * z * (1.0 - z)
                dar = drh * h * r * (1.0 - r)
                carry = gt * (1.0 - z) + drh * r + daz @ Uz.T + dar @ Ur.T
                DAZ[t], DAR[t], DAC[t] = daz, dar, dac
            Hp = H[:-1]
            RH = R * Hp
            Xf = X.reshape(-1, n_in)

            def flat(a):
                return a.reshape(-1, n_h)

            dX = DAZ @ Wz.T + DAR @ Wr.T + DAC @ Wh.T
            return (
                dX, carry,
                Xf.T @ flat(DAZ), flat(Hp).T @ flat(DAZ), flat(DAZ).sum(0),
                Xf.T @ flat(DAR), flat(Hp).T @ flat(DAR), flat(DAR).sum(0),
                Xf.T @ flat(DAC), flat(RH).T @ flat(DAC), flat(DAC).sum(0),
            )

        return self._push("gru_sequence", H[1:], tuple(ops), vjp)

    # -- reverse pass ----------------------------------------------------------

    def backward(self, output: Node | None = None, seed: float = 1.0) -> dict[str, np.ndarray]:
        """Gradients of a scalar output with respect to every parameter leaf.

        Parameters unreachable from ``output`` get zero gradients.
        """
        if not self.record:
            raise RuntimeError("backward on a graph built with record=False")
        if not self.nodes:
            raise RuntimeError("backward called before any forward evaluation")
        if output is None:
            output = self.nodes[-1]
        if output.graph is not self:
            raise ValueError("output node belongs to a different graph")
        if output.value.size != 1:
            raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")

        grads: list[np.ndarray | None] = [None] * (output.index + 1)
        grads[output.index] = np.full(output.shape, float(seed))
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads[node.index]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = np.array(pg, dtype=np.float64, copy=True)
                else:
                    grads[parent.index] += pg
        self._grads = grads
        out = {}
        for name, node in self.params.items():
            g = grads[node.index] if node.index < len(grads) else None
            out[name] = np.zeros_like(node.value) if g is None else g
        return out

    def grad_of(self, node: Node) -> np.ndarray | None:
        """Gradient reaching any node in the last backward pass (None if unreached)."""
        grads = getattr(self, "_grads", None)
        if grads is None:
            raise RuntimeError("no backward pass has run on this graph")
        return grads[node.index] if node.index < len(grads) else None


class GradCheckResult(dict):
    """Mapping ``name -> max relative error`` with an overall ``passed`` flag."""

    def __init__(self, errors: dict[str, float], tol: float):
        super().__init__(errors)
        self.tol = tol

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.values())

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.items() if v > self.tol}


def grad_check(
    loss_fn: Callable[[Graph, dict[str, Node]], Node],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    tol: float = 1e-4,
    analytic: dict[str, np.ndarray] | None = None,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare reverse-mode gradients with central differences, elementwise.

    ``loss_fn(graph, nodes)`` must build a scalar loss from the parameter
    nodes. ``analytic`` overrides the reverse-mode gradients (used to check the
    checker). Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = {k: _as_array(v).copy() for k, v in params.items()}

    def evaluate(values, record):
        g = Graph(record=record)
        nodes = {k: g.param(k, v) for k, v in values.items()} if record else {
            k: g.input(v, name=k) for k, v in values.items()
        }
        return g, loss_fn(g, nodes)

    if analytic is None:
        g, out = evaluate(params, True)
        analytic = g.backward(out)

    errors = {}
    for name, base in params.items():
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            probe = dict(params)
            plus = base.copy()
            plus.reshape(-1)[i] += step
            minus = base.copy()
            minus.reshape(-1)[i] -= step
            probe[name] = plus
            fp = float(evaluate(probe, False)[1].value)
            probe[name] = minus
            fm = float(evaluate(probe, False)[1].value)
            flat[i] = (fp - fm) / (2.0 * step)
        a = np.asarray(analytic[name], dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        errors[name] = float(np.max(np.abs(a - numeric) / denom)) if base.size else 0.0
    return GradCheckResult(errors, tol)
