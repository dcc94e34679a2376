"""Dense kernels, a reverse-mode tape over a closed op set, and Adam.

Every value on a :class:`Tape` is a 2-D float64 array. Scalars are 1x1.
Parameters live in a :class:`ParamStore`; a tape only borrows them for the
duration of one forward/backward cycle.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, DimensionError, NonFiniteError


def logsumexp_rows(m):
    """Row-wise ``log(sum(exp(m)))`` as an ``(n, 1)`` column, max-shifted."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise DimensionError(f"logsumexp_rows needs a nonempty 2-D matrix, got shape {m.shape}")
    mx = m.max(axis=1, keepdims=True)
    return mx + np.log(np.exp(m - mx).sum(axis=1, keepdims=True))


def softmax_rows(m):
    m = np.asarray(m, dtype=np.float64)
    z = np.exp(m - m.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _unbroadcast(g, shape):
    # sum the adjoint back over axes that were broadcast from size 1
    if g.shape == shape:
        return g
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


class Tape:
    """Recorded computation for one forward pass.

    Nodes are integer ids into parallel lists; inputs always precede the
    node that consumes them, so a single reverse sweep is a valid
    topological traversal.
    """

    def __init__(self):
        self.ops: list[str] = []
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.requires: list[bool] = []
        self._vjps: list[Callable | None] = []
        self.param_nodes: dict[str, int] = {}

    def __len__(self):
        return len(self.values)

    def _record(self, op, value, parents=(), vjp=None, requires=None):
        if not np.isfinite(value).all():
            raise NonFiniteError(f"op '{op}' produced non-finite values")
        if requires is None:
            requires = any(self.requires[p] for p in parents)
        self.ops.append(op)
        self.values.append(value)
        self.parents.append(tuple(parents))
        self.requires.append(requires)
        self._vjps.append(vjp if requires else None)
        return len(self.values) - 1

    def value(self, node):
        return self.values[node]

    def item(self, node):
        v = self.values[node]
        if v.shape != (1, 1):
            raise ContractError(f"node {node} is not scalar (shape {v.shape})")
        return float(v[0, 0])

    # leaves

    def param(self, name, value):
        if name in self.param_nodes:
            return self.param_nodes[name]
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        node = self._record("param", value, requires=True)
        self.param_nodes[name] = node
        return node

    def params(self, store):
        return {name: self.param(name, value) for name, value in store.params.items()}

    def const(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 1:
            value = value[:, None]
        elif value.ndim == 0:
            value = value.reshape(1, 1)
        return self._record("const", value, requires=False)

    # primitives

    def matmul(self, a, b):
        A, B = self.values[a], self.values[b]
        if A.shape[1] != B.shape[0]:
            raise DimensionError(f"matmul: {A.shape} @ {B.shape}")
        return self._record("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))

    def spmm(self, S, b):
        """Sparse constant ``S`` times node ``b``; no gradient flows into ``S``."""
        B = self.values[b]
        if S.shape[1] != B.shape[0]:
            raise DimensionError(f"spmm: {S.shape} @ {B.shape}")
        if not sp.isspmatrix_csr(S):
            S = sp.csr_matrix(S)
        return self._record("spmm", np.asarray(S @ B), (b,), lambda g: (np.asarray(S.T @ g),))

    def add(self, a, b):
        A, B = self.values[a], self.values[b]
        _check_broadcast("add", A, B)
        return self._record(
            "add", A + B, (a, b), lambda g: (_unbroadcast(g, A.shape), _unbroadcast(g, B.shape))
        )

    def sub(self, a, b):
        A, B = self.values[a], self.values[b]
        _check_broadcast("sub", A, B)
        return self._record(
            "sub", A - B, (a, b), lambda g: (_unbroadcast(g, A.shape), -_unbroadcast(g, B.shape))
        )

    def mul(self, a, b):
        A, B = self.values[a], self.values[b]
        _check_broadcast("mul", A, B)
        return self._record(
            "mul",
            A * B,
            (a, b),
            lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)),
        )

    def scale(self, a, c):
        c = float(c)
        return self._record("scale", c * self.values[a], (a,), lambda g: (c * g,))

    def neg(self, a):
        return self.scale(a, -1.0)

    def relu(self, a):
        A = self.values[a]
        mask = A > 0  # subgradient 0 at the kink
        return self._record("relu", np.where(mask, A, 0.0), (a,), lambda g: (g * mask,))

    def exp(self, a):
        out = np.exp(self.values[a])
        return self._record("exp", out, (a,), lambda g: (g * out,))

    def log(self, a):
        A = self.values[a]
        if (A <= 0).any():
            raise NonFiniteError("log of a non-positive entry")
        return self._record("log", np.log(A), (a,), lambda g: (g / A,))

    def square(self, a):
        A = self.values[a]
        return self._record("square", A * A, (a,), lambda g: (2.0 * A * g,))

    def logsumexp_rows(self, a):
        A = self.values[a]
        out = logsumexp_rows(A)
        soft = np.exp(A - out)
        return self._record("logsumexp_rows", out, (a,), lambda g: (g * soft,))

    def softmax_rows(self, a):
        s = softmax_rows(self.values[a])
        return self._record(
            "softmax_rows", s, (a,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),)
        )

    def sum(self, a, axis=None):
        A = self.values[a]
        if axis is None:
            return self._record("sum", A.sum().reshape(1, 1), (a,), lambda g: (np.full(A.shape, g[0, 0]),))
        if axis == 1:
            return self._record(
                "sum_rows", A.sum(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g, A.shape[1], axis=1),)
            )
        raise ContractError(f"sum: unsupported axis {axis}")

    def mean(self, a):
        A = self.values[a]
        if A.size == 0:
            raise DimensionError("mean of an empty matrix")
        n = A.size
        return self._record("mean", A.mean().reshape(1, 1), (a,), lambda g: (np.full(A.shape, g[0, 0] / n),))

    def gather_rows(self, a, idx):
        A = self.values[a]
        idx = np.asarray(idx, dtype=np.int64)

        def vjp(g):
            out = np.zeros_like(A)
            np.add.at(out, idx, g)
            return (out,)

        return self._record("gather_rows", A[idx], (a,), vjp)

    def pick(self, a, cols):
        """Column ``cols[i]`` of row ``i``, as an ``(n, 1)`` column."""
        A = self.values[a]
        cols = np.asarray(cols, dtype=np.int64)
        if cols.shape != (A.shape[0],):
            raise DimensionError(f"pick: need one column index per row, got {cols.shape} for {A.shape}")
        rows = np.arange(A.shape[0])

        def vjp(g):
            out = np.zeros_like(A)
            out[rows, cols] = g[:, 0]
            return (out,)

        return self._record("pick", A[rows, cols][:, None], (a,), vjp)


def backward(tape, loss_node, store=None):
    """Gradients of a scalar node w.r.t. every parameter on the tape.

    Parameters not reachable from ``loss_node`` get zeros. When ``store`` is
    given, its parameters that never entered the tape get zeros as well, so
    the result can go straight into :func:`adam_step`.
    """
    if tape.values[loss_node].shape != (1, 1):
        raise ContractError(f"backward needs a scalar loss, got shape {tape.values[loss_node].shape}")
    adj: list[np.ndarray | None] = [None] * (loss_node + 1)
    adj[loss_node] = np.ones((1, 1))
    for i in range(loss_node, -1, -1):
        g = adj[i]
        vjp = tape._vjps[i]
        if g is None or vjp is None:
            continue
        for p, gp in zip(tape.parents[i], vjp(g)):
            if not tape.requires[p]:
                continue
            adj[p] = gp if adj[p] is None else adj[p] + gp
    grads = {}
    for name, node in tape.param_nodes.items():
        g = adj[node] if node <= loss_node else None
        grads[name] = np.zeros_like(tape.values[node]) if g is None else g
    if store is not None:
        for name, value in store.params.items():
            grads.setdefault(name, np.zeros_like(value))
    return grads


@dataclass
class ParamStore:
    """Named parameters plus Adam moments and step counter."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name, value):
        value = np.array(value, dtype=np.float64)
        if value.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def copy(self):
        return ParamStore(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
            self.step,
        )

    def digest(self):
        """SHA-256 over parameter names, shapes and bytes (moments excluded)."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            value = np.ascontiguousarray(self.params[name])
            h.update(name.encode())
            h.update(repr(value.shape).encode())
            h.update(value.tobytes())
        return h.hexdigest()


def adam_step(store, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, applied to ``store`` in place."""
    if set(grads) != set(store.params):
        missing = set(store.params) ^ set(grads)
        raise ContractError(f"gradient keys do not match parameters: {sorted(missing)}")
    for name, g in grads.items():
        if g.shape != store.params[name].shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, expected {store.params[name].shape}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def grad_check(f, store, h=1e-6, floor=1e-3):
    """Worst disagreement between :func:`backward` and central differences.

    ``f(tape, store)`` must build a fresh forward pass and return the scalar
    loss node. The error for one entry is ``|a - n| / max(|a|, |n|, floor)``,
    so tiny gradients are judged on absolute error.
    """
    tape = Tape()
    loss = f(tape, store)
    analytic = backward(tape, loss, store)

    def evaluate():
        t = Tape()
        return t.item(f(t, store))

    worst = 0.0
    for name, value in store.params.items():
        flat = value.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
            worst = max(worst, err)
    return worst
