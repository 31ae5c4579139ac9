"""Reverse-mode tape over batched float64 arrays.

The tape records a fixed primitive set: affine maps, elementwise SiLU (and
its derivative, needed because directional derivatives of a model are
themselves differentiated), add, mul, square, inner products, exp, log,
relu and a min-reduction. Anything else is a composition of these.

Nodes store their values eagerly, in topological order (operands always
precede their consumers). A finished tape is immutable and can be swept
from any thread; recording is single-writer. Gradients with respect to
parameters are accumulated into one flat vector addressed by the offsets
given to :meth:`Tape.param`.

All live tapes report their node/element counts to a global
:class:`TapeMeter`, whose peak values are the artifact's stand-in for a
memory budget.
"""

from __future__ import annotations

from typing import Any, Sequence

import numpy as np
from scipy.special import expit


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class NumericalOverflowError(AutodiffError):
    """A tape node produced a non-finite value."""

    def __init__(self, index: int, op: str):
        super().__init__(f"non-finite value at tape node {index} (op '{op}')")
        self.index = index
        self.op = op


class TapeMeter:
    """Gauge of live tape nodes/elements across all tapes.

    ``peak_nodes`` / ``peak_elements`` are the high-water marks since the
    last :meth:`reset`; estimators that promise step-count-independent
    memory are checked against these counters.
    """

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self.live_nodes = 0
        self.live_elements = 0
        self.peak_nodes = 0
        self.peak_elements = 0

    def _add(self, nodes: int, elements: int) -> None:
        self.live_nodes += nodes
        self.live_elements += elements
        if self.live_nodes > self.peak_nodes:
            self.peak_nodes = self.live_nodes
        if self.live_elements > self.peak_elements:
            self.peak_elements = self.live_elements

    def _remove(self, nodes: int, elements: int) -> None:
        self.live_nodes -= nodes
        self.live_elements -= elements


METER = TapeMeter()


class Var:
    """Handle to one tape node, with arithmetic sugar for compositions."""

    __slots__ = ("tape", "i")

    def __init__(self, tape: "Tape", i: int):
        self.tape = tape
        self.i = i

    @property
    def value(self) -> np.ndarray:
        return self.tape.vals[self.i]

    @property
    def shape(self):
        return self.tape.vals[self.i].shape

    def __add__(self, other):
        if isinstance(other, Var):
            return self.tape.add(self, other)
        return self.tape.add_const(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.tape.mul(self, other)
        return self.tape.mul_const(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.mul_const(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Var):
            return self.tape.add(self, self.tape.mul_const(other, -1.0))
        return self.tape.add_const(self, -np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return self.tape.add_const(self.tape.mul_const(self, -1.0), other)

    def square(self):
        return self.tape.square(self)

    def exp(self):
        return self.tape.exp(self)

    def log(self):
        return self.tape.log(self)

    def relu(self):
        return self.tape.relu(self)


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def silu_prime(x: np.ndarray) -> np.ndarray:
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def silu_second(x: np.ndarray) -> np.ndarray:
    s = expit(x)
    return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _inner_const_value(a: np.ndarray, c: np.ndarray) -> np.ndarray:
    if c.ndim == 1 and a.ndim >= 1 and a.shape[-1] == c.shape[0]:
        return a @ c
    return np.sum(a * c, axis=-1)


# Forward rules, shared by recording and replay so that re-evaluating a tape
# reproduces values bit-for-bit.
def _forward(op: str, av: list, aux: Any) -> np.ndarray:
    if op == "affine":
        x, w = av[0], av[1]
        y = x @ w.T
        if len(av) == 3:
            y = y + av[2]
        return y
    if op == "silu":
        return silu(av[0])
    if op == "silu_prime":
        return silu_prime(av[0])
    if op == "add":
        return av[0] + av[1]
    if op == "add_const":
        return av[0] + aux
    if op == "mul":
        return av[0] * av[1]
    if op == "mul_const":
        return av[0] * aux
    if op == "square":
        return av[0] * av[0]
    if op == "inner":
        return np.sum(av[0] * av[1], axis=-1)
    if op == "inner_const":
        return _inner_const_value(av[0], aux)
    if op == "exp":
        return np.exp(av[0])
    if op == "log":
        return np.log(av[0])
    if op == "relu":
        return np.maximum(av[0], 0.0)
    if op == "amin_last":
        return np.min(av[0], axis=-1)
    if op == "take":
        return av[0][aux]
    if op == "reshape":
        return av[0].reshape(aux)
    raise AutodiffError(f"unknown op '{op}'")


class Tape:
    """Single-writer recording of primitive operations.

    Parameters are leaves created with :meth:`param`; their flat-vector
    offsets route adjoints into the gradient returned by :meth:`backward`.
    Call :meth:`release` (or use the tape as a context manager) once the
    sweeps are done so the meter sees the nodes go away.
    """

    __slots__ = ("ops", "args", "vals", "aux", "_params", "_released")

    def __init__(self):
        self.ops: list[str] = []
        self.args: list[tuple[int, ...]] = []
        self.vals: list[np.ndarray] = []
        self.aux: list[Any] = []
        self._params: list[int] = []
        self._released = False

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, *exc) -> None:
        self.release()

    def __len__(self) -> int:
        return len(self.ops)

    @property
    def n_elements(self) -> int:
        return sum(v.size for v in self.vals)

    def release(self) -> None:
        """Drop node storage and corresponding meter counts."""
        if not self._released:
            METER._remove(len(self.ops), self.n_elements)
            self._released = True
            self.ops, self.args, self.vals, self.aux = [], [], [], []

    def _record(self, op: str, args: tuple[int, ...], value: np.ndarray, aux: Any = None) -> Var:
        if self._released:
            raise AutodiffError("tape already released")
        self.ops.append(op)
        self.args.append(args)
        self.vals.append(value)
        self.aux.append(aux)
        METER._add(1, value.size)
        return Var(self, len(self.ops) - 1)

    # -- leaves -----------------------------------------------------------
    def leaf(self, value) -> Var:
        return self._record("leaf", (), np.asarray(value, dtype=float))

    const = leaf

    def param(self, value, offset: int) -> Var:
        v = self._record("param", (), np.asarray(value, dtype=float), aux=offset)
        self._params.append(v.i)
        return v

    # -- primitives -------------------------------------------------------
    def affine(self, x: Var, w: Var, b: Var | None = None) -> Var:
        if b is None:
            return self._record("affine", (x.i, w.i), self.vals[x.i] @ self.vals[w.i].T)
        value = self.vals[x.i] @ self.vals[w.i].T + self.vals[b.i]
        return self._record("affine", (x.i, w.i, b.i), value)

    def silu(self, x: Var) -> Var:
        # the logistic factor is cached for the backward rule
        s = expit(self.vals[x.i])
        return self._record("silu", (x.i,), self.vals[x.i] * s, aux=s)

    def silu_prime(self, x: Var) -> Var:
        xv = self.vals[x.i]
        s = expit(xv)
        out = 1.0 - s
        out *= xv
        out += 1.0
        out *= s
        return self._record("silu_prime", (x.i,), out, aux=s)

    def silu_with_prime(self, x: Var) -> tuple[Var, Var]:
        """silu and its derivative off one shared logistic evaluation."""
        xv = self.vals[x.i]
        s = expit(xv)
        val = self._record("silu", (x.i,), xv * s, aux=s)
        out = 1.0 - s
        out *= xv
        out += 1.0
        out *= s
        return val, self._record("silu_prime", (x.i,), out, aux=s)

    def add(self, a: Var, b: Var) -> Var:
        return self._record("add", (a.i, b.i), self.vals[a.i] + self.vals[b.i])

    def add_const(self, a: Var, c) -> Var:
        c = np.asarray(c, dtype=float)
        return self._record("add_const", (a.i,), self.vals[a.i] + c, aux=c)

    def mul(self, a: Var, b: Var) -> Var:
        return self._record("mul", (a.i, b.i), self.vals[a.i] * self.vals[b.i])

    def mul_const(self, a: Var, c) -> Var:
        c = np.asarray(c, dtype=float)
        return self._record("mul_const", (a.i,), self.vals[a.i] * c, aux=c)

    def square(self, a: Var) -> Var:
        return self._record("square", (a.i,), self.vals[a.i] * self.vals[a.i])

    def inner(self, a: Var, b: Var) -> Var:
        value = np.sum(self.vals[a.i] * self.vals[b.i], axis=-1)
        return self._record("inner", (a.i, b.i), value)

    def inner_const(self, a: Var, c) -> Var:
        c = np.asarray(c, dtype=float)
        return self._record("inner_const", (a.i,), _inner_const_value(self.vals[a.i], c), aux=c)

    def exp(self, a: Var) -> Var:
        return self._record("exp", (a.i,), np.exp(self.vals[a.i]))

    def log(self, a: Var) -> Var:
        return self._record("log", (a.i,), np.log(self.vals[a.i]))

    def relu(self, a: Var) -> Var:
        return self._record("relu", (a.i,), np.maximum(self.vals[a.i], 0.0))

    def amin_last(self, a: Var) -> Var:
        return self._record("amin_last", (a.i,), np.min(self.vals[a.i], axis=-1))

    def take(self, a: Var, index) -> Var:
        return self._record("take", (a.i,), self.vals[a.i][index], aux=index)

    def reshape(self, a: Var, shape) -> Var:
        shape = tuple(shape)
        return self._record("reshape", (a.i,), self.vals[a.i].reshape(shape), aux=shape)

    # -- sweeps -----------------------------------------------------------
    def first_nonfinite(self) -> int | None:
        for i, v in enumerate(self.vals):
            if not np.all(np.isfinite(v)):
                return i
        return None

    def check_finite(self) -> None:
        bad = self.first_nonfinite()
        if bad is not None:
            raise NumericalOverflowError(bad, self.ops[bad])

    def replay(self) -> list[np.ndarray]:
        """Recompute every node value from the recorded leaves.

        Returns fresh arrays; the tape itself is not mutated. Used to check
        the determinism contract (bitwise-identical re-evaluation).
        """
        out: list[np.ndarray] = []
        for op, args, aux, val in zip(self.ops, self.args, self.aux, self.vals):
            if op in ("leaf", "param"):
                out.append(val.copy())
            else:
                out.append(_forward(op, [out[j] for j in args], aux))
        return out

    def backward(self, seeds: Sequence[tuple[Var, np.ndarray]], n_params: int) -> np.ndarray:
        """One reverse sweep from ``seeds``; returns the flat parameter gradient.

        ``seeds`` pairs output nodes with their adjoints (cotangents). Several
        seeds may be given; their contributions accumulate, which is how the
        loss estimators inject per-sample weights without materialising the
        scalar loss on the tape.
        """
        adj: list[np.ndarray | None] = [None] * len(self.ops)
        for var, seed in seeds:
            i = var.i if isinstance(var, Var) else var
            s = np.asarray(seed, dtype=float)
            adj[i] = s + adj[i] if adj[i] is not None else s.copy()
        grad = np.zeros(n_params)
        for i in range(len(self.ops) - 1, -1, -1):
            g = adj[i]
            if g is None:
                continue
            op = self.ops[i]
            args = self.args[i]
            if op == "param":
                off = self.aux[i]
                grad[off:off + g.size] += g.ravel()
                continue
            if op == "leaf":
                continue
            self._push(op, args, self.aux[i], g, adj, i)
            adj[i] = None  # free as we go
        return grad

    def _push(self, op: str, args: tuple[int, ...], aux: Any, g: np.ndarray,
              adj: list, i: int) -> None:
        def acc(j: int, contrib: np.ndarray) -> None:
            if adj[j] is None:
                adj[j] = contrib.copy() if contrib.base is not None else contrib
            else:
                adj[j] += contrib

        v = self.vals
        if op == "affine":
            x, w = args[0], args[1]
            acc(x, g @ v[w])
            acc(w, g.T @ v[x] if g.ndim == 2 else np.outer(g, v[x]))
            if len(args) == 3:
                acc(args[2], g.sum(axis=0) if g.ndim == 2 else g)
        elif op == "silu":
            s = aux if aux is not None else expit(v[args[0]])
            tmp = 1.0 - s
            tmp *= v[args[0]]
            tmp += 1.0
            tmp *= s
            tmp *= g
            acc(args[0], tmp)
        elif op == "silu_prime":
            s = aux if aux is not None else expit(v[args[0]])
            tmp = -2.0 * s
            tmp += 1.0
            tmp *= v[args[0]]
            tmp += 2.0
            tmp *= s
            tmp *= 1.0 - s
            tmp *= g
            acc(args[0], tmp)
        elif op == "add":
            a, b = args
            acc(a, _unbroadcast(g, v[a].shape))
            acc(b, _unbroadcast(g, v[b].shape))
        elif op == "add_const":
            acc(args[0], _unbroadcast(g, v[args[0]].shape))
        elif op == "mul":
            a, b = args
            acc(a, _unbroadcast(g * v[b], v[a].shape))
            acc(b, _unbroadcast(g * v[a], v[b].shape))
        elif op == "mul_const":
            acc(args[0], _unbroadcast(g * aux, v[args[0]].shape))
        elif op == "square":
            acc(args[0], 2.0 * g * v[args[0]])
        elif op == "inner":
            a, b = args
            acc(a, _unbroadcast(g[..., None] * v[b], v[a].shape))
            acc(b, _unbroadcast(g[..., None] * v[a], v[b].shape))
        elif op == "inner_const":
            acc(args[0], _unbroadcast(np.asarray(g)[..., None] * aux, v[args[0]].shape))
        elif op == "exp":
            acc(args[0], g * v[i])
        elif op == "log":
            acc(args[0], g / v[args[0]])
        elif op == "relu":
            acc(args[0], g * (v[args[0]] > 0.0))
        elif op == "amin_last":
            x = v[args[0]]
            ga = np.zeros_like(x)
            idx = np.argmin(x, axis=-1)
            np.put_along_axis(ga, idx[..., None], np.asarray(g)[..., None], axis=-1)
            acc(args[0], ga)
        elif op == "take":
            ga = np.zeros_like(v[args[0]])
            np.add.at(ga, aux, g)
            acc(args[0], ga)
        elif op == "reshape":
            acc(args[0], np.asarray(g).reshape(v[args[0]].shape))
        else:
            raise AutodiffError(f"no backward rule for op '{op}'")
