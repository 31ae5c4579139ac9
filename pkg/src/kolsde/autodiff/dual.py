"""Forward-mode values: plain numpy duals and tape-recorded duals.

:class:`Dual` carries a batch of primals ``val`` of shape ``(B, ...)`` and a
stack of tangents ``tan`` of shape ``(n_tan, B, ...)``; all spatial tangents
of a model are propagated in one pass (tangent axis first, so matmuls
broadcast). This is how spatial gradients and directional derivatives of a
model are computed when no parameter gradient is needed.

:class:`TapeDual` is the same chain rule, but with both members recorded as
tape nodes: differentiating the *tangent* output with respect to parameters
is then one reverse sweep, which is the mixed second-order quantity the
backward-SDE loss gradient needs (forward-over-reverse).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .tape import Tape, Var


class Dual(NamedTuple):
    val: np.ndarray          # (B, ...)
    tan: np.ndarray          # (n_tan, B, ...)


def d_const(value: np.ndarray, n_tan: int) -> Dual:
    value = np.asarray(value, dtype=float)
    return Dual(value, np.zeros((n_tan,) + value.shape))


def d_affine(x: Dual, w: np.ndarray, b: np.ndarray | None) -> Dual:
    y = x.val @ w.T
    if b is not None:
        y = y + b
    return Dual(y, x.tan @ w.T)


def d_silu(x: Dual) -> Dual:
    s = expit(x.val)
    sp = 1.0 - s
    sp *= x.val
    sp += 1.0
    sp *= s
    return Dual(x.val * s, sp * x.tan)


def d_add(a: Dual, b: Dual) -> Dual:
    return Dual(a.val + b.val, a.tan + b.tan)


def d_mul(a: Dual, b: Dual) -> Dual:
    return Dual(a.val * b.val, a.tan * b.val + a.val * b.tan)


def d_square(a: Dual) -> Dual:
    return Dual(a.val * a.val, 2.0 * a.val * a.tan)


def d_inner(a: Dual, b: Dual) -> Dual:
    return Dual(np.sum(a.val * b.val, axis=-1),
                np.sum(a.tan * b.val + a.val * b.tan, axis=-1))


def d_inner_const(a: Dual, c: np.ndarray) -> Dual:
    return Dual(a.val @ c if c.ndim == 1 else np.sum(a.val * c, -1),
                a.tan @ c if c.ndim == 1 else np.sum(a.tan * c, -1))


def d_exp(a: Dual) -> Dual:
    e = np.exp(a.val)
    return Dual(e, e * a.tan)


def d_log(a: Dual) -> Dual:
    return Dual(np.log(a.val), a.tan / a.val)


class TapeDual(NamedTuple):
    val: Var
    tan: Var


def td_input(tape: Tape, value: np.ndarray, tangent: np.ndarray) -> TapeDual:
    """Seed leaf: a constant input whose tangent is a constant direction."""
    return TapeDual(tape.leaf(value), tape.leaf(tangent))


def td_affine(tape: Tape, x: TapeDual, w: Var, b: Var | None) -> TapeDual:
    # tangent of an affine map drops the bias
    return TapeDual(tape.affine(x.val, w, b), tape.affine(x.tan, w))


def td_silu(tape: Tape, x: TapeDual) -> TapeDual:
    val, prime = tape.silu_with_prime(x.val)
    return TapeDual(val, tape.mul(prime, x.tan))


def td_add(tape: Tape, a: TapeDual, b: TapeDual) -> TapeDual:
    return TapeDual(tape.add(a.val, b.val), tape.add(a.tan, b.tan))


def td_inner(tape: Tape, a: TapeDual, b: TapeDual) -> TapeDual:
    val = tape.inner(a.val, b.val)
    tan = tape.add(tape.inner(a.tan, b.val), tape.inner(a.val, b.tan))
    return TapeDual(val, tan)


def td_inner_const(tape: Tape, a: TapeDual, c: np.ndarray) -> TapeDual:
    return TapeDual(tape.inner_const(a.val, c), tape.inner_const(a.tan, c))
