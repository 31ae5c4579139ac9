"""Differentiation entry points used by the loss estimators and the tests."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tape import Tape, Var


def grad_params(f: Callable[[Tape, Var], Var], theta: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and parameter gradient of a scalar tape computation.

    ``f`` receives a fresh tape and the parameter leaf for ``theta`` and must
    return the output node (scalar-shaped). One reverse sweep per call.
    """
    theta = np.asarray(theta, dtype=float)
    with Tape() as tape:
        th = tape.param(theta, 0)
        out = f(tape, th)
        value = np.asarray(out.value, dtype=float)
        if not np.all(np.isfinite(value)):
            tape.check_finite()
        grad = tape.backward([(out, np.ones_like(value))], theta.size)
    return float(value), grad


def grad_input(spec, theta, x, t) -> tuple[np.ndarray, np.ndarray]:
    """Model value and exact spatial gradient, one forward pass with d tangents."""
    from ..nets import value_and_grad_x

    return value_and_grad_x(spec, theta, x, t)


def grad_params_of_inner(spec, theta, x, t, w) -> tuple[np.ndarray, np.ndarray]:
    """Directional derivative (grad_x u)·w and its parameter gradient.

    Records the forward-mode tangent computation on a reverse tape, so the
    sweep from the tangent output yields the mixed second-order quantity.
    """
    from ..nets import bind_params, tape_directional

    theta = np.asarray(theta, dtype=float)
    with Tape() as tape:
        params = bind_params(tape, spec, theta)
        val, tan = tape_directional(tape, spec, params, x, t, w)
        inner = np.asarray(tan.value, dtype=float)
        if not np.all(np.isfinite(inner)):
            tape.check_finite()
        grad = tape.backward([(tan, np.ones_like(inner))], theta.size)
    if inner.ndim == 0 or inner.size == 1:
        return float(inner.reshape(-1)[0]), grad
    return inner, grad


def finite_difference_gradient(f: Callable[[np.ndarray], float], point, h: float) -> np.ndarray:
    """Central-difference gradient, (f(p+h e_i) - f(p-h e_i)) / 2h per component."""
    if h <= 0:
        raise ValueError("h must be positive")
    point = np.asarray(point, dtype=float)
    flat = point.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = h
        grad[i] = (f((flat + step).reshape(point.shape))
                   - f((flat - step).reshape(point.shape))) / (2.0 * h)
    return grad.reshape(point.shape)
