"""Nested differentiation engine: reverse-mode parameter gradients,
forward-mode spatial derivatives, and forward-over-reverse for the mixed
second-order terms."""

from .api import (
    finite_difference_gradient,
    grad_input,
    grad_params,
    grad_params_of_inner,
)
from .dual import (
    Dual,
    TapeDual,
    d_add,
    d_affine,
    d_const,
    d_exp,
    d_inner,
    d_inner_const,
    d_log,
    d_mul,
    d_silu,
    d_square,
    td_add,
    td_affine,
    td_inner,
    td_inner_const,
    td_input,
    td_silu,
)
from .tape import (
    METER,
    AutodiffError,
    NumericalOverflowError,
    Tape,
    TapeMeter,
    Var,
    silu,
    silu_prime,
    silu_second,
)

__all__ = [
    "AutodiffError",
    "Dual",
    "METER",
    "NumericalOverflowError",
    "Tape",
    "TapeDual",
    "TapeMeter",
    "Var",
    "d_add",
    "d_affine",
    "d_const",
    "d_exp",
    "d_inner",
    "d_inner_const",
    "d_log",
    "d_mul",
    "d_silu",
    "d_square",
    "finite_difference_gradient",
    "grad_input",
    "grad_params",
    "grad_params_of_inner",
    "silu",
    "silu_prime",
    "silu_second",
    "td_add",
    "td_affine",
    "td_inner",
    "td_inner_const",
    "td_input",
    "td_silu",
]
