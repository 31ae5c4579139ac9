"""Parametric model families.

Three kinds share one evaluation path:

* ``feedforward-residual`` — the trainable scalar network: affine layers with
  SiLU activations and additive skips between equal-width blocks. Depth and
  width come from a level count and an amplifying factor on the input
  dimension.
* ``gradient-network`` — the same body with a d-dimensional output, used when
  the spatial gradient is modelled by its own function.
* ``polynomial-heat`` — the analytic family  a·|x|^2 + c·(T-t) + e,  which
  contains the exact heat solution at (1, d nu^2, 0) and makes the variance
  propositions testable at the optimum.

Every forward is written once against a tiny ops adapter, so the same code
evaluates plain values, forward-mode duals (spatial derivatives), tape nodes
(parameter gradients) and tape duals (mixed second order).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from . import _storage, rng
from .autodiff import dual as fd
from .autodiff.tape import Tape, Var, silu as _silu

KINDS = ("feedforward-residual", "gradient-network", "polynomial-heat",
         "polynomial-heat-grad")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int               # d + 1 (space plus time)
    output_dim: int = 1
    hidden: tuple[int, ...] = ()
    residual: bool = True        # additive skips between equal-width blocks
    horizon: float = 1.0         # T, read by the polynomial family

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind '{self.kind}'")
        if self.kind.startswith("polynomial-heat"):
            if self.hidden:
                raise ValueError("the polynomial family takes no hidden widths")
        elif not self.hidden:
            raise ValueError("network models need at least one hidden width")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))

    @property
    def d(self) -> int:
        return self.input_dim - 1


class Model(NamedTuple):
    """A spec paired with a concrete parameter vector."""

    spec: ModelSpec
    theta: np.ndarray

    def value(self, x, t):
        return model_value(self.spec, self.theta, x, t)

    def grad_x(self, x, t):
        return value_and_grad_x(self.spec, self.theta, x, t)[1]

    def directional(self, x, t, w):
        return directional(self.spec, self.theta, x, t, w)


def multilevel(d: int, levels: int = 3, q: int = 3, out_dim: int = 1,
               residual: bool = True, horizon: float = 1.0) -> ModelSpec:
    """Residual feedforward spec with `levels` blocks of width q*d.

    out_dim > 1 (or out_dim == d == 1 via gradient_multilevel) means a
    gradient network; its d-vector output stands in for a spatial gradient.
    """
    kind = "feedforward-residual" if out_dim == 1 else "gradient-network"
    return ModelSpec(kind, d + 1, out_dim, (q * d,) * levels, residual, horizon)


def gradient_multilevel(d: int, levels: int = 3, q: int = 3,
                        residual: bool = True, horizon: float = 1.0) -> ModelSpec:
    return ModelSpec("gradient-network", d + 1, d, (q * d,) * levels,
                     residual, horizon)


def is_scalar(spec: ModelSpec) -> bool:
    """Scalar-valued model kinds; the others emit d-vector gradients."""
    return spec.kind in ("feedforward-residual", "polynomial-heat")


def polynomial_heat(d: int, horizon: float = 1.0) -> ModelSpec:
    return ModelSpec("polynomial-heat", d + 1, 1, (), False, horizon)


def polynomial_heat_grad(d: int, horizon: float = 1.0) -> ModelSpec:
    """Spatial gradient of the analytic family: r(x, t) = 2 a x (c, e unused)."""
    return ModelSpec("polynomial-heat-grad", d + 1, d, (), False, horizon)


@lru_cache(maxsize=None)
def layout(spec: ModelSpec) -> tuple[tuple[str, int, tuple[int, ...]], ...]:
    """(name, flat offset, shape) per parameter block; partitions the vector."""
    if spec.kind.startswith("polynomial-heat"):
        return (("theta", 0, (3,)),)
    dims = (spec.input_dim, *spec.hidden, spec.output_dim)
    out = []
    offset = 0
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        out.append((f"w{i}", offset, (fan_out, fan_in)))
        offset += fan_out * fan_in
        out.append((f"b{i}", offset, (fan_out,)))
        offset += fan_out
    return tuple(out)


@lru_cache(maxsize=None)
def param_count(spec: ModelSpec) -> int:
    name, offset, shape = layout(spec)[-1]
    return offset + int(np.prod(shape))


def init_params(spec: ModelSpec, seed: int, stream: int = 0) -> np.ndarray:
    """Uniform weights scaled by 1/sqrt(fan-in), zero biases; reproducible per seed.

    ``stream`` decorrelates several networks initialized from one seed (the
    paired gradient network uses stream 1). The polynomial family always
    starts at zero — its optimum is set explicitly where tests need it.
    """
    theta = np.zeros(param_count(spec))
    if spec.kind.startswith("polynomial-heat"):
        return theta
    gen = rng.generator(seed, "net-init", stream)
    for name, offset, shape in layout(spec):
        if name.startswith("w"):
            bound = 1.0 / np.sqrt(shape[1])
            theta[offset:offset + shape[0] * shape[1]] = gen.uniform(
                -bound, bound, size=shape[0] * shape[1])
    return theta


@lru_cache(maxsize=None)
def _block_sizes(spec: ModelSpec) -> tuple[int, ...]:
    return tuple(int(np.prod(shape)) for _, _, shape in layout(spec))


def unpack(spec: ModelSpec, theta: np.ndarray) -> dict[str, np.ndarray]:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (param_count(spec),):
        raise ValueError(f"parameter vector has length {theta.size}, "
                         f"spec wants {param_count(spec)}")
    return {name: theta[off:off + size].reshape(shape)
            for (name, off, shape), size in zip(layout(spec), _block_sizes(spec))}


def bind_params(tape: Tape, spec: ModelSpec, theta: np.ndarray,
                base_offset: int = 0) -> dict[str, Var]:
    """Create one parameter leaf per layout block, addressed at base_offset."""
    return bind_arrays(tape, spec, unpack(spec, theta), base_offset)


def bind_arrays(tape: Tape, spec: ModelSpec, arrays: dict[str, np.ndarray],
                base_offset: int = 0) -> dict[str, Var]:
    """Like bind_params, for parameters already unpacked into block views."""
    return {name: tape.param(arrays[name], base_offset + off)
            for name, off, _ in layout(spec)}


# -- ops adapters -----------------------------------------------------------
class _DualOps:
    @staticmethod
    def affine(x, w, b):
        return fd.d_affine(x, w, b)

    @staticmethod
    def silu(x):
        return fd.d_silu(x)

    @staticmethod
    def add(a, b):
        return fd.d_add(a, b)

    @staticmethod
    def inner_const(a, c):
        return fd.d_inner_const(a, c)


class _TapeOps:
    def __init__(self, tape: Tape):
        self.tape = tape

    def affine(self, x, w, b):
        return self.tape.affine(x, w, b)

    def silu(self, x):
        return self.tape.silu(x)

    def add(self, a, b):
        return self.tape.add(a, b)

    def inner_const(self, a, c):
        return self.tape.inner_const(a, c)


class _TapeDualOps:
    def __init__(self, tape: Tape):
        self.tape = tape

    def affine(self, x, w, b):
        return fd.td_affine(self.tape, x, w, b)

    def silu(self, x):
        return fd.td_silu(self.tape, x)

    def add(self, a, b):
        return fd.td_add(self.tape, a, b)

    def inner_const(self, a, c):
        return fd.td_inner_const(self.tape, a, c)


def _ff_forward(ops, spec: ModelSpec, params, h):
    n = len(spec.hidden)
    for i in range(n):
        z = ops.silu(ops.affine(h, params[f"w{i}"], params[f"b{i}"]))
        if i > 0 and spec.residual and spec.hidden[i] == spec.hidden[i - 1]:
            z = ops.add(z, h)
        h = z
    return ops.affine(h, params[f"w{n}"], params[f"b{n}"])


def _join(spec: ModelSpec, x: np.ndarray, t) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != spec.d:
        raise ValueError(f"x has {x.shape[1]} coordinates, model expects {spec.d}")
    tcol = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    return np.column_stack([x, tcol])


def _poly_features(spec: ModelSpec, joined: np.ndarray) -> np.ndarray:
    x, t = joined[:, :-1], joined[:, -1]
    return np.column_stack([np.sum(x * x, axis=1), spec.horizon - t,
                            np.ones(len(joined))])


def _poly_feature_tangent(joined: np.ndarray, tan: np.ndarray) -> np.ndarray:
    # tan: (n_tan, B, d+1); feature tangents for [|x|^2, T-t, 1]
    x = joined[:, :-1]
    out = np.zeros(tan.shape[:2] + (3,))
    out[..., 0] = 2.0 * np.sum(tan[..., :-1] * x, axis=-1)
    out[..., 1] = -tan[..., -1]
    return out


def model_value(spec: ModelSpec, theta: np.ndarray, x, t) -> np.ndarray:
    """Plain evaluation: (B,) for scalar models, (B, d) for gradient networks."""
    joined = _join(spec, x, t)
    params = unpack(spec, theta)
    if spec.kind == "polynomial-heat":
        return _poly_features(spec, joined) @ params["theta"]
    if spec.kind == "polynomial-heat-grad":
        return 2.0 * params["theta"][0] * joined[:, :-1]
    h = joined
    n = len(spec.hidden)
    for i in range(n):
        z = _silu(h @ params[f"w{i}"].T + params[f"b{i}"])
        if i > 0 and spec.residual and spec.hidden[i] == spec.hidden[i - 1]:
            z = z + h
        h = z
    out = h @ params[f"w{n}"].T + params[f"b{n}"]
    return out[:, 0] if is_scalar(spec) else out


def _dual_eval(spec: ModelSpec, theta: np.ndarray, joined: np.ndarray,
               tan: np.ndarray) -> fd.Dual:
    params = unpack(spec, theta)
    if spec.kind == "polynomial-heat":
        feats = fd.Dual(_poly_features(spec, joined), _poly_feature_tangent(joined, tan))
        return fd.d_inner_const(feats, params["theta"])
    if spec.kind == "polynomial-heat-grad":
        raise ValueError("spatial derivatives of a gradient model are not supported")
    out = _ff_forward(_DualOps, spec, params, fd.Dual(joined, tan))
    if is_scalar(spec):
        return fd.Dual(out.val[:, 0], out.tan[..., 0])
    return out


def value_and_grad_x(spec: ModelSpec, theta: np.ndarray, x, t) -> tuple[np.ndarray, np.ndarray]:
    """Exact spatial gradient via forward mode, all d tangents in one pass."""
    joined = _join(spec, x, t)
    d = spec.d
    tan = np.zeros((d, joined.shape[0], d + 1))
    for i in range(d):
        tan[i, :, i] = 1.0
    out = _dual_eval(spec, theta, joined, tan)
    if not is_scalar(spec):
        raise ValueError("value_and_grad_x expects a scalar model")
    return out.val, out.tan.T


def directional(spec: ModelSpec, theta: np.ndarray, x, t, w) -> tuple[np.ndarray, np.ndarray]:
    """Value and (grad_x u)·w in one pass with a single tangent."""
    joined = _join(spec, x, t)
    w = np.atleast_2d(np.asarray(w, dtype=float))
    tan = np.zeros((1,) + joined.shape)
    tan[0, :, :-1] = w
    out = _dual_eval(spec, theta, joined, tan)
    return out.val, out.tan[0]


def tape_value(tape: Tape, spec: ModelSpec, params: dict[str, Var], x, t) -> Var:
    """Record an evaluation; output shaped (B,) for scalar models."""
    joined = _join(spec, x, t)
    if spec.kind == "polynomial-heat":
        return tape.inner(tape.leaf(_poly_features(spec, joined)), params["theta"])
    if spec.kind == "polynomial-heat-grad":
        return tape.mul(tape.take(params["theta"], 0), tape.leaf(2.0 * joined[:, :-1]))
    out = _ff_forward(_TapeOps(tape), spec, params, tape.leaf(joined))
    if is_scalar(spec):
        return tape.reshape(out, (joined.shape[0],))
    return out


def tape_directional(tape: Tape, spec: ModelSpec, params: dict[str, Var],
                     x, t, w) -> tuple[Var, Var]:
    """Record value and directional derivative so both admit reverse sweeps."""
    joined = _join(spec, x, t)
    w = np.atleast_2d(np.asarray(w, dtype=float))
    tan = np.zeros_like(joined)
    tan[:, :-1] = w
    if spec.kind == "polynomial-heat":
        feats = tape.leaf(_poly_features(spec, joined))
        ftan = tape.leaf(_poly_feature_tangent(joined, tan[None])[0])
        return (tape.inner(feats, params["theta"]),
                tape.inner(ftan, params["theta"]))
    out = _ff_forward(_TapeDualOps(tape), spec, params, fd.td_input(tape, joined, tan))
    if not is_scalar(spec):
        raise ValueError("tape_directional expects a scalar model")
    n = joined.shape[0]
    return tape.reshape(out.val, (n,)), tape.reshape(out.tan, (n,))


# -- checkpoints -------------------------------------------------------------
def save_checkpoint(path, spec: ModelSpec, theta: np.ndarray,
                    seed: int = 0, step: int = 0) -> None:
    header = {
        "kind": "checkpoint",
        "spec": asdict(spec),
        "layout": [[n, o, list(s)] for n, o, s in layout(spec)],
        "seed": int(seed),
        "step": int(step),
    }
    _storage.write_array(path, header, np.asarray(theta, dtype=float))


def load_checkpoint(path) -> tuple[ModelSpec, np.ndarray, dict]:
    header, theta = _storage.read_array(path)
    if header.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint file")
    sd = dict(header["spec"])
    sd["hidden"] = tuple(sd["hidden"])
    spec = ModelSpec(**sd)
    if theta.shape != (param_count(spec),):
        raise ValueError("checkpoint length does not match its spec")
    return spec, theta, {"seed": header["seed"], "step": header["step"]}
