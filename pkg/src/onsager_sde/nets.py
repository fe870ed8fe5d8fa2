"""Small dense feedforward networks with exact input- and parameter-derivatives.

Parameters of one network live in a single flat float64 vector, laid out layer
by layer as ``W_1 (fan_out x fan_in, row-major), b_1, W_2, b_2, ...``.

Input Jacobians are propagated forward through the layers alongside the values
(``forward_with_jacobian``).  Everything is written in ``jax.numpy`` so that
reverse accumulation over the flat parameters runs through that forward-mode
pass, which gives exact mixed derivatives d^2/(dtheta dz).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np


class UnsupportedPrimitiveError(TypeError):
    """Raised when a loss cannot be differentiated with the supported primitives."""


@dataclass(frozen=True)
class Activation:
    """Pointwise activation, tagged so it can be serialized.

    ``kind`` is one of ``"tanh"``, ``"requ"`` (``max(0, x + shift)**2``) or
    ``"recu"`` (``max(0, x)**3``).  All three are C^1 on the real line.
    """

    kind: str = "tanh"
    shift: float = 0.0

    def __post_init__(self):
        if self.kind not in ("tanh", "requ", "recu"):
            raise ValueError(f"unknown activation {self.kind!r}")

    @classmethod
    def tanh(cls) -> "Activation":
        return cls("tanh")

    @classmethod
    def requ(cls, shift: float = 0.5) -> "Activation":
        return cls("requ", float(shift))

    @classmethod
    def recu(cls) -> "Activation":
        return cls("recu")

    def __call__(self, x):
        if self.kind == "tanh":
            return jnp.tanh(x)
        if self.kind == "requ":
            return jnp.maximum(x + self.shift, 0.0) ** 2
        return jnp.maximum(x, 0.0) ** 3

    def derivative(self, x):
        if self.kind == "tanh":
            t = jnp.tanh(x)
            return 1.0 - t * t
        if self.kind == "requ":
            return 2.0 * jnp.maximum(x + self.shift, 0.0)
        return 3.0 * jnp.maximum(x, 0.0) ** 2

    def to_dict(self) -> dict:
        return {"kind": self.kind, "shift": self.shift}

    @classmethod
    def from_dict(cls, d: dict) -> "Activation":
        return cls(d["kind"], float(d.get("shift", 0.0)))


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: Activation = field(default_factory=Activation.tanh)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer widths must be >= 1, got {dims}")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for every affine layer."""
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_dims)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(
            int(d["input_dim"]),
            tuple(d["hidden_dims"]),
            int(d["output_dim"]),
            Activation.from_dict(d["activation"]),
            int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class NetParams:
    flat: np.ndarray
    spec: NetSpec

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=np.float64)
        if flat.shape != (self.spec.n_params,):
            raise ValueError(
                f"flat parameter vector has shape {flat.shape}, expected ({self.spec.n_params},)"
            )
        object.__setattr__(self, "flat", flat)


def init_params(spec: NetSpec) -> NetParams:
    """Glorot-uniform weights, zero biases; bit-identical for a given ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    chunks = []
    for fan_in, fan_out in spec.layer_dims:
        a = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-a, a, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return NetParams(np.concatenate(chunks), spec)


def unflatten(spec: NetSpec, flat) -> list[tuple]:
    layers = []
    pos = 0
    for fan_in, fan_out in spec.layer_dims:
        W = flat[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in)
        pos += fan_in * fan_out
        b = flat[pos:pos + fan_out]
        pos += fan_out
        layers.append((W, b))
    return layers


def forward(spec: NetSpec, flat, z):
    """MLP forward pass for a single input vector (jax-traceable)."""
    layers = unflatten(spec, flat)
    h = z
    for W, b in layers[:-1]:
        h = spec.activation(W @ h + b)
    W, b = layers[-1]
    return W @ h + b


def forward_with_jacobian(spec: NetSpec, flat, z):
    """Return ``(y, dy/dz)`` by pushing the identity through the layers.

    The Jacobian has shape ``(output_dim, input_dim)``.
    """
    layers = unflatten(spec, flat)
    h = z
    J = jnp.eye(spec.input_dim, dtype=jnp.result_type(z, flat))
    for W, b in layers[:-1]:
        a = W @ h + b
        J = spec.activation.derivative(a)[:, None] * (W @ J)
        h = spec.activation(a)
    W, b = layers[-1]
    return W @ h + b, W @ J


def _check_input(params: NetParams, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (params.spec.input_dim,):
        raise ValueError(
            f"input has shape {z.shape}, network expects ({params.spec.input_dim},)"
        )
    return z


def net_eval(params: NetParams, z) -> np.ndarray:
    z = _check_input(params, z)
    return np.asarray(forward(params.spec, jnp.asarray(params.flat), jnp.asarray(z)))


def net_input_jacobian(params: NetParams, z) -> np.ndarray:
    z = _check_input(params, z)
    _, J = forward_with_jacobian(params.spec, jnp.asarray(params.flat), jnp.asarray(z))
    return np.asarray(J)


# Primitives a differentiable loss may lower to.  Anything else (loops,
# sorting, host callbacks, random number generation, ...) is rejected when the
# gradient function is built, before any numbers are pushed through it.
SUPPORTED_PRIMITIVES = frozenset({
    # structural
    "pjit", "jit", "closed_call", "custom_jvp_call", "reshape", "broadcast_in_dim",
    "squeeze", "expand_dims", "transpose", "slice", "dynamic_slice",
    "dynamic_update_slice", "gather", "scatter", "scatter-add", "scatter_add",
    "concatenate", "pad", "iota", "convert_element_type", "copy", "copy_p",
    "select_n", "rev", "stop_gradient", "split", "device_put", "platform_index",
    # branches of a cond are scanned like any other sub-jaxpr
    "cond",
    # elementwise arithmetic
    "add", "add_any", "sub", "mul", "div", "neg", "abs", "sign", "max", "min",
    "integer_pow", "pow", "square", "exp", "exp2", "log", "log1p", "expm1",
    "sqrt", "rsqrt", "tanh", "logistic",
    "eq", "ne", "lt", "le", "gt", "ge", "and", "or", "not",
    # reductions and linear algebra
    "reduce_sum", "reduce_max", "reduce_min", "argmax", "argmin", "dot_general",
    "cholesky", "triangular_solve",
})


def _collect_primitives(jaxpr, acc: set) -> set:
    for eqn in jaxpr.eqns:
        acc.add(eqn.primitive.name)
        for v in eqn.params.values():
            subs = v if isinstance(v, (list, tuple)) else (v,)
            for s in subs:
                inner = getattr(s, "jaxpr", None)
                if inner is not None:
                    _collect_primitives(getattr(inner, "jaxpr", inner), acc)
    return acc


def check_supported(fn: Callable, *example_args) -> None:
    """Trace ``fn`` and reject losses built from unsupported operations."""
    try:
        closed = jax.make_jaxpr(fn)(*example_args)
    except (jax.errors.ConcretizationTypeError,
            jax.errors.TracerArrayConversionError,
            jax.errors.TracerBoolConversionError,
            jax.errors.TracerIntegerConversionError) as exc:
        raise UnsupportedPrimitiveError(
            f"loss is not a traceable composition of supported primitives: {exc}"
        ) from exc
    bad = _collect_primitives(closed.jaxpr, set()) - SUPPORTED_PRIMITIVES
    if bad:
        raise UnsupportedPrimitiveError(f"unsupported primitives in loss: {sorted(bad)}")


def param_gradient_fn(loss: Callable, example_flat) -> Callable:
    """Build ``flat -> (value, dloss/dflat)`` after validating the loss.

    ``loss`` maps a flat parameter vector to a scalar and may use ``forward``
    and ``forward_with_jacobian`` freely.
    """
    example_flat = jnp.asarray(example_flat)
    check_supported(loss, example_flat)
    return jax.jit(jax.value_and_grad(loss))


def loss_param_gradient(loss: Callable, params: NetParams) -> np.ndarray:
    """Exact gradient of ``loss(flat)`` at ``params.flat``."""
    _, g = param_gradient_fn(loss, params.flat)(jnp.asarray(params.flat))
    return np.asarray(g)
