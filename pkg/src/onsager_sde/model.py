"""Structured drift/diffusion model with a potential, a banded antisymmetric field and a
Cholesky-like diffusion factor.

The SDE is

    dZ = [-(M + W) grad V + div M + div W] dt + sigma dB,    M = sigma sigma^T / 2,

with

    V(z) = beta1/2 * sum_i (U_i(z) + beta2 * (gamma z)_i)^2 + beta3 |z|^2
    W(z) = sum_d H_d(z) J_d          (J_d: +1 at (d, d+1), -1 at (d+1, d))
    sigma(z) = tril(sigma1(z), -1) + diag((sqrt(sigma2^2 + 1) + sigma2) / 2)

Divergences of matrix fields are row divergences, ``(div A)_i = sum_j d_j A_ij``.
``exp(-V)`` is an (unnormalized) stationary density of the SDE for any parameters.
"""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

from .nets import Activation, NetParams, NetSpec, forward_with_jacobian, init_params

STATE_DEPENDENT = "state"
CONSTANT_DIAGONAL = "diag"


@dataclass(frozen=True)
class ModelStructure:
    """Everything about a model except its trainable numbers (hashable, jit-static)."""

    dim: int
    U: NetSpec
    H: NetSpec | None
    sigma1: NetSpec | None
    sigma2: NetSpec | None
    m: int
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 0.01
    diffusion: str = STATE_DEPENDENT

    def __post_init__(self):
        if min(self.beta1, self.beta2, self.beta3) <= 0:
            raise ValueError("beta constants must be positive")
        if self.diffusion not in (STATE_DEPENDENT, CONSTANT_DIAGONAL):
            raise ValueError(f"unknown diffusion mode {self.diffusion!r}")
        D = self.dim
        specs = [("U", self.U, self.m), ("H", self.H, D - 1)]
        if self.diffusion == STATE_DEPENDENT:
            specs += [("sigma1", self.sigma1, D * (D - 1) // 2), ("sigma2", self.sigma2, D)]
        for name, spec, out in specs:
            if out == 0:
                if spec is not None:
                    raise ValueError(f"{name} must be absent for dim={D}")
                continue
            if spec is None or spec.input_dim != D or spec.output_dim != out:
                raise ValueError(f"{name} must map R^{D} -> R^{out}")

    def net_items(self):
        return [(k, getattr(self, k)) for k in ("U", "H", "sigma1", "sigma2")
                if getattr(self, k) is not None]


@dataclass(frozen=True, eq=False)
class ModelState:
    """A structure plus its parameters: ``U``, ``gamma``, ``H``, ``sigma1``, ``sigma2``
    (state-dependent diffusion) or ``diag_raw`` (constant diagonal diffusion)."""

    structure: ModelStructure
    params: dict

    @property
    def dim(self) -> int:
        return self.structure.dim

    def net(self, name: str) -> NetParams:
        return NetParams(np.asarray(self.params[name]), getattr(self.structure, name))

    def with_params(self, params: dict) -> "ModelState":
        return ModelState(self.structure, {k: np.asarray(v, dtype=np.float64) for k, v in params.items()})

    def copy(self) -> "ModelState":
        return self.with_params({k: np.array(v) for k, v in self.params.items()})


def _sub_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def build_model(
    dim: int,
    *,
    m: int = 32,
    u_hidden=(128,),
    h_hidden=(128, 128),
    sigma_hidden=(32, 32),
    u_activation: Activation | None = None,
    h_activation: Activation | None = None,
    sigma_activation: Activation | None = None,
    diffusion: str = STATE_DEPENDENT,
    beta1: float = 1.0,
    beta2: float = 1.0,
    beta3: float = 0.01,
    seed: int = 0,
) -> ModelState:
    """Randomly initialized model; identical ``seed`` gives identical parameters."""
    tanh = Activation.tanh()
    D = dim
    U = NetSpec(D, tuple(u_hidden), m, u_activation or tanh, _sub_seed(seed, 0))
    H = NetSpec(D, tuple(h_hidden), D - 1, h_activation or tanh, _sub_seed(seed, 1)) if D > 1 else None
    s1 = s2 = None
    if diffusion == STATE_DEPENDENT:
        sact = sigma_activation or tanh
        if D > 1:
            s1 = NetSpec(D, tuple(sigma_hidden), D * (D - 1) // 2, sact, _sub_seed(seed, 2))
        s2 = NetSpec(D, tuple(sigma_hidden), D, sact, _sub_seed(seed, 3))
    structure = ModelStructure(D, U, H, s1, s2, m, float(beta1), float(beta2), float(beta3), diffusion)

    params = {name: init_params(spec).flat for name, spec in structure.net_items()}
    rng = np.random.default_rng(_sub_seed(seed, 4))
    a = np.sqrt(6.0 / (m + D))
    params["gamma"] = rng.uniform(-a, a, size=(m, D))
    if diffusion == CONSTANT_DIAGONAL:
        params["diag_raw"] = np.zeros(D)
    return ModelState(structure, params)


# --------------------------------------------------------------------------
# jax-traceable point evaluations; ``p`` is the parameter dict, ``z`` one state


def _diag_map(x):
    return 0.5 * (jnp.sqrt(x * x + 1.0) + x)


def _diag_map_deriv(x):
    return 0.5 * (x / jnp.sqrt(x * x + 1.0) + 1.0)


def potential(s: ModelStructure, p, z):
    """Return ``(V, grad V)``."""
    u, Ju = forward_with_jacobian(s.U, p["U"], z)
    gamma = p["gamma"]
    r = u + s.beta2 * (gamma @ z)
    V = 0.5 * s.beta1 * jnp.dot(r, r) + s.beta3 * jnp.dot(z, z)
    grad = s.beta1 * ((Ju + s.beta2 * gamma).T @ r) + 2.0 * s.beta3 * z
    return V, grad


def antisym(s: ModelStructure, p, z):
    """Return ``(W, div W)``."""
    D = s.dim
    if s.H is None:
        return jnp.zeros((D, D), dtype=z.dtype), jnp.zeros(D, dtype=z.dtype)
    h, Jh = forward_with_jacobian(s.H, p["H"], z)
    idx = jnp.arange(D - 1)
    W = jnp.zeros((D, D), dtype=h.dtype).at[idx, idx + 1].set(h).at[idx + 1, idx].set(-h)
    # row d gets +d_{d+1} H_d from W[d, d+1] and -d_{d-1} H_{d-1} from W[d, d-1]
    upper = Jh[idx, idx + 1]
    lower = Jh[idx, idx]
    div = jnp.zeros(D, dtype=h.dtype).at[:-1].add(upper).at[1:].add(-lower)
    return W, div


def diffusion(s: ModelStructure, p, z):
    """Return ``(sigma, M, div M)``."""
    D = s.dim
    if s.diffusion == CONSTANT_DIAGONAL:
        sig = jnp.diag(_diag_map(p["diag_raw"]))
        return sig, 0.5 * sig @ sig.T, jnp.zeros(D, dtype=sig.dtype)
    s2, J2 = forward_with_jacobian(s.sigma2, p["sigma2"], z)
    sig = jnp.diag(_diag_map(s2))
    # dsig[i, j, k] = d sigma_ij / d z_k
    dsig = jnp.zeros((D, D, D), dtype=s2.dtype)
    di = jnp.arange(D)
    dsig = dsig.at[di, di, :].set(_diag_map_deriv(s2)[:, None] * J2)
    if s.sigma1 is not None:
        s1, J1 = forward_with_jacobian(s.sigma1, p["sigma1"], z)
        rows, cols = np.tril_indices(D, -1)
        sig = sig.at[rows, cols].set(s1)
        dsig = dsig.at[rows, cols, :].set(J1)
    M = 0.5 * sig @ sig.T
    # (div M)_i = 1/2 sum_{j,l} (d_j sig_il sig_jl + sig_il d_j sig_jl)
    divM = 0.5 * (jnp.einsum("ilj,jl->i", dsig, sig) + sig @ jnp.einsum("jlj->l", dsig))
    return sig, M, divM


def all_fields(s: ModelStructure, p, z) -> dict:
    V, gV = potential(s, p, z)
    W, divW = antisym(s, p, z)
    sig, M, divM = diffusion(s, p, z)
    f_rev = -M @ gV + divM
    f_irr = -W @ gV + divW
    return {
        "V": V, "grad_V": gV, "W": W, "div_W": divW, "sigma": sig, "M": M,
        "div_M": divM, "f_rev": f_rev, "f_irr": f_irr, "drift": f_rev + f_irr,
    }


def point_drift(s: ModelStructure, p, z):
    V, gV = potential(s, p, z)
    W, divW = antisym(s, p, z)
    sig, M, divM = diffusion(s, p, z)
    return -(M + W) @ gV + divM + divW, sig


# --------------------------------------------------------------------------
# numpy-facing evaluation


@functools.lru_cache(maxsize=None)
def _batched_fields(s: ModelStructure):
    return jax.jit(jax.vmap(lambda p, z: all_fields(s, p, z), in_axes=(None, 0)))


@functools.lru_cache(maxsize=None)
def _batched_drift(s: ModelStructure):
    return jax.jit(jax.vmap(lambda p, z: point_drift(s, p, z), in_axes=(None, 0)))


def _as_states(model: ModelState, Z) -> tuple[np.ndarray, bool]:
    Z = np.asarray(Z, dtype=np.float64)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    if Z.shape[1] != model.dim:
        raise ValueError(f"states have dimension {Z.shape[1]}, model has {model.dim}")
    return Z, single


def evaluate(model: ModelState, Z) -> dict:
    """All fields at one state ``(D,)`` or a batch ``(N, D)``, as numpy arrays."""
    Z, single = _as_states(model, Z)
    out = _batched_fields(model.structure)(model.params, jnp.asarray(Z))
    out = {k: np.asarray(v) for k, v in out.items()}
    if single:
        out = {k: v[0] for k, v in out.items()}
    return out


def drift_and_sigma(model: ModelState, Z) -> tuple[np.ndarray, np.ndarray]:
    """Batched drift ``(N, D)`` and diffusion factor ``(N, D, D)``."""
    Z, _ = _as_states(model, Z)
    f, sig = _batched_drift(model.structure)(model.params, jnp.asarray(Z))
    return np.asarray(f), np.asarray(sig)


def _field(name):
    def fn(model: ModelState, z):
        return evaluate(model, z)[name]
    fn.__name__ = name
    return fn


sigma = _field("sigma")
assemble_W = _field("W")
M_matrix = _field("M")
div_M = _field("div_M")
div_W = _field("div_W")
grad_V = _field("grad_V")
V = _field("V")
drift = _field("drift")
drift_reversible = _field("f_rev")
drift_irreversible = _field("f_irr")


def reversed_drift(model: ModelState, z):
    """Drift of the time-reversed stationary process: the W-part flips sign."""
    out = evaluate(model, z)
    return out["f_rev"] - out["f_irr"]


def log_stationary_density_unnormalized(model: ModelState, z):
    """``-V(z)``; the normalizer is deliberately not computed."""
    return -V(model, z)


def potential_fn(model: ModelState):
    """``(value, grad)`` callables on single states, for the landscape tools."""
    return (lambda z: float(V(model, z))), (lambda z: grad_V(model, z))


# --------------------------------------------------------------------------
# checkpoints


def structure_to_dict(s: ModelStructure) -> dict:
    return {
        "dim": s.dim,
        "m": s.m,
        "beta1": s.beta1,
        "beta2": s.beta2,
        "beta3": s.beta3,
        "diffusion": s.diffusion,
        "nets": {k: spec.to_dict() for k, spec in s.net_items()},
    }


def structure_from_dict(d: dict) -> ModelStructure:
    nets = {k: NetSpec.from_dict(v) for k, v in d["nets"].items()}
    return ModelStructure(
        int(d["dim"]), nets["U"], nets.get("H"), nets.get("sigma1"), nets.get("sigma2"),
        int(d["m"]), float(d["beta1"]), float(d["beta2"]), float(d["beta3"]), d["diffusion"],
    )


def model_to_dict(model: ModelState) -> dict:
    return {
        "structure": structure_to_dict(model.structure),
        "params": {k: np.asarray(v).tolist() for k, v in sorted(model.params.items())},
    }


def model_from_dict(d: dict) -> ModelState:
    s = structure_from_dict(d["structure"])
    return ModelState(s, {k: np.asarray(v, dtype=np.float64) for k, v in d["params"].items()})


def save_checkpoint(path, model: ModelState, *, seed: int | None = None,
                    dataset_fingerprint: str | None = None, extra: dict | None = None) -> None:
    doc = {
        "format": "onsager-sde-checkpoint/1",
        **model_to_dict(model),
        "training_seed": seed,
        "dataset_fingerprint": dataset_fingerprint,
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path) -> tuple[ModelState, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "onsager-sde-checkpoint/1":
        raise ValueError(f"{path} is not a model checkpoint")
    return model_from_dict(doc), doc


def fingerprint_arrays(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=np.float64)).tobytes())
    return h.hexdigest()[:16]
