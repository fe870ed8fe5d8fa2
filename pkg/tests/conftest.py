import numpy as np
import pytest

from onsager_sde.decomp import hamiltonian_field
from onsager_sde.model import build_model
from onsager_sde.nets import Activation


def random_model(dim: int, seed: int = 0, diffusion: str = "state", scale: float = 0.5, act=None):
    """Small model with every parameter (biases included) drawn at random."""
    act = act or Activation.tanh()
    model = build_model(dim, m=4, u_hidden=(5,), h_hidden=(4, 3), sigma_hidden=(3,),
                        u_activation=act, h_activation=act, sigma_activation=act,
                        diffusion=diffusion, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    return model.with_params({k: scale * rng.standard_normal(np.shape(v)) for k, v in model.params.items()})


def random_potential_grad(rng, dim, n_terms=3):
    """Gradient of P(z) = sum_k a_k sin(b_k . z + c_k) + z^T Q z / 2, batched."""
    a = rng.normal(size=n_terms)
    b = rng.normal(size=(n_terms, dim))
    c = rng.uniform(0, 2 * np.pi, n_terms)
    Q = rng.normal(size=(dim, dim))
    Q = 0.5 * (Q + Q.T)

    def grad(Z):
        return (a * np.cos(Z @ b.T + c)) @ b + Z @ Q
    return grad


def forward_fields(n, seed=0):
    """``n`` divergence-free fields sum_d J_d grad P_d, alternating D = 2, 3."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        dim = 2 + k % 2
        out.append((dim, hamiltonian_field([random_potential_grad(rng, dim) for _ in range(dim - 1)])))
    return out


@pytest.fixture
def rand_model():
    return random_model


def central_diff(fn, z, h=1e-6):
    """Jacobian columns ``d fn / d z_k`` of a numpy function at one state."""
    z = np.asarray(z, dtype=np.float64)
    cols = []
    for k in range(len(z)):
        e = np.zeros_like(z)
        e[k] = h
        cols.append((np.asarray(fn(z + e)) - np.asarray(fn(z - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def _constant_net(spec, value):
    """Flat parameters of a net whose output is the constant ``value``."""
    flat = np.zeros(spec.n_params)
    flat[spec.n_params - spec.output_dim:] = value
    return flat


def exact_linear_model(system, beta3: float = 0.01):
    """A ``ModelState`` whose fields reproduce a 2-D linear benchmark exactly.

    V = z^T S z / 2, W = lam * J, sigma = chol(2M).
    """
    base = build_model(2, m=2, u_hidden=(2,), h_hidden=(2,), sigma_hidden=(2,), beta3=beta3)
    s = base.structure
    L = np.linalg.cholesky(system.Smat - 2 * beta3 * np.eye(2))
    sig = np.linalg.cholesky(2 * system.Mmat)
    d = np.diag(sig)
    params = {
        "U": _constant_net(s.U, 0.0),
        "gamma": L.T.copy(),
        "H": _constant_net(s.H, system.lam),
        "sigma1": _constant_net(s.sigma1, sig[1, 0]),
        "sigma2": _constant_net(s.sigma2, d - 1.0 / (4.0 * d)),
    }
    return base.with_params(params)


# acceptance results, reported once at the end of the session
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_acceptance(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[name] = (bool(ok), detail)
    print(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda n: int(n.split("-")[1])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
