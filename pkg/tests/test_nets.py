import jax
import jax.numpy as jnp
import jax.scipy.linalg as jsl
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onsager_sde.nets import (
    Activation,
    NetParams,
    NetSpec,
    UnsupportedPrimitiveError,
    forward,
    forward_with_jacobian,
    init_params,
    loss_param_gradient,
    net_eval,
    net_input_jacobian,
)

ACTS = [Activation.tanh(), Activation.requ(), Activation.recu()]


def loop_forward(spec, flat, z):
    """Independent scalar-loop evaluation of the same layout."""
    pos = 0
    h = list(z)
    dims = spec.layer_dims
    for k, (fan_in, fan_out) in enumerate(dims):
        W = [[flat[pos + r * fan_in + c] for c in range(fan_in)] for r in range(fan_out)]
        pos += fan_in * fan_out
        b = flat[pos:pos + fan_out]
        pos += fan_out
        a = [sum(W[r][c] * h[c] for c in range(fan_in)) + b[r] for r in range(fan_out)]
        if k < len(dims) - 1:
            if spec.activation.kind == "tanh":
                a = [np.tanh(x) for x in a]
            elif spec.activation.kind == "requ":
                a = [max(x + spec.activation.shift, 0.0) ** 2 for x in a]
            else:
                a = [max(x, 0.0) ** 3 for x in a]
        h = a
    return np.array(h)


def random_spec(rng, act=None):
    d_in = int(rng.integers(1, 5))
    hidden = tuple(int(x) for x in rng.integers(1, 7, size=rng.integers(0, 3)))
    d_out = int(rng.integers(1, 4))
    act = act or ACTS[int(rng.integers(0, 3))]
    return NetSpec(d_in, hidden, d_out, act, int(rng.integers(0, 1000)))


def randomized(spec, rng):
    # nonzero biases so ReQU/ReCU kinks are not all at the origin
    return NetParams(rng.normal(0, 0.7, spec.n_params), spec)


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        spec = random_spec(rng)
        p = randomized(spec, rng)
        z = rng.normal(size=spec.input_dim)
        np.testing.assert_allclose(net_eval(p, z), loop_forward(spec, p.flat, z), rtol=1e-12, atol=1e-12)


def test_input_jacobian_matches_central_differences():
    rng = np.random.default_rng(1)
    h = 1e-6
    for case in range(100):
        spec = random_spec(rng, ACTS[case % 3])
        p = randomized(spec, rng)
        z = rng.normal(size=spec.input_dim)
        J = net_input_jacobian(p, z)
        assert J.shape == (spec.output_dim, spec.input_dim)
        fd = np.column_stack([
            (loop_forward(spec, p.flat, z + h * e) - loop_forward(spec, p.flat, z - h * e)) / (2 * h)
            for e in np.eye(spec.input_dim)
        ])
        np.testing.assert_allclose(J, fd, rtol=1e-6, atol=1e-6)


def test_affine_net_gradient_closed_form():
    spec = NetSpec(3, (), 2, Activation.tanh(), 0)
    rng = np.random.default_rng(2)
    p = NetParams(rng.normal(size=spec.n_params), spec)
    z = rng.normal(size=3)

    g = loss_param_gradient(lambda th: 0.5 * jnp.sum(forward(spec, th, jnp.asarray(z)) ** 2), p)
    W, b = p.flat[:6].reshape(2, 3), p.flat[6:]
    y = W @ z + b
    np.testing.assert_allclose(g, np.concatenate([np.outer(y, z).ravel(), y]), rtol=1e-12)


def test_constant_loss_has_zero_gradient():
    spec = NetSpec(2, (4,), 1, Activation.tanh(), 0)
    p = init_params(spec)
    g = loss_param_gradient(lambda th: 0.0 * jnp.sum(th) + 3.0, p)
    assert np.all(g == 0.0)


def test_param_gradient_with_jacobian_terms_matches_fd():
    rng = np.random.default_rng(3)
    for case in range(20):
        spec = random_spec(rng, ACTS[case % 3])
        p = randomized(spec, rng)
        Z = jnp.asarray(rng.normal(size=(4, spec.input_dim)))
        A = rng.normal(size=(spec.input_dim, spec.input_dim))
        S = jnp.asarray(A @ A.T + spec.input_dim * np.eye(spec.input_dim))

        def loss(th):
            def one(z):
                y, J = forward_with_jacobian(spec, th, z)
                gv = J.T @ y  # gradient of |y|^2/2
                quad = gv @ jsl.cho_solve(jsl.cho_factor(S, lower=True), gv)
                return jnp.log1p(jnp.sum(y ** 2)) + quad + jnp.exp(-jnp.sum(J ** 2))
            return jnp.mean(jax.vmap(one)(Z))

        g = loss_param_gradient(loss, p)
        h = 1e-5
        lf = jax.jit(loss)
        fd = np.array([(float(lf(p.flat + h * e)) - float(lf(p.flat - h * e))) / (2 * h)
                       for e in np.eye(spec.n_params)])
        rel = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)
        assert rel < 1e-4, (case, rel)


def test_unsupported_primitive_rejected_at_construction():
    spec = NetSpec(2, (3,), 2, Activation.tanh(), 0)
    p = init_params(spec)
    with pytest.raises(UnsupportedPrimitiveError):
        loss_param_gradient(lambda th: jnp.sum(jnp.sort(forward(spec, th, jnp.ones(2)))), p)
    with pytest.raises(UnsupportedPrimitiveError):
        loss_param_gradient(
            lambda th: jax.lax.fori_loop(0, 3, lambda i, a: a * 2.0, jnp.sum(th)), p)


def test_init_is_deterministic_and_glorot_bounded():
    spec = NetSpec(3, (8, 5), 2, Activation.requ(), 42)
    a, b = init_params(spec), init_params(spec)
    assert np.array_equal(a.flat, b.flat)
    assert not np.array_equal(a.flat, init_params(NetSpec(3, (8, 5), 2, Activation.requ(), 43)).flat)
    pos = 0
    for fan_in, fan_out in spec.layer_dims:
        W = a.flat[pos:pos + fan_in * fan_out]
        assert np.max(np.abs(W)) <= np.sqrt(6.0 / (fan_in + fan_out))
        pos += fan_in * fan_out
        assert np.all(a.flat[pos:pos + fan_out] == 0.0)
        pos += fan_out
    assert pos == spec.n_params


def test_wrong_shapes_rejected():
    spec = NetSpec(2, (3,), 1, Activation.tanh(), 0)
    with pytest.raises(ValueError):
        NetParams(np.zeros(spec.n_params + 1), spec)
    with pytest.raises(ValueError):
        net_eval(init_params(spec), np.zeros(3))
    with pytest.raises(ValueError):
        Activation("relu")


def test_spec_roundtrip():
    spec = NetSpec(3, (4, 2), 1, Activation.requ(0.25), 9)
    assert NetSpec.from_dict(spec.to_dict()) == spec


@settings(max_examples=40, deadline=None)
@given(x=st.floats(-3, 3), kind=st.sampled_from(["tanh", "requ", "recu"]))
def test_activation_derivative_matches_fd(x, kind):
    act = Activation(kind, 0.5 if kind == "requ" else 0.0)
    h = 1e-6
    fd = (float(act(x + h)) - float(act(x - h))) / (2 * h)
    assert abs(float(act.derivative(jnp.asarray(x))) - fd) < 1e-5 * max(1.0, abs(fd))
