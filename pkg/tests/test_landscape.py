import time

import numpy as np
import pytest

from conftest import random_model
from onsager_sde.landscape import (
    DistinctMinimaError,
    NonConvergenceError,
    PotentialField,
    barrier_heights,
    descend_to_minimum,
    fd_hessian,
    gad_find_saddle,
    n_negative_eigenvalues,
    project_by_minimization,
)


def double_well():
    return PotentialField(
        lambda z: (z[0] ** 2 - 1) ** 2 / 4 + z[1] ** 2 / 2,
        lambda z: np.array([z[0] * (z[0] ** 2 - 1), z[1]]),
    )


def bowl():
    return PotentialField(lambda z: 0.5 * np.dot(z, z), lambda z: np.asarray(z, dtype=float))


def test_double_well_saddle_and_barriers():
    t0 = time.perf_counter()
    rep = barrier_heights(double_well(), [-0.8, 0.3], [1.2, -0.2])
    assert time.perf_counter() - t0 < 5.0
    np.testing.assert_allclose(rep.saddle[0], [0.0, 0.0], atol=1e-5)
    assert rep.barrier_forward == pytest.approx(0.25, abs=1e-3)
    assert rep.barrier_backward == pytest.approx(0.25, abs=1e-3)
    np.testing.assert_allclose(sorted(m[0][0] for m in rep.minima), [-1.0, 1.0], atol=1e-5)
    d = rep.to_dict()
    assert d["saddle"]["state"] == pytest.approx([0.0, 0.0], abs=1e-5) and d["n_candidates"] >= 1


def test_shift_leaves_barriers_unchanged():
    a = barrier_heights(double_well(), [-1, 0], [1, 0], n_midpoint_starts=3)
    b = barrier_heights(double_well().shifted(7.5), [-1, 0], [1, 0], n_midpoint_starts=3)
    assert b.barrier_forward == pytest.approx(a.barrier_forward, abs=1e-10)


def test_bowl_has_no_two_minima():
    with pytest.raises(DistinctMinimaError, match="distinct minima required"):
        barrier_heights(bowl(), [1.0, 1.0], [-2.0, 0.5])


def test_descent_and_hessian():
    x = descend_to_minimum(double_well(), [0.3, 2.0])
    np.testing.assert_allclose(x, [1.0, 0.0], atol=1e-5)
    np.testing.assert_allclose(fd_hessian(double_well(), [0.0, 0.0]), np.diag([-1.0, 1.0]), atol=1e-8)
    assert n_negative_eigenvalues(double_well(), [0.0, 0.0]) == 1
    assert n_negative_eigenvalues(double_well(), [1.0, 0.0]) == 0


def test_gad_from_off_axis_start():
    s, v = gad_find_saddle(double_well(), [0.4, 0.3], [1.0, 0.2])
    np.testing.assert_allclose(s, [0.0, 0.0], atol=1e-5)
    assert abs(v[0]) == pytest.approx(1.0, abs=1e-3)
    with pytest.raises(ValueError):
        gad_find_saddle(double_well(), [0.4, 0.3], [0.0, 0.0])


def test_nonconvergence_is_reported():
    with pytest.raises(NonConvergenceError) as err:
        gad_find_saddle(double_well(), [0.4, 0.3], [1.0, 0.0], max_iters=5)
    assert err.value.last is not None


def test_learned_potential_field():
    model = random_model(2, seed=1, scale=0.3)
    f = PotentialField.from_model(model)
    z = np.array([0.2, -0.4])
    h = 1e-6
    fd = np.array([(f.value(z + h * e) - f.value(z - h * e)) / (2 * h) for e in np.eye(2)])
    np.testing.assert_allclose(f.grad(z), fd, atol=1e-7)


def test_projection_by_minimization():
    V = lambda Z: Z[:, 0] ** 2 + Z[:, 1] ** 2 + (Z[:, 2] - 0.5) ** 2  # noqa: E731
    P = np.array([[0.0, 0.0], [1.0, 2.0]])
    out = project_by_minimization(V, P, np.linspace(-1, 1, 41))
    np.testing.assert_allclose(out, [0.0, 5.0], atol=1e-12)
