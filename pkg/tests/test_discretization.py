import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import bessel_eigenvalue
from fastdiff.discretization import (assemble_operators, build_grid, h1_norm, hneg_norm, integrate,
                                     laplacian_eigenvalues)


def test_grid_uniform_1d():
    g = build_grid(1, 1.0, 3)
    assert np.allclose(g.nodes, [0.25, 0.5, 0.75])
    assert g.h == 0.25


def test_grid_uniform_3d():
    g = build_grid(3, 2.0, 7)
    assert g.h == 0.25
    assert g.nodes[-1] == 1.75


def test_weight_sum_pi():
    g = build_grid(1, math.pi, 999)
    assert abs(g.measure_weights.sum() - math.pi) <= 1e-10 * math.pi


@pytest.mark.parametrize("bad", [dict(n=2), dict(radius=math.inf), dict(radius=-1.0), dict(dim=0)])
def test_grid_rejects(bad):
    args = dict(dim=1, radius=1.0, n=10) | bad
    with pytest.raises(ValueError):
        build_grid(**args)


@given(dim=st.integers(1, 4), radius=st.floats(0.1, 10.0), n=st.integers(3, 300))
@settings(max_examples=60, deadline=None)
def test_grid_invariants(dim, radius, n):
    g = build_grid(dim, radius, n)
    assert abs(g.h * (n + 1) - radius) <= 4e-16 * radius
    assert np.all(np.diff(g.nodes) > 0) and g.nodes[-1] < radius
    assert np.all(g.measure_weights > 0)
    assert abs(g.measure_weights.sum() - radius**dim / dim) <= 1e-10 * radius**dim / dim


@pytest.mark.parametrize("dim,radius,f,expected,tol", [
    (1, 2.0, lambda r: np.ones_like(r), 2.0, 1e-14),
    (1, 1.0, lambda r: r, 0.5, 1e-6),
    (2, 1.0, lambda r: np.ones_like(r), 0.5, 1e-6),
])
def test_integrate(dim, radius, f, expected, tol):
    g = build_grid(dim, radius, 1000)
    assert abs(integrate(g, f(g.nodes)) - expected) <= tol


def test_integrate_linear_and_monotone(rng):
    g = build_grid(2, 1.0, 50)
    a, b = rng.standard_normal(50), rng.standard_normal(50)
    assert math.isclose(integrate(g, 2 * a - b), 2 * integrate(g, a) - integrate(g, b), abs_tol=1e-13)
    assert integrate(g, np.abs(a)) >= 0


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_stiffness_symmetric_positive(dim, rng):
    ops = assemble_operators(build_grid(dim, 1.3, 60))
    A = ops.stiffness_dense()
    assert np.max(np.abs(A - A.T)) == 0.0
    for _ in range(100):
        x = rng.standard_normal(60)
        assert x @ A @ x > 0
    x = rng.standard_normal(60)
    assert np.allclose(ops.apply_stiffness(x), A @ x, rtol=1e-13, atol=1e-10)


def test_first_eigenvalue_interval():
    ops = assemble_operators(build_grid(1, math.pi, 2000))
    mu = laplacian_eigenvalues(ops, 1)[0]
    assert abs(mu - 1.0) <= 1e-5


def test_first_eigenvalue_ball():
    oracle = bessel_eigenvalue(3)
    assert abs(oracle - math.pi**2) < 1e-10
    ops = assemble_operators(build_grid(3, 1.0, 2000))
    mu = laplacian_eigenvalues(ops, 1)[0]
    assert abs(mu - oracle) <= 1e-4 * oracle


@pytest.mark.parametrize("dim,exact", [(1, 1.0), (2, None), (3, math.pi**2)])
def test_eigenvalue_second_order(dim, exact):
    exact = exact if exact is not None else bessel_eigenvalue(dim)
    radius = math.pi if dim == 1 else 1.0
    errs = [abs(laplacian_eigenvalues(assemble_operators(build_grid(dim, radius, n)), 1)[0] - exact)
            for n in (99, 199, 399)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 1.9)


def test_consistent_mass_eigenvalue():
    ops = assemble_operators(build_grid(1, math.pi, 400), mass="consistent")
    mu = laplacian_eigenvalues(ops, 1, mass="consistent")[0]
    assert abs(mu - 1.0) <= 1e-4


@pytest.mark.parametrize("dim", [1, 3])
def test_hneg_duality(dim, rng):
    ops = assemble_operators(build_grid(dim, 1.0, 300))
    for _ in range(5):
        w = rng.standard_normal(300)
        assert abs(hneg_norm(ops, ops.apply_stiffness(w)) - h1_norm(ops, w)) <= 1e-10 * h1_norm(ops, w)


def test_hneg_zero():
    ops = assemble_operators(build_grid(1, 1.0, 10))
    assert hneg_norm(ops, np.zeros(10)) == 0.0


def test_hneg_sine_load():
    # -u'' = sin on (0, pi) has u = sin, so |sin|_{H^-1}^2 = int cos^2 = pi/2
    g = build_grid(1, math.pi, 2000)
    ops = assemble_operators(g)
    load = ops.mass * np.sin(g.nodes)
    assert abs(hneg_norm(ops, load) ** 2 - math.pi / 2) <= 1e-5
