import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from fastdiff.discretization import assemble_operators, build_grid
from fastdiff.spectrum import solve_weighted_eigs
from fastdiff.stationary import quadrature_oracle_profile, solve_positive_profile


class Case:
    def __init__(self, q, n, dim=1, radius=1.0, m=12):
        self.grid = build_grid(dim, radius, n)
        self.ops = assemble_operators(self.grid)
        self.profile = solve_positive_profile(self.grid, self.ops, q)
        self.spec = solve_weighted_eigs(self.ops, self.profile, m) if m else None
        self.q = q


@pytest.fixture(scope="session")
def q3():
    return Case(3.0, 400)


@pytest.fixture(scope="session")
def q25():
    return Case(2.5, 400)


@pytest.fixture(scope="session")
def q3_fine():
    return Case(3.0, 2000)


def prufer_eigenvalue(q, index, R=1.0, bracket=None):
    """``index``-th eigenvalue of ``-e'' = mu phi^(q-2) e`` on (0, R) by Pruefer-phase shooting.

    The profile is integrated jointly with the phase from ``phi(0) = 0`` and the
    slope fixed by the first integral at the oracle amplitude.
    """
    lam = (q - 1.0) / (q - 2.0)
    amp, _ = quadrature_oracle_profile(q, R, 1e-13)
    slope = math.sqrt(2.0 * lam / q * amp**q)

    def phase_end(mu):
        def rhs(x, y):
            phi, dphi, th = y
            w = abs(phi) ** (q - 2.0)
            return [dphi, -lam * abs(phi) ** (q - 2.0) * phi,
                    math.cos(th) ** 2 + mu * w * math.sin(th) ** 2]
        sol = solve_ivp(rhs, (0.0, R), [0.0, slope, 0.0], method="DOP853", rtol=1e-12, atol=1e-13)
        return sol.y[2, -1] - index * math.pi

    lo, hi = bracket if bracket else (0.1, 200.0)
    return brentq(phase_end, lo, hi, xtol=1e-13, rtol=1e-14)


def bessel_eigenvalue(dim, R=1.0):
    """First Dirichlet eigenvalue of the radial Laplacian by shooting from a series start."""
    def end_value(mu):
        r0 = 1e-6
        u0 = 1.0 - mu * r0**2 / (2 * dim)
        du0 = -mu * r0 / dim

        def rhs(r, y):
            return [y[1], -(dim - 1) / r * y[1] - mu * y[0]]
        sol = solve_ivp(rhs, (r0, R), [u0, du0], method="DOP853", rtol=1e-12, atol=1e-14)
        return sol.y[0, -1]

    return brentq(end_value, 1.0, 30.0, xtol=1e-14)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
