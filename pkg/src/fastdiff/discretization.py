"""Radial finite-volume discretization on a uniform grid.

Fields live on the interior nodes ``r_i = i*h`` (``i = 1..n``, ``h = R/(n+1)``).
The outer boundary ``r = R`` carries a homogeneous Dirichlet condition. For
``dim == 1`` the domain is the interval ``(0, R)`` with Dirichlet at both ends;
for ``dim >= 2`` the inner face sits at the origin where the radial flux
weight ``r**(dim-1)`` vanishes, which is the reflection (``u'(0) = 0``) condition.

The stiffness matrix is the symmetric form of
``-(r^(N-1) u')' / r^(N-1)`` multiplied by the cell measure, so that
``u @ A @ u`` approximates ``int |grad u|^2`` in radial coordinates (up to the
constant surface factor, which is dropped throughout).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

__all__ = [
    "RadialGrid",
    "OperatorSet",
    "build_grid",
    "assemble_operators",
    "integrate",
    "hneg_norm",
    "h1_norm",
    "laplacian_eigenvalues",
]


@dataclass(frozen=True, eq=False)
class RadialGrid:
    dim: int
    radius: float
    n: int
    nodes: np.ndarray
    measure_weights: np.ndarray

    @property
    def h(self) -> float:
        return self.radius / (self.n + 1)

    @property
    def faces(self) -> np.ndarray:
        """Cell faces ``a_1 < ... < a_{n+1}``; cell ``i`` is ``[a_i, a_{i+1}]``."""
        h = self.h
        f = (np.arange(self.n + 1) + 0.5) * h
        f[0] = 0.0
        f[-1] = self.radius
        return f

    def measure(self) -> float:
        """Exact ``int_0^R r^(N-1) dr``."""
        return self.radius**self.dim / self.dim


def build_grid(dim: int, radius: float, n: int) -> RadialGrid:
    if int(dim) != dim or dim < 1:
        raise ValueError(f"dim must be a positive integer, got {dim!r}")
    if not math.isfinite(radius) or radius <= 0:
        raise ValueError(f"radius must be finite and positive, got {radius!r}")
    if int(n) != n or n < 3:
        raise ValueError(f"need at least 3 interior nodes, got {n!r}")
    dim, n = int(dim), int(n)
    h = radius / (n + 1)
    nodes = np.arange(1, n + 1, dtype=float) * h
    # cells: [0, 3h/2], [3h/2, 5h/2], ..., [R - 3h/2, R]
    faces = (np.arange(n + 1) + 0.5) * h
    faces[0] = 0.0
    faces[-1] = radius
    weights = np.diff(faces**dim) / dim
    return RadialGrid(dim=dim, radius=float(radius), n=n, nodes=nodes, measure_weights=weights)


@dataclass(frozen=True, eq=False)
class OperatorSet:
    """Stiffness ``A`` (tridiagonal), mass ``M`` and a Cholesky handle for ``A``.

    ``stiff_diag``/``stiff_off`` hold the tridiagonal entries of ``A``; ``mass``
    is the lumped diagonal (the measure weights). ``consistent_mass`` is only
    populated when requested and is used for the plain Laplacian spectrum.
    """

    grid: RadialGrid
    stiff_diag: np.ndarray
    stiff_off: np.ndarray
    face_coef: np.ndarray
    mass: np.ndarray
    consistent_mass: np.ndarray | None = None
    _chol: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.grid.n

    def stiffness_banded(self) -> np.ndarray:
        """Upper banded storage ``(2, n)`` as used by ``scipy.linalg.*_banded``."""
        ab = np.zeros((2, self.n))
        ab[0, 1:] = self.stiff_off
        ab[1] = self.stiff_diag
        return ab

    def stiffness_dense(self) -> np.ndarray:
        return (np.diag(self.stiff_diag) + np.diag(self.stiff_off, 1)
                + np.diag(self.stiff_off, -1))

    def apply_stiffness(self, u: np.ndarray) -> np.ndarray:
        # flux form: differences first, so smooth fields lose no digits
        ext = np.zeros(self.n + 2)
        ext[1:-1] = u
        flux = self.face_coef * np.diff(ext)
        return flux[:-1] - flux[1:]

    def solve_stiffness(self, f: np.ndarray) -> np.ndarray:
        return sla.cho_solve_banded((self._chol, False), f)

    def energy_inner(self, u: np.ndarray, w: np.ndarray) -> float:
        """``u^T A w``, the discrete H^1_0 inner product."""
        return float(u @ self.apply_stiffness(w))


def _face_coefficients(grid: RadialGrid) -> np.ndarray:
    h, dim, n = grid.h, grid.dim, grid.n
    # faces r_{i+1/2} = (i + 1/2) h for i = 0..n; the flux across face i+1/2
    # couples nodes i and i+1 (nodes 0 and n+1 being boundary/origin)
    r_face = (np.arange(n + 1) + 0.5) * h
    coef = r_face ** (dim - 1) / h
    if dim >= 2:
        # the innermost cell reaches the origin; no flux through r = 0
        coef[0] = 0.0
    return coef


def _consistent_mass(grid: RadialGrid) -> np.ndarray:
    """P1 mass matrix with the ``r^(N-1)`` weight, in upper banded storage."""
    h, dim, n = grid.h, grid.dim, grid.n
    xg, wg = np.polynomial.legendre.leggauss(4)
    xg = 0.5 * (xg + 1.0)
    wg = 0.5 * wg
    ab = np.zeros((2, n))
    # element e spans [e h, (e+1) h], e = 0..n, joining nodes e and e+1
    for e in range(n + 1):
        r = (e + xg) * h
        wt = wg * h * r ** (dim - 1)
        left, right = 1.0 - xg, xg
        mll = np.sum(wt * left * left)
        mrr = np.sum(wt * right * right)
        mlr = np.sum(wt * left * right)
        if e == 0 and dim >= 2:
            # origin value equals u_1 under the reflection condition
            ab[1, 0] += mll + mrr + 2.0 * mlr
            continue
        if e >= 1:
            ab[1, e - 1] += mll
        if e <= n - 1:
            ab[1, e] += mrr
        if 1 <= e <= n - 1:
            ab[0, e] = mlr
    return ab


def assemble_operators(grid: RadialGrid, mass: str = "lumped") -> OperatorSet:
    if mass not in ("lumped", "consistent"):
        raise ValueError(f"mass must be 'lumped' or 'consistent', got {mass!r}")
    coef = _face_coefficients(grid)
    diag, off = coef[:-1] + coef[1:], -coef[1:-1]
    ab = np.zeros((2, grid.n))
    ab[0, 1:] = off
    ab[1] = diag
    try:
        chol = sla.cholesky_banded(ab, lower=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - assembly bug
        raise np.linalg.LinAlgError("stiffness matrix is not positive definite") from exc
    cmass = _consistent_mass(grid) if mass == "consistent" else None
    return OperatorSet(grid=grid, stiff_diag=diag, stiff_off=off, face_coef=coef,
                       mass=grid.measure_weights.copy(), consistent_mass=cmass, _chol=chol)


def integrate(grid: RadialGrid, f) -> float:
    """Quadrature of nodal values against ``r^(N-1) dr``."""
    return float(np.dot(grid.measure_weights, np.asarray(f, dtype=float)))


def h1_norm(ops: OperatorSet, w: np.ndarray) -> float:
    return math.sqrt(max(ops.energy_inner(w, w), 0.0))


def hneg_norm(ops: OperatorSet, f: np.ndarray) -> float:
    """Dual norm ``sqrt(f^T A^{-1} f)`` of a load vector."""
    f = np.asarray(f, dtype=float)
    if not np.any(f):
        return 0.0
    return math.sqrt(max(float(f @ ops.solve_stiffness(f)), 0.0))


def laplacian_eigenvalues(ops: OperatorSet, m: int = 1, mass: str = "lumped") -> np.ndarray:
    """Smallest ``m`` generalized eigenvalues of ``(A, M)``."""
    n = ops.n
    if mass == "lumped":
        d = 1.0 / np.sqrt(ops.mass)
        vals = sla.eigh_tridiagonal(ops.stiff_diag * d * d, ops.stiff_off * d[:-1] * d[1:],
                                    eigvals_only=True, select="i", select_range=(0, m - 1))
        return np.asarray(vals)
    if ops.consistent_mass is None:
        raise ValueError("operators were assembled without a consistent mass matrix")
    cm = ops.consistent_mass
    mdense = np.diag(cm[1]) + np.diag(cm[0, 1:], 1) + np.diag(cm[0, 1:], -1)
    if n > 3000:
        raise ValueError("consistent-mass spectrum is dense; use n <= 3000")
    return sla.eigh(ops.stiffness_dense(), mdense, eigvals_only=True, subset_by_index=(0, m - 1))
