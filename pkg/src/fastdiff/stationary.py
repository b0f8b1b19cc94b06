"""Stationary profiles ``-Lap phi = lam_q |phi|^(q-2) phi`` with Dirichlet data.

The positive profile is obtained by shooting the normalized radial equation
``psi'' + (N-1)/r psi' + psi^(q-1) = 0`` on the central amplitude, polishing the
interpolated shot with Newton on the discrete system ``A psi = M psi^(q-1)``,
and rescaling ``phi = lam_q^(-1/(q-2)) psi``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate as si
from scipy import linalg as sla
from scipy import optimize as so

from . import functionals as fn
from .discretization import (OperatorSet, RadialGrid, assemble_operators, build_grid, h1_norm,
                             hneg_norm)

log = logging.getLogger(__name__)

__all__ = [
    "Profile",
    "ConvergenceError",
    "solve_positive_profile",
    "sign_changing_profile",
    "quadrature_oracle_profile",
    "oracle_profile_norms",
    "sobolev_constant",
    "write_profile_csv",
]

RESIDUAL_TOL = 1e-10


class ConvergenceError(RuntimeError):
    """A nonlinear or eigen iteration failed to converge."""


@dataclass(frozen=True, eq=False)
class Profile:
    grid: RadialGrid
    q: float
    lambda_q: float
    phi: np.ndarray
    energy: float
    lq_norm: float
    h1_norm: float
    sobolev_c: float | None
    sign_changing: bool
    newton_residual: float
    residual: np.ndarray = field(repr=False, compare=False, default=None)

    def nehari_defect(self) -> float:
        """Relative defect of ``|grad phi|^2 = lam_q |phi|_q^q``."""
        lhs = self.h1_norm**2
        return abs(lhs - self.lambda_q * self.lq_norm**self.q) / lhs


def _profile(ops: OperatorSet, phi: np.ndarray, q: float, sign_changing: bool) -> Profile:
    res = fn.stationary_residual(ops, phi, q)
    rel = _relative_residual(ops, res, phi)
    lqn, h1n = fn.lq_norm(ops.grid, phi, q), h1_norm(ops, phi)
    return Profile(
        grid=ops.grid, q=q, lambda_q=fn.lambda_q(q), phi=phi,
        energy=fn.energy(ops, phi, q), lq_norm=lqn, h1_norm=h1n,
        sobolev_c=None if sign_changing else lqn / h1n,
        sign_changing=sign_changing, newton_residual=rel, residual=res,
    )


# -- shooting ---------------------------------------------------------------

def _half_length(grid: RadialGrid) -> float:
    return grid.radius / 2.0 if grid.dim == 1 else grid.radius


def _center_distance(grid: RadialGrid) -> np.ndarray:
    if grid.dim == 1:
        return np.abs(grid.nodes - grid.radius / 2.0)
    return grid.nodes


def _shoot(amp: float, q: float, dim: int, r_end: float):
    """Integrate the normalized radial equation from the center outward."""
    r0 = 1e-6 * r_end if dim > 1 else 0.0
    # series start: psi = amp - amp^(q-1) r^2 / (2N)
    y0 = [amp - amp ** (q - 1) * r0**2 / (2 * dim), -amp ** (q - 1) * r0 / dim]

    def rhs(r, y):
        damp = (dim - 1) / r * y[1] if r > 0 else 0.0
        return [y[1], -damp - abs(y[0]) ** (q - 2) * y[0]]

    def hit_zero(r, y):
        return y[0]

    hit_zero.terminal = True
    hit_zero.direction = -1
    return si.solve_ivp(rhs, (r0, r_end), y0, events=hit_zero, dense_output=True,
                        rtol=1e-12, atol=1e-14 * amp, method="DOP853")


def _first_zero(amp: float, q: float, dim: int, r_cap: float) -> float:
    sol = _shoot(amp, q, dim, r_cap)
    if sol.t_events[0].size:
        return float(sol.t_events[0][0])
    return math.inf


def _shoot_amplitude(q: float, dim: int, half: float, grid_h: float) -> tuple[float, object]:
    # seed from the first Dirichlet eigenvalue: psi^(q-2) ~ eigenvalue
    if dim == 1:
        lam1 = (math.pi / (2 * half)) ** 2
    else:
        lam1 = (_first_bessel_zero(dim) / half) ** 2
    guess = lam1 ** (1.0 / (q - 2))
    cap = 8.0 * half

    def g(amp):
        return _first_zero(amp, q, dim, cap) - half

    lo, hi = guess, guess
    for _ in range(200):
        if g(lo) > 0:
            break
        lo /= 1.5
    else:
        raise ConvergenceError("could not bracket the shooting amplitude from below")
    for _ in range(200):
        if g(hi) < 0:
            break
        hi *= 1.5
    else:
        raise ConvergenceError("could not bracket the shooting amplitude from above")
    amp = so.brentq(g, lo, hi, xtol=1e-14 * hi, rtol=1e-14)
    return amp, _shoot(amp, q, dim, half * (1 + 1e-9))


def _first_bessel_zero(dim: int) -> float:
    xs = np.arange(0.5, 20.0, 0.25)
    vals = [_bessel_like(x, dim) for x in xs]
    i = next(i for i in range(len(xs) - 1) if vals[i] * vals[i + 1] < 0)
    return so.brentq(lambda x: _bessel_like(x, dim), xs[i], xs[i + 1])


def _bessel_like(x: float, dim: int) -> float:
    """Radial Dirichlet eigenfunction of the unit ball evaluated at r = 1, eigenvalue x^2."""
    from scipy.special import jv

    nu = dim / 2.0 - 1.0
    return jv(nu, x)


# -- Newton polish ---------------------------------------------------------

def _relative_residual(ops: OperatorSet, res: np.ndarray, w: np.ndarray) -> float:
    """``|res|_{H^-1} / |A w|_{H^-1}``; the dual norm ignores nodal roundoff noise."""
    return hneg_norm(ops, res) / h1_norm(ops, w)


def _newton(ops: OperatorSet, w: np.ndarray, q: float, coef: float,
            tol: float = 1e-14, max_iter: int = 60, max_halvings: int = 60) -> tuple[np.ndarray, float]:
    """Newton for ``A w = coef M B(w)`` with step halving on the residual norm."""

    def resid(x):
        return ops.apply_stiffness(x) - coef * ops.mass * fn.signed_power(x, q - 1.0)

    r = resid(w)
    nr = _relative_residual(ops, r, w)
    for _ in range(max_iter):
        if nr <= tol:
            break
        ab = np.zeros((3, ops.n))
        ab[0, 1:] = ops.stiff_off
        ab[1] = ops.stiff_diag - coef * (q - 1.0) * ops.mass * np.abs(w) ** (q - 2.0)
        ab[2, :-1] = ops.stiff_off
        step = sla.solve_banded((1, 1), ab, -r)
        t = 1.0
        for _ in range(max_halvings):
            trial = w + t * step
            rt = resid(trial)
            nrt = _relative_residual(ops, rt, trial)
            if nrt < nr:
                break
            t *= 0.5
        else:
            # no decrease possible: at roundoff level already
            break
        stalled = nrt > 0.5 * nr and nr < 1e3 * tol
        w, r, nr = trial, rt, nrt
        if stalled:
            break
    if nr > RESIDUAL_TOL:
        raise ConvergenceError(f"Newton did not converge: relative residual {nr:.3e}")
    return w, nr


def solve_positive_profile(grid: RadialGrid, ops: OperatorSet, q: float) -> Profile:
    fn.check_exponent(q, grid.dim)
    half = _half_length(grid)
    amp, sol = _shoot_amplitude(q, grid.dim, half, grid.h)
    dist = _center_distance(grid)
    r0 = sol.t[0]
    psi0 = np.where(dist < r0, amp, sol.sol(np.clip(dist, r0, sol.t[-1]))[0])
    psi0 = np.maximum(psi0, 1e-3 * grid.h * amp)
    psi, _ = _newton(ops, psi0, q, 1.0)
    lam = fn.lambda_q(q)
    phi = lam ** (-1.0 / (q - 2.0)) * psi
    phi, _ = _newton(ops, phi, q, lam)
    if np.any(phi <= 0):
        raise ConvergenceError("polished profile has a nonpositive node; refine the grid")
    return _profile(ops, phi, q, sign_changing=False)


def sign_changing_profile(grid: RadialGrid, ops: OperatorSet, q: float, nodes: int) -> Profile:
    """Profile with ``nodes`` interior sign changes, by odd reflection (N = 1)."""
    if grid.dim != 1:
        raise ValueError("sign-changing profiles are built for N = 1 only")
    if nodes < 0:
        raise ValueError("number of sign changes must be nonnegative")
    if nodes == 0:
        return solve_positive_profile(grid, ops, q)
    pieces = nodes + 1
    if (grid.n + 1) % pieces:
        raise ValueError(f"n + 1 = {grid.n + 1} is not divisible by {pieces}")
    n_sub = (grid.n + 1) // pieces - 1
    sub_grid = build_grid(1, grid.radius / pieces, n_sub)
    base = solve_positive_profile(sub_grid, assemble_operators(sub_grid), q).phi
    seg = np.concatenate([base, [0.0]])
    phi0 = np.concatenate([(-1) ** j * seg for j in range(pieces)])[:-1]
    phi, _ = _newton(ops, phi0, q, fn.lambda_q(q))
    signs = np.sign(phi[np.abs(phi) > 1e-8 * np.max(np.abs(phi))])
    changes = int(np.count_nonzero(np.diff(signs)))
    if changes != nodes:
        raise ConvergenceError(f"expected {nodes} sign changes, found {changes}")
    return _profile(ops, phi, q, sign_changing=True)


def sobolev_constant(profile: Profile) -> float:
    """Best Sobolev-Poincare constant from a least-energy profile.

    Both ``|phi|_q / |grad phi|`` and ``lam_q^(-1/2) |phi|_q^((2-q)/2)`` are
    evaluated; they agree through the Nehari identity.
    """
    if profile.sign_changing:
        raise ValueError("the Sobolev constant is attained only by the least-energy profile")
    direct = profile.lq_norm / profile.h1_norm
    alt = profile.lambda_q ** -0.5 * profile.lq_norm ** ((2.0 - profile.q) / 2.0)
    if abs(direct - alt) > 1e-8 * direct:
        raise ConvergenceError(f"Sobolev constant formulas disagree: {direct!r} vs {alt!r}")
    return direct


# -- quadrature oracle (N = 1) ---------------------------------------------

def _unit_integral(q: float, tau: float, tol: float) -> float:
    """``int_tau^1 dt / sqrt(1 - t^q)`` via ``t = 1 - u^2``."""

    def f(u):
        if u == 0.0:
            return 2.0 / math.sqrt(q)
        return 2.0 * u / math.sqrt(-math.expm1(q * math.log1p(-u * u)))

    top = math.sqrt(1.0 - tau)
    val, _ = si.quad(f, 0.0, top, epsabs=0.0, epsrel=tol, limit=500)
    return val


def quadrature_oracle_profile(q: float, R: float, tol: float = 1e-12):
    """Amplitude and sampler of the 1D profile on ``(0, R)`` via the first integral.

    ``1/2 phi'^2 + (lam_q/q) phi^q = (lam_q/q) A^q`` gives the half width
    ``R/2 = int_0^A dphi / sqrt(c (A^q - phi^q))`` with ``c = 2 lam_q / q``.
    The sampler takes the signed distance ``x`` from the midpoint.
    """
    lam = fn.lambda_q(q)
    c = 2.0 * lam / q
    base = _unit_integral(q, 0.0, tol)

    def half_width(amp):
        return amp ** ((2.0 - q) / 2.0) / math.sqrt(c) * base

    def g(log_amp):
        return math.log(half_width(math.exp(log_amp))) - math.log(R / 2.0)

    lo, hi = -1.0, 1.0
    while g(lo) < 0:
        lo -= 2.0
    while g(hi) > 0:
        hi += 2.0
    log_amp = so.brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    amp = math.exp(log_amp)
    scale = amp ** ((2.0 - q) / 2.0) / math.sqrt(c)

    def sampler(x):
        x = abs(float(x))
        if x >= R / 2.0:
            return 0.0
        if x == 0.0:
            return amp
        # distance from the midpoint to the level phi = amp * tau
        tau = so.brentq(lambda t: scale * _unit_integral(q, t, tol) - x, 0.0, 1.0,
                        xtol=1e-15, rtol=4 * np.finfo(float).eps)
        return amp * tau

    sampler.half_width = half_width
    return amp, sampler


def oracle_profile_norms(q: float, R: float, tol: float = 1e-12) -> dict:
    """Norms and energy of the 1D profile by adaptive quadrature in ``phi``."""
    amp, _ = quadrature_oracle_profile(q, R, tol)
    lam = fn.lambda_q(q)
    c = 2.0 * lam / q

    def lq_integrand(u):
        # t = 1 - u^2, dt = 2u du
        t = 1.0 - u * u
        if u == 0.0:
            return 2.0 / math.sqrt(q)
        return 2.0 * u * t**q / math.sqrt(-math.expm1(q * math.log1p(-u * u)))

    iq, _ = si.quad(lq_integrand, 0.0, 1.0, epsabs=0.0, epsrel=tol, limit=500)
    lq_pow = 2.0 * amp ** (q + 1.0 - q / 2.0) / math.sqrt(c) * iq
    ig, _ = si.quad(lambda t: math.sqrt(1.0 - t**q), 0.0, 1.0, epsabs=0.0, epsrel=tol, limit=500)
    grad2 = 2.0 * math.sqrt(c) * amp ** (1.0 + q / 2.0) * ig
    energy = 0.5 * grad2 - lam / q * lq_pow
    return {
        "amplitude": amp,
        "lq_power": lq_pow,
        "grad_sq": grad2,
        "energy": energy,
        "sobolev_c": lq_pow ** (1.0 / q) / math.sqrt(grad2),
    }


def write_profile_csv(path, profile: Profile) -> None:
    g = profile.grid
    c = "" if profile.sobolev_c is None else repr(profile.sobolev_c)
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# q={profile.q!r},N={g.dim},R={g.radius!r},J={profile.energy!r},C_q={c}\n")
        fh.write("r,phi\n")
        for r, v in zip(g.nodes, profile.phi):
            fh.write(f"{float(r)!r},{float(v)!r}\n")
