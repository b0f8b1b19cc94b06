"""Scalar functionals along a flow, exponential-rate fitting and the gradient-inequality checker."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import functionals as fn
from .discretization import OperatorSet, RadialGrid, h1_norm, hneg_norm
from .spectrum import Spectrum, op_norm_linv
from .stationary import Profile

__all__ = [
    "DiagnosticSample",
    "RateFit",
    "GradientReport",
    "energy",
    "energy_gap",
    "residual",
    "relative_entropy",
    "relative_error",
    "spectral_residual_coeffs",
    "sample",
    "fit_rate",
    "default_window",
    "check_gradient_inequality",
    "directional_ratios",
    "tartar_pairing",
    "TARTAR_CONSTANT",
    "hessian_fd_check",
]


def TARTAR_CONSTANT(q: float) -> float:
    """``2^(2-q)``: sharp constant in ``(B(a)-B(b))(a-b) >= c |a-b|^q``."""
    return 2.0 ** (2.0 - q)


@dataclass(frozen=True)
class DiagnosticSample:
    s: float
    J: float
    J_gap: float
    entropy: float
    h1_err: float
    delta_sup: float
    hneg_residual: float
    sigma: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class RateFit:
    lambda_hat: float
    intercept: float
    r_squared: float
    window: tuple[float, float]
    n_points: int


energy = fn.energy


def energy_gap(ops: OperatorSet, w: np.ndarray, profile: Profile) -> float:
    """``J(w) - J(phi)``."""
    return fn.energy_gap_about(ops, w, profile.phi, profile.q, profile.residual)


def residual(ops: OperatorSet, w: np.ndarray, q: float,
             profile: Profile | None = None) -> tuple[np.ndarray, float]:
    """Load ``J'(w) = A w - lam_q M B(w)`` and its H^-1 norm.

    Given the profile, the load is assembled as an increment from ``J'(phi)``,
    which keeps small residuals accurate near ``phi``.
    """
    w = np.asarray(w, dtype=float)
    if profile is None:
        load = fn.stationary_residual(ops, w, q)
    else:
        load = fn.residual_about(ops, w, profile.phi, q, profile.residual)
    return load, hneg_norm(ops, load)


def relative_entropy(grid: RadialGrid, w: np.ndarray, profile: Profile) -> float:
    """``int |w - phi|^2 |phi|^(q-2)``."""
    d = np.asarray(w, dtype=float) - profile.phi
    return float(grid.measure_weights @ (d * d * np.abs(profile.phi) ** (profile.q - 2.0)))


def relative_error(grid: RadialGrid, w: np.ndarray, profile: Profile) -> float:
    """``max_i |w_i / phi_i - 1|`` over interior nodes."""
    phi = profile.phi
    if np.any(phi == 0):
        raise ValueError("relative error needs a profile without zero interior nodes")
    return float(np.max(np.abs((np.asarray(w, dtype=float) - phi) / phi)))


def spectral_residual_coeffs(spec: Spectrum, load: np.ndarray) -> np.ndarray:
    """Coefficients of ``load = sum_j sigma_j A e_j``; with ``e^T A e = 1``, ``sigma_j = e_j . load``."""
    return spec.eigvecs @ np.asarray(load, dtype=float)


def parseval_defect(ops: OperatorSet, spec: Spectrum, load: np.ndarray) -> float:
    """``|load|_{H^-1}^2 - sum sigma_j^2``; nonnegative, zero for a complete basis."""
    sig = spectral_residual_coeffs(spec, load)
    return hneg_norm(ops, load) ** 2 - float(sig @ sig)


def sample(ops: OperatorSet, v: np.ndarray, s: float, profile: Profile,
           spec: Spectrum | None = None) -> DiagnosticSample:
    d = v - profile.phi
    load, hneg = residual(ops, v, profile.q, profile)
    sigma = spectral_residual_coeffs(spec, load) if spec is not None and spec.eigvecs is not None \
        else np.empty(0)
    return DiagnosticSample(
        s=float(s),
        J=fn.energy(ops, v, profile.q),
        J_gap=energy_gap(ops, v, profile),
        entropy=relative_entropy(ops.grid, v, profile),
        h1_err=ops.energy_inner(d, d),
        delta_sup=relative_error(ops.grid, v, profile) if not profile.sign_changing else math.nan,
        hneg_residual=hneg,
        sigma=sigma,
    )


# -- rate fitting ------------------------------------------------------------

def fit_rate(s, y, window: tuple[float, float] | None = None) -> RateFit:
    """Least squares of ``log y`` against ``s``; ``lambda_hat`` is the decay exponent (minus the slope)."""
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    if window is not None:
        sel = (s >= window[0]) & (s <= window[1])
        s, y = s[sel], y[sel]
    if s.size < 8:
        raise ValueError(f"need at least 8 points in the window, got {s.size}")
    if np.any(~(y > 0)):
        raise ValueError("nonpositive or non-finite value inside the fit window")
    # logs relative to the first sample: scaling y by 2^k is then exact
    ly = np.log(y / y[0])
    sc = s - s.mean()
    lc = ly - ly.mean()
    sxx = float(sc @ sc)
    slope = float(sc @ lc) / sxx
    intercept = float(ly.mean() - slope * s.mean() + math.log(y[0]))
    sst = float(lc @ lc)
    resid = lc - slope * sc
    r2 = 1.0 if sst == 0.0 else max(0.0, min(1.0, 1.0 - float(resid @ resid) / sst))
    return RateFit(lambda_hat=-slope + 0.0, intercept=intercept, r_squared=r2,
                   window=(float(s[0]), float(s[-1])), n_points=int(s.size))


def default_window(s, gap, drop: float = 10.0, floor_factor: float = 1e6) -> tuple[float, float]:
    """Window excluding the initial transient and the departure/roundoff floor.

    Starts where ``gap`` first falls below ``max/drop``; ends at the last sample
    above ``floor_factor * floor``, the floor being the smallest positive value
    reached before the series stops decreasing.
    """
    s = np.asarray(s, dtype=float)
    g = np.asarray(gap, dtype=float)
    i_max = int(np.argmax(g))
    if not g[i_max] > 0:
        raise ValueError("gap series has no positive values")
    tail = np.arange(i_max, g.size)
    start_candidates = tail[g[tail] <= g[i_max] / drop]
    if start_candidates.size == 0:
        raise ValueError("gap never drops below max/drop")
    i0 = int(start_candidates[0])
    i_end = i0
    while i_end + 1 < g.size and 0 < g[i_end + 1] < g[i_end]:
        i_end += 1
    floor = g[i_end]
    above = np.nonzero(g[i0:i_end + 1] >= floor_factor * floor)[0]
    if above.size == 0:
        raise ValueError("no samples between the transient and the floor")
    i1 = i0 + int(above[-1])
    return float(s[i0]), float(s[i1])


# -- gradient inequality -----------------------------------------------------

@dataclass(frozen=True)
class GradientReport:
    omega: float
    ball_radius: float
    n_samples: int
    fraction_ok: float
    worst_ratio: float
    passed: bool

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"gradient inequality {verdict}: omega={self.omega:.6g}, radius={self.ball_radius:.3g}, "
                f"{self.fraction_ok:.1%} of {self.n_samples} samples, worst |J-J(phi)|^0.5/|J'| "
                f"= {self.worst_ratio:.6g}")


def gradient_ratio(ops: OperatorSet, w: np.ndarray, profile: Profile) -> float:
    """``|J(w) - J(phi)|^(1/2) / |J'(w)|_{H^-1}``; 0 at ``phi``."""
    gap = energy_gap(ops, w, profile)
    _, hneg = residual(ops, w, profile.q, profile)
    if hneg == 0.0:
        return 0.0 if gap == 0.0 else math.inf
    return math.sqrt(abs(gap)) / hneg


def check_gradient_inequality(profile: Profile, spec: Spectrum, ops: OperatorSet, q: float | None = None,
                              omega_factor: float = 1.2, n_samples: int = 500,
                              ball_radius: float | None = None, seed: int = 0) -> GradientReport:
    """Sample ``w = phi + r d`` (``d`` random H^1_0-unit, ``r <= ball_radius``) and test
    ``|J(w)-J(phi)|^(1/2) <= omega |J'(w)|_{H^-1}`` with ``omega = factor * |L^-1|^(1/2) / sqrt 2``."""
    if omega_factor <= 1:
        raise ValueError("omega_factor must exceed 1")
    if ball_radius is None:
        ball_radius = 1e-3 * profile.h1_norm
    norm, _ = op_norm_linv(spec)
    omega = omega_factor * math.sqrt(norm) / math.sqrt(2.0)
    rng = np.random.default_rng(seed)
    E = spec.eigvecs
    worst, ok = 0.0, 0
    for i in range(n_samples):
        if i % 2 == 0 and E is not None:
            d = rng.standard_normal(E.shape[0]) @ E
        else:
            d = rng.standard_normal(ops.n)
        d /= h1_norm(ops, d)
        r = ball_radius * (1.0 - rng.random())
        ratio = gradient_ratio(ops, profile.phi + r * d, profile)
        worst = max(worst, ratio)
        ok += ratio <= omega
    return GradientReport(omega=omega, ball_radius=float(ball_radius), n_samples=n_samples,
                          fraction_ok=ok / n_samples, worst_ratio=worst, passed=ok == n_samples)


def directional_ratios(profile: Profile, spec: Spectrum, ops: OperatorSet, js, r: float):
    """Measured gradient ratios along ``e_j`` and the second-order predictions ``sqrt(mu_j / (2 |nu_j|))``."""
    out = []
    for j in js:
        e = spec.eigvecs[j - 1]
        measured = gradient_ratio(ops, profile.phi + r * e, profile)
        predicted = math.sqrt(spec.mu[j - 1] / (2.0 * abs(spec.nu[j - 1])))
        out.append((j, measured, predicted))
    return out


# -- monotonicity and Taylor checks ------------------------------------------

def tartar_pairing(grid: RadialGrid, v: np.ndarray, phi: np.ndarray, q: float) -> float:
    """``int (B(v) - B(phi)) (v - phi)`` with ``B(x) = |x|^(q-2) x``."""
    v = np.asarray(v, dtype=float)
    phi = np.asarray(phi, dtype=float)
    inc = fn.signed_power(v, q - 1.0) - fn.signed_power(phi, q - 1.0)
    return float(grid.measure_weights @ (inc * (v - phi)))


def hessian_fd_check(ops: OperatorSet, profile: Profile, spec: Spectrum, direction: np.ndarray,
                     eps_values, roundoff: float = 1e-12, order_tol: float = 0.1) -> dict:
    """Second difference of ``J`` at ``phi`` against ``e^T (A - lam_q (q-1) M_w) e``.

    Returns the errors per ``eps``, the fitted order and the order expected from
    the Hoelder continuity of ``J''`` (``min(1, q-2)``); the check passes when
    the observed order is at least the expected one (less ``order_tol``).
    """
    e = np.asarray(direction, dtype=float)
    mw = ops.mass * spec.weight
    exact = ops.energy_inner(e, e) - spec.threshold * float(e @ (mw * e))
    eps = np.asarray(eps_values, dtype=float)
    errs = []
    for h in eps:
        second = (energy_gap(ops, profile.phi + h * e, profile)
                  + energy_gap(ops, profile.phi - h * e, profile)) / h**2
        errs.append(abs(second - exact))
    errs = np.array(errs)
    expected = min(1.0, profile.q - 2.0)
    # errors at roundoff level carry no order information (J is cubic near phi for q = 3)
    good = errs > roundoff * max(1.0, abs(exact))
    if np.count_nonzero(good) >= 2:
        order = float(np.polyfit(np.log(eps[good]), np.log(errs[good]), 1)[0])
    else:
        order = math.inf
    return {"exact": exact, "eps": eps, "errors": errs, "order": order,
            "expected_order": expected, "passed": order >= expected - order_tol}
