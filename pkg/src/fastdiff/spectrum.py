"""Weighted eigenproblem ``A e = mu M_w e`` with ``M_w = M |phi|^(q-2)`` and the rate constants.

Eigenvectors are normalized in the discrete H^1_0 inner product ``e^T A e = 1``.
With ``nu_j = mu_j - lam_q (q-1)`` the linearization ``L = A - lam_q (q-1) M_w``
acts diagonally: ``e_i^T L e_j = (nu_j / mu_j) delta_ij``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .discretization import OperatorSet
from .stationary import ConvergenceError, Profile

log = logging.getLogger(__name__)

__all__ = [
    "Spectrum",
    "DegenerateProfile",
    "TruncationWarning",
    "solve_weighted_eigs",
    "spectrum_from_values",
    "spectral_gap",
    "op_norm_linv",
    "admissible_rate_bound",
    "profile_bound",
    "solve_linearized",
    "linearized_operator",
    "write_spectrum_csv",
]

DEGENERACY_TOL = 1e-6
DEFAULT_M = 12
ZERO_WEIGHT = 1e-12


class DegenerateProfile(ValueError):
    """Some weighted eigenvalue coincides with ``lam_q (q-1)``."""


class TruncationWarning(UserWarning):
    """A max/min over the computed spectrum is attained at its last index."""


@dataclass(frozen=True, eq=False)
class Spectrum:
    q: float
    mu: np.ndarray
    eigvecs: np.ndarray | None  # shape (m, n), rows H^1_0-normalized
    weight: np.ndarray | None   # diagonal of M_w

    @property
    def m(self) -> int:
        return len(self.mu)

    @property
    def lambda_q(self) -> float:
        return (self.q - 1.0) / (self.q - 2.0)

    @property
    def threshold(self) -> float:
        """``lam_q (q-1)``, the eigenvalue a degenerate profile would carry."""
        return self.lambda_q * (self.q - 1.0)

    @property
    def nu(self) -> np.ndarray:
        return self.mu - self.threshold

    @property
    def nondegeneracy_margin(self) -> float:
        return float(np.min(np.abs(self.nu)))

    @property
    def k(self) -> int:
        above = np.nonzero(self.nu > 0)[0]
        if above.size == 0:
            raise ValueError("no computed eigenvalue exceeds lam_q (q-1); increase m")
        return int(above[0]) + 1

    @property
    def lambda0(self) -> float:
        return 2.0 / (self.q - 1.0) * float(self.nu[self.k - 1])

    @property
    def opnorm_linv(self) -> float:
        return float(np.max(np.abs(self.mu / self.nu)))


def spectrum_from_values(mu, q: float) -> Spectrum:
    """Spectrum carrying eigenvalues only (for tables and synthetic checks)."""
    return Spectrum(q=float(q), mu=np.asarray(mu, dtype=float), eigvecs=None, weight=None)


def _inverse_iteration(ops: OperatorSet, weight: np.ndarray, mu0: float, x: np.ndarray,
                       basis: list[np.ndarray], steps: int = 3) -> tuple[float, np.ndarray]:
    """Shift-invert refinement of one pair, deflated against converged vectors."""
    n = ops.n
    mw = ops.mass * weight
    ab = np.zeros((3, n))
    ab[0, 1:] = ops.stiff_off
    ab[2, :-1] = ops.stiff_off
    # shift slightly off the estimate so the solve stays well posed
    sigma = mu0 * (1.0 - 1e-9) if mu0 != 0 else -1e-9
    ab[1] = ops.stiff_diag - sigma * mw
    lu = sla.solve_banded
    for _ in range(steps):
        x = lu((1, 1), ab, mw * x)
        for b in basis:
            x = x - ops.energy_inner(b, x) * b
        x = x / math.sqrt(ops.energy_inner(x, x))
    mu = 1.0 / float(x @ (mw * x))
    return mu, x


def _reduced_pencil(diag: np.ndarray, off: np.ndarray, zero: np.ndarray):
    """Eliminate nodes with zero weight from the tridiagonal ``A`` by Schur complement.

    A zero-weight node carries no mass, so its eigen-equation row reads
    ``(A e)_i = 0``; isolated nodes eliminate to a tridiagonal matrix on the rest.
    """
    d, o = diag.copy(), off.copy()
    idx = np.nonzero(zero)[0]
    if np.any(np.diff(idx) == 1):
        raise ValueError("weight vanishes at adjacent nodes")
    keep = ~zero
    new_off = o.copy()
    for i in idx:
        if i > 0:
            d[i - 1] -= o[i - 1] ** 2 / diag[i]
        if i < len(diag) - 1:
            d[i + 1] -= o[i] ** 2 / diag[i]
        if 0 < i < len(diag) - 1:
            new_off[i - 1] = -o[i - 1] * o[i] / diag[i]
    kept = np.nonzero(keep)[0]
    # off-diagonal between consecutive kept nodes: direct coupling or the bridged one
    bridge = np.array([o[a] if b == a + 1 else new_off[a] for a, b in zip(kept[:-1], kept[1:])])
    return d[keep], bridge, kept


def solve_weighted_eigs(ops: OperatorSet, profile: Profile, m: int = DEFAULT_M) -> Spectrum:
    n = ops.n
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    q = profile.q
    weight = np.abs(profile.phi) ** (q - 2.0)
    if not np.any(weight > 0):
        raise ValueError("weight |phi|^(q-2) vanishes identically")
    # nodal zeros of a sign-changing profile: treat as exact zeros of the weight
    zero = weight <= ZERO_WEIGHT * weight.max()
    weight[zero] = 0.0
    if m > n - np.count_nonzero(zero):
        raise ValueError("m exceeds the number of finite eigenvalues")
    mw = ops.mass * weight
    diag, off, kept = _reduced_pencil(ops.stiff_diag, ops.stiff_off, zero)
    d = 1.0 / np.sqrt(mw[kept])
    vals, vecs = sla.eigh_tridiagonal(diag * d * d, off * d[:-1] * d[1:],
                                      select="i", select_range=(0, m - 1))
    full = np.zeros((n, m))
    full[kept] = d[:, None] * vecs
    for i in np.nonzero(zero)[0]:
        acc = 0.0
        if i > 0:
            acc += ops.stiff_off[i - 1] * full[i - 1]
        if i < n - 1:
            acc = acc + ops.stiff_off[i] * full[i + 1]
        full[i] = -acc / ops.stiff_diag[i]
    mus, rows = [], []
    for j in range(m):
        x0 = full[:, j]
        mu, x = _inverse_iteration(ops, weight, float(vals[j]), x0, rows)
        rows.append(x)
        mus.append(mu)
    mu = np.array(mus)
    E = np.array(rows)
    if E.size and E[0].sum() < 0:
        E[0] = -E[0]
    res = max(np.linalg.norm(ops.apply_stiffness(e) - mu_j * mw * e) for e, mu_j in zip(E, mu))
    if not np.isfinite(res) or res > 1e-8:
        raise ConvergenceError(f"eigen-residual {res:.3e} above tolerance")
    return Spectrum(q=q, mu=mu, eigvecs=E, weight=weight)


def spectral_gap(spec: Spectrum, q: float | None = None) -> tuple[int, float]:
    """Index ``k`` of the first eigenvalue above ``lam_q (q-1)`` and ``lambda0``."""
    if q is not None and q != spec.q:
        spec = spectrum_from_values(spec.mu, q)
    margin = spec.nondegeneracy_margin
    if margin <= DEGENERACY_TOL:
        j = int(np.argmin(np.abs(spec.nu))) + 1
        raise DegenerateProfile(
            f"|nu_{j}| = {margin:.3e} <= {DEGENERACY_TOL:g}: linearization has a (near) kernel")
    return spec.k, spec.lambda0


def op_norm_linv(spec: Spectrum) -> tuple[float, int]:
    """``max_j |mu_j / nu_j|`` and its (1-based) maximizing index."""
    spectral_gap(spec)
    ratio = np.abs(spec.mu / spec.nu)
    j = int(np.argmax(ratio))
    if j == spec.m - 1 and spec.m > 1:
        warnings.warn("operator-norm maximizer is the last computed eigenvalue; increase m",
                      TruncationWarning, stacklevel=2)
    return float(ratio[j]), j + 1


def admissible_rate_bound(spec: Spectrum, q: float | None = None, *, sobolev_c: float | None = None,
                  lq_norm: float | None = None, least_energy: bool = True) -> float:
    """Admissible-rate bound ``2/(q-1) C_q^-2 |phi|_q^-(q-2) min_j |nu_j/mu_j|``.

    For the least-energy profile ``C_q^-2 |phi|_q^-(q-2) = lam_q`` and the
    simplified form is used; when ``sobolev_c``/``lq_norm`` are supplied both
    forms are computed and required to agree.
    """
    if q is not None and q != spec.q:
        spec = spectrum_from_values(spec.mu, q)
    q = spec.q
    spectral_gap(spec)
    mins = float(np.min(np.abs(spec.nu / spec.mu)))
    simplified = 2.0 * spec.lambda_q / (q - 1.0) * mins
    if sobolev_c is None or lq_norm is None:
        if not least_energy:
            raise ValueError("sign-changing profiles need an explicit Sobolev constant")
        return simplified
    full = 2.0 / (q - 1.0) * sobolev_c**-2 * lq_norm ** (-(q - 2.0)) * mins
    if least_energy and abs(full - simplified) > 1e-8 * simplified:
        raise ConvergenceError(f"bound forms disagree: {full!r} vs {simplified!r}")
    return full


def profile_bound(profile: Profile, spec: Spectrum) -> float:
    """Bound evaluated from a computed profile."""
    if profile.sign_changing:
        raise ValueError("pass the Sobolev constant explicitly for sign-changing profiles")
    return admissible_rate_bound(spec, sobolev_c=profile.sobolev_c, lq_norm=profile.lq_norm)


def linearized_operator(ops: OperatorSet, spec: Spectrum):
    """Matrix-vector map ``w -> A w - lam_q (q-1) M_w w``."""
    mw = ops.mass * spec.weight
    c = spec.threshold

    def apply(w):
        return ops.apply_stiffness(w) - c * mw * w

    return apply


def solve_linearized(ops: OperatorSet, spec: Spectrum, f: np.ndarray) -> np.ndarray:
    """``L^{-1} f`` by a banded solve."""
    ab = np.zeros((3, ops.n))
    ab[0, 1:] = ops.stiff_off
    ab[1] = ops.stiff_diag - spec.threshold * ops.mass * spec.weight
    ab[2, :-1] = ops.stiff_off
    return sla.solve_banded((1, 1), ab, f)


def write_spectrum_csv(path, spec: Spectrum) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("j,mu,nu,mu_over_nu\n")
        for j, (mu, nu) in enumerate(zip(spec.mu, spec.nu), start=1):
            fh.write(f"{j},{float(mu)!r},{float(nu)!r},{float(mu / nu)!r}\n")
