"""Pointwise nonlinearities and the energy functional.

The energy is ``J(w) = 1/2 |grad w|^2 - (lam_q/q) |w|_q^q`` with ``lam_q = (q-1)/(q-2)``.
Differences near a reference profile are evaluated through relative powers
``(1 + t)^p - 1`` so that gaps far below ``eps * J`` remain meaningful.
"""

from __future__ import annotations

import numpy as np
from scipy.special import binom

from .discretization import OperatorSet, RadialGrid

_SERIES_T = 1e-2
_SERIES_TERMS = 12


def lambda_q(q: float) -> float:
    if not q > 2:
        raise ValueError(f"exponent q must exceed 2, got {q!r}")
    return (q - 1.0) / (q - 2.0)


def critical_exponent(dim: int) -> float:
    """Sobolev exponent 2N/(N-2), infinite for N <= 2."""
    return np.inf if dim <= 2 else 2.0 * dim / (dim - 2.0)


def check_exponent(q: float, dim: int) -> None:
    if not 2 < q < critical_exponent(dim):
        raise ValueError(f"q={q} outside the subcritical range (2, {critical_exponent(dim)}) for N={dim}")


def signed_power(w: np.ndarray, p: float) -> np.ndarray:
    """``|w|^(p-1) w``; with ``p = q - 1`` this is the map ``|w|^(q-2) w``."""
    return np.abs(w) ** (p - 1.0) * w


def lq_power(grid: RadialGrid, w: np.ndarray, q: float) -> float:
    """``|w|_q^q`` by the lumped quadrature."""
    return float(grid.measure_weights @ np.abs(w) ** q)


def lq_norm(grid: RadialGrid, w: np.ndarray, q: float) -> float:
    return lq_power(grid, w, q) ** (1.0 / q)


def energy(ops: OperatorSet, w: np.ndarray, q: float) -> float:
    w = np.asarray(w, dtype=float)
    return 0.5 * ops.energy_inner(w, w) - lambda_q(q) / q * lq_power(ops.grid, w, q)


def _rel_pow(t: np.ndarray, p: float) -> np.ndarray:
    """``(1 + t)^p - 1`` for ``t > -1``."""
    return np.expm1(p * np.log1p(t))


def _rel_pow2(t: np.ndarray, p: float) -> np.ndarray:
    """``(1 + t)^p - 1 - p t`` for ``t > -1``, by series when ``|t|`` is small."""
    out = np.expm1(p * np.log1p(t)) - p * t
    small = np.abs(t) < _SERIES_T
    if np.any(small):
        ts = t[small]
        acc = np.zeros_like(ts)
        tk = ts * ts
        for k in range(2, _SERIES_TERMS + 1):
            acc += binom(p, k) * tk
            tk = tk * ts
        out[small] = acc
    return out


def _split(ref: np.ndarray, d: np.ndarray):
    """Nodes where ``ref + d`` keeps the sign of a nonzero ``ref``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(ref != 0.0, d / np.where(ref != 0.0, ref, 1.0), np.inf)
    ok = t > -1.0
    ok &= np.isfinite(t)
    return t, ok


def nonlinearity_increment(ref: np.ndarray, d: np.ndarray, q: float) -> np.ndarray:
    """``B(ref + d) - B(ref)`` with ``B(x) = |x|^(q-2) x``."""
    t, ok = _split(ref, d)
    out = np.empty_like(d)
    out[ok] = signed_power(ref[ok], q - 1.0) * _rel_pow(t[ok], q - 1.0)
    bad = ~ok
    out[bad] = signed_power(ref[bad] + d[bad], q - 1.0) - signed_power(ref[bad], q - 1.0)
    return out


def power_bregman(ref: np.ndarray, d: np.ndarray, q: float) -> np.ndarray:
    """``|ref + d|^q - |ref|^q - q B(ref) d`` nodewise (nonnegative)."""
    t, ok = _split(ref, d)
    out = np.empty_like(d)
    out[ok] = np.abs(ref[ok]) ** q * _rel_pow2(t[ok], q)
    bad = ~ok
    w = ref[bad] + d[bad]
    out[bad] = np.abs(w) ** q - np.abs(ref[bad]) ** q - q * signed_power(ref[bad], q - 1.0) * d[bad]
    return out


def stationary_residual(ops: OperatorSet, w: np.ndarray, q: float) -> np.ndarray:
    """Load vector ``A w - lam_q M B(w)``; the discrete ``J'(w)``."""
    return ops.apply_stiffness(w) - lambda_q(q) * ops.mass * signed_power(w, q - 1.0)


def residual_about(ops: OperatorSet, w: np.ndarray, ref: np.ndarray, q: float,
                   ref_residual: np.ndarray | None = None) -> np.ndarray:
    """``J'(w)`` assembled as ``J'(ref) + A d - lam_q M (B(w) - B(ref))``."""
    d = w - ref
    if ref_residual is None:
        ref_residual = stationary_residual(ops, ref, q)
    inc = nonlinearity_increment(ref, d, q)
    return ref_residual + ops.apply_stiffness(d) - lambda_q(q) * ops.mass * inc


def energy_gap_about(ops: OperatorSet, w: np.ndarray, ref: np.ndarray, q: float,
                     ref_residual: np.ndarray | None = None) -> float:
    """``J(w) - J(ref)`` without cancellation against ``J(ref)``."""
    d = np.asarray(w, dtype=float) - ref
    if ref_residual is None:
        ref_residual = stationary_residual(ops, ref, q)
    breg = power_bregman(ref, d, q)
    return (0.5 * ops.energy_inner(d, d) + float(ref_residual @ d)
            - lambda_q(q) / q * float(ops.mass @ breg))
