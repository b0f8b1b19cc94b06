"""Implicit Euler for the fast diffusion flow and its self-similar rescaling.

Original flow:  ``M (B(u+) - B(u)) = -dt A u+``
Rescaled flow:  ``M (B(v+) - B(v)) = ds (-A v+ + lam_q M B(v+))``

with ``B(x) = |x|^(q-2) x``. Both are solved by damped Newton in the nodal
values; the Jacobian ``c (q-1) M |x|^(q-2) + dt A`` is symmetric positive
definite (``c = 1`` or ``1 - lam_q ds``) and is regularized at ``|x| < 1e-12``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg as sla

from . import diagnostics as dg
from . import functionals as fn
from .discretization import OperatorSet, h1_norm
from .spectrum import Spectrum
from .stationary import Profile

log = logging.getLogger(__name__)

__all__ = [
    "EvolutionConfig",
    "Trajectory",
    "OriginalSample",
    "StepFailure",
    "step_original",
    "run_original",
    "estimate_extinction_time",
    "extinction_fit",
    "extinction_envelope",
    "step_rescaled",
    "run_rescaled",
    "amplitude_bisection",
]

EPS_REG = 1e-12


class StepFailure(RuntimeError):
    """Newton failed even after halving the step down to ``dt_min``."""


@dataclass(frozen=True)
class EvolutionConfig:
    q: float
    dt: float = 1e-2
    dt_min: float = 1e-10
    dt_max: float = 1e-2
    newton_tol: float = 1e-13
    max_newton: int = 30
    horizon: float = 60.0
    blowup_threshold: float | None = None
    extinction_threshold: float | None = None
    # original flow: accepted relative H^1_0 change per step
    rel_change: float = 1e-3
    # rescaled flow: |v - phi| / |phi| at which a run counts as converged
    converge_tol: float = 1e-14

    def __post_init__(self):
        if not 0 < self.dt_min <= self.dt <= self.dt_max:
            raise ValueError("need 0 < dt_min <= dt <= dt_max")
        if (self.blowup_threshold is not None and self.extinction_threshold is not None
                and not 0 < self.extinction_threshold < self.blowup_threshold):
            raise ValueError("need 0 < extinction_threshold < blowup_threshold")
        fn.lambda_q(self.q)


@dataclass(frozen=True)
class OriginalSample:
    t: float
    h1: float
    lq: float
    J: float
    dirichlet: float


@dataclass
class Trajectory:
    samples: list = field(default_factory=list)
    fields: list | None = None
    outcome: str = "horizon"
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        attr = "s" if self.samples and hasattr(self.samples[0], "s") else "t"
        return np.array([getattr(x, attr) for x in self.samples])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(x, name) for x in self.samples])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            if self.samples and isinstance(self.samples[0], OriginalSample):
                fh.write("t,h1,lq,J,dirichlet\n")
                for x in self.samples:
                    fh.write(",".join(repr(float(v)) for v in (x.t, x.h1, x.lq, x.J, x.dirichlet)) + "\n")
                return
            m = len(self.samples[0].sigma) if self.samples else 0
            cols = ["s", "J", "J_minus_Jphi", "entropy", "h1_err", "delta_sup", "hneg_residual"]
            fh.write(",".join(cols + [f"sigma_{j}" for j in range(1, m + 1)]) + "\n")
            for x in self.samples:
                row = [x.s, x.J, x.J_gap, x.entropy, x.h1_err, x.delta_sup, x.hneg_residual, *x.sigma]
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


# -- implicit step -------------------------------------------------------------

def _newton_step(ops: OperatorSet, u: np.ndarray, dt: float, q: float, c: float,
                 cfg: EvolutionConfig) -> np.ndarray | None:
    """Solve ``c M B(x) + dt A x = M B(u)``; ``None`` on failure."""
    mass = ops.mass
    rhs = mass * fn.signed_power(u, q - 1.0)

    def G(x):
        return c * mass * fn.signed_power(x, q - 1.0) + dt * ops.apply_stiffness(x) - rhs

    x = u.copy()
    g = G(x)
    ng = np.linalg.norm(g)
    ab = np.empty((2, ops.n))
    ab[0, 1:] = dt * ops.stiff_off
    ab[0, 0] = 0.0
    cq = c * (q - 1.0) * mass
    for _ in range(cfg.max_newton):
        ab[1] = dt * ops.stiff_diag + cq * np.maximum(np.abs(x), EPS_REG) ** (q - 2.0)
        try:
            dx = sla.solveh_banded(ab, -g, lower=False, check_finite=False)
        except np.linalg.LinAlgError:
            return None
        if np.max(np.abs(dx)) <= cfg.newton_tol * np.max(np.abs(x)):
            return x + dx
        t = 1.0
        while True:
            trial = x + t * dx
            gt = G(trial)
            ngt = np.linalg.norm(gt)
            if ngt < ng:
                break
            t *= 0.5
            if t < 2.0**-30:
                return None
        x, g, ng = trial, gt, ngt
    return None


def _step(ops, u, dt, q, c_of_dt, cfg):
    x = _newton_step(ops, u, dt, q, c_of_dt(dt), cfg)
    if x is not None:
        return x
    half = 0.5 * dt
    if half < cfg.dt_min:
        raise StepFailure(f"Newton failed at dt={dt:.3e} (dt_min={cfg.dt_min:.3e})")
    log.debug("halving step %.3e", dt)
    mid = _step(ops, u, half, q, c_of_dt, cfg)
    return _step(ops, mid, half, q, c_of_dt, cfg)


def step_original(u: np.ndarray, dt: float, cfg: EvolutionConfig, ops: OperatorSet) -> np.ndarray:
    """One implicit Euler step of ``d/dt B(u) = Lap u`` (substeps on Newton failure)."""
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("non-finite field")
    x = _step(ops, u, dt, cfg.q, lambda _: 1.0, cfg)
    if np.all(u >= 0) and np.any(x < 0):
        log.warning("negative values after a step from nonnegative data; clipped")
        x = np.maximum(x, 0.0)
    return x


def step_rescaled(v: np.ndarray, ds: float, cfg: EvolutionConfig, ops: OperatorSet) -> np.ndarray:
    """One implicit Euler step of ``d/ds B(v) = Lap v + lam_q B(v)``."""
    lam = fn.lambda_q(cfg.q)
    if not ds * lam < 1.0:
        raise ValueError(f"rescaled step needs ds < 1/lam_q = {1 / lam:.4g}")
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite field")
    x = _step(ops, v, ds, cfg.q, lambda h: 1.0 - lam * h, cfg)
    if np.all(v >= 0) and np.any(x < 0):
        log.warning("negative values after a step from nonnegative data; clipped")
        x = np.maximum(x, 0.0)
    return x


# -- original flow ---------------------------------------------------------------

def _original_sample(ops, u, t, q):
    dir2 = ops.energy_inner(u, u)
    return OriginalSample(t=float(t), h1=math.sqrt(max(dir2, 0.0)), lq=fn.lq_norm(ops.grid, u, q),
                          J=fn.energy(ops, u, q), dirichlet=0.5 * dir2)


def run_original(u0: np.ndarray, cfg: EvolutionConfig, ops: OperatorSet,
                 store_fields: bool = False) -> Trajectory:
    """Integrate to near extinction with steps adapted to the relative change per step.

    ``J`` is recorded but is not a Lyapunov functional of this flow; the
    Dirichlet energy ``1/2 |grad u|^2`` is, and its monotonicity is tracked.
    """
    u = np.asarray(u0, dtype=float)
    if not np.any(u):
        raise ValueError("initial datum vanishes identically")
    q = cfg.q
    n0 = h1_norm(ops, u)
    stop = cfg.extinction_threshold if cfg.extinction_threshold is not None else 1e-4 * n0
    traj = Trajectory(fields=[] if store_fields else None)
    traj.samples.append(_original_sample(ops, u, 0.0, q))
    if store_fields:
        traj.fields.append(u.copy())
    t, dt = 0.0, cfg.dt
    increases = 0
    while True:
        if traj.samples[-1].h1 < stop:
            traj.outcome = "extinct"
            break
        if t >= cfg.horizon:
            traj.outcome = "horizon"
            break
        dt = min(dt, cfg.horizon - t) if cfg.horizon - t > cfg.dt_min else dt
        x = step_original(u, dt, cfg, ops)
        change = h1_norm(ops, x - u) / traj.samples[-1].h1
        if change > 2.0 * cfg.rel_change and dt > cfg.dt_min:
            dt = max(0.5 * dt, cfg.dt_min)
            continue
        u, t = x, t + dt
        smp = _original_sample(ops, u, t, q)
        if smp.dirichlet > traj.samples[-1].dirichlet * (1 + 1e-12):
            increases += 1
        traj.samples.append(smp)
        if store_fields:
            traj.fields.append(u.copy())
        grow = cfg.rel_change / max(change, 1e-300)
        dt = min(cfg.dt_max, max(cfg.dt_min, dt * min(2.0, max(0.5, grow))))
    traj.meta["dissipation_violations"] = increases
    return traj


def estimate_extinction_time(traj: Trajectory, q: float, decades: float = 1.0) -> tuple[float, float]:
    """Root of the line fitted to ``|u|^(q-2)`` over the final ``decades`` of decay."""
    t = traj.column("t") if isinstance(traj.samples[0], OriginalSample) else traj.times
    nrm = traj.column("h1") if isinstance(traj.samples[0], OriginalSample) else traj.column("h1")
    return extinction_fit(t, nrm, q, decades)


def extinction_fit(t, norms, q: float, decades: float = 1.0) -> tuple[float, float]:
    t = np.asarray(t, dtype=float)
    nrm = np.asarray(norms, dtype=float)
    last = nrm[-1]
    if not nrm[0] > 10 ** decades * last:
        raise ValueError("insufficient decay observed for an extinction fit")
    sel = nrm <= 10 ** decades * last
    if np.count_nonzero(sel) < 10:
        raise ValueError("fewer than 10 samples in the final decade")
    y = nrm[sel] ** (q - 2.0)
    ts = t[sel]
    A = np.vstack([np.ones_like(ts), ts]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    a, b = coef
    if not b < 0:
        raise ValueError("fitted norm is not decreasing")
    resid = y - A @ coef
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / sst if sst > 0 else 1.0
    return float(-a / b), r2


# -- rescaled flow ---------------------------------------------------------------

def _classify(ops, v, profile, J, blowup, extinct_norm):
    nv = h1_norm(ops, v)
    if nv > blowup:
        return "blowup", nv
    if nv < extinct_norm or (J < 0.5 * profile.energy and nv < profile.h1_norm):
        return "extinct", nv
    return None, nv


def run_rescaled(v0: np.ndarray, cfg: EvolutionConfig, ops: OperatorSet, profile: Profile,
                 spec: Spectrum | None = None, record: bool = True,
                 store_fields: bool = False) -> Trajectory:
    """March the rescaled flow with step ``cfg.dt`` until convergence, departure or ``cfg.horizon``.

    Outcomes: ``converged`` (``|v-phi| <= converge_tol |phi|``), ``blowup``
    (``|v| > blowup_threshold``, default ``10 |phi|``), ``extinct`` (energy
    below ``J(phi)/2`` with ``|v| < |phi|``, or ``|v| < extinction_threshold``).
    """
    v = np.asarray(v0, dtype=float).copy()
    q, ds = cfg.q, cfg.dt
    blowup = cfg.blowup_threshold if cfg.blowup_threshold is not None else 10.0 * profile.h1_norm
    extinct_norm = cfg.extinction_threshold if cfg.extinction_threshold is not None else 0.0
    positive = bool(np.all(v > 0))
    traj = Trajectory(fields=[] if store_fields else None)
    meta = traj.meta
    meta.update(dissipation_violations=0, max_energy_increase=0.0, positivity_violations=0)
    s = 0.0
    prev_gap = dg.energy_gap(ops, v, profile)

    def log_state(v, s):
        if record:
            traj.samples.append(dg.sample(ops, v, s, profile, spec))
        if store_fields:
            traj.fields.append(v.copy())

    log_state(v, s)
    while True:
        d = v - profile.phi
        err = math.sqrt(max(ops.energy_inner(d, d), 0.0))
        if err <= cfg.converge_tol * profile.h1_norm:
            traj.outcome = "converged"
            break
        J = fn.energy(ops, v, q)
        outcome, _ = _classify(ops, v, profile, J, blowup, extinct_norm)
        if outcome:
            traj.outcome = outcome
            break
        if s >= cfg.horizon - 1e-12:
            traj.outcome = "horizon"
            break
        v = step_rescaled(v, ds, cfg, ops)
        s += ds
        if record:
            gap = dg.energy_gap(ops, v, profile)
            inc = gap - prev_gap
            if inc > 1e-12 * max(1.0, abs(profile.energy)):
                meta["dissipation_violations"] += 1
            meta["max_energy_increase"] = max(meta["max_energy_increase"], inc)
            prev_gap = gap
        if positive and np.any(v <= 0):
            meta["positivity_violations"] += 1
        log_state(v, s)
    meta["s_final"] = s
    return traj


def amplitude_bisection(shape: np.ndarray, cfg: EvolutionConfig, ops: OperatorSet, profile: Profile,
                        spec: Spectrum | None = None, rel_tol: float = 1e-12,
                        factor: float = 1.1, max_expand: int = 40) -> tuple[float, Trajectory]:
    """Bisect ``theta`` in ``v0 = theta * shape`` between extinction and blow-up.

    Returns ``theta*`` and the recorded trajectory started from it, which
    shadows ``phi`` for a long ``s`` window before departing.
    """
    shape = np.asarray(shape, dtype=float)
    if not np.any(shape):
        raise ValueError("shape vanishes identically")
    theta0 = profile.h1_norm / h1_norm(ops, shape)
    cache: dict[float, str] = {}

    def fate(theta):
        if theta not in cache:
            cache[theta] = run_rescaled(theta * shape, cfg, ops, profile, record=False).outcome
        return cache[theta]

    f0 = fate(theta0)
    if f0 in ("converged", "horizon"):
        return theta0, run_rescaled(theta0 * shape, cfg, ops, profile, spec)
    lo = hi = theta0
    for _ in range(max_expand):
        if fate(lo) == "extinct":
            break
        lo /= factor
    else:
        raise ValueError("no extinct amplitude found below the initial guess")
    for _ in range(max_expand):
        if fate(hi) == "blowup":
            break
        hi *= factor
    else:
        raise ValueError("no blow-up amplitude found above the initial guess")
    while (hi - lo) > rel_tol * 0.5 * (hi + lo):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        f = fate(mid)
        if f == "extinct":
            lo = mid
        elif f == "blowup":
            hi = mid
        else:
            lo = hi = mid
            break
    theta = 0.5 * (lo + hi)
    traj = run_rescaled(theta * shape, cfg, ops, profile, spec)
    traj.meta["bracket"] = (lo, hi)
    traj.meta["runs"] = len(cache)
    return theta, traj


def with_overrides(cfg: EvolutionConfig, **kw) -> EvolutionConfig:
    return replace(cfg, **kw)


def extinction_envelope(traj: Trajectory, t_star: float, q: float,
                        decades: float = 2.0) -> tuple[float, float]:
    """Range of ``|u(t)| / (t_* - t)^(1/(q-2))`` over the final ``decades`` of decay."""
    t = traj.column("t")
    nrm = traj.column("h1")
    sel = (nrm <= 10 ** decades * nrm[-1]) & (t < t_star)
    if np.count_nonzero(sel) < 2:
        raise ValueError("too few samples before the extinction time")
    ratio = nrm[sel] / (t_star - t[sel]) ** (1.0 / (q - 2.0))
    return float(ratio.min()), float(ratio.max())
