"""Command-line front end: ``fastdiff {profile,spectrum,evolve,rescaled,bisect,verify,gradcheck}``.

Configuration is a flat ``key = value`` file whose keys are exactly the fields of
:class:`ExperimentConfig`; every key can also be given as a ``--key`` flag,
which wins over the file. Each command writes into ``<output_dir>/<command>/``.

Exit status: 0 pass, 1 configuration error, 2 tolerance failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import experiments as ex
from .discretization import h1_norm
from .evolution import EvolutionConfig, StepFailure, amplitude_bisection, run_rescaled
from .functionals import check_exponent
from .spectrum import (DegenerateProfile, op_norm_linv, profile_bound, spectral_gap,
                       spectrum_from_values, admissible_rate_bound, write_spectrum_csv)
from .stationary import ConvergenceError, write_profile_csv

log = logging.getLogger("fastdiff")

EXIT_OK, EXIT_CONFIG, EXIT_TOLERANCE, EXIT_NUMERICAL = 0, 1, 2, 3

MU1_TOL = 1e-6
BAND_MAX = 3.0
T_STAR_TOL = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    # problem
    q: float = 3.0
    dim: int = 1
    radius: float = 1.0
    n_grid: int = 400
    m_eigs: int = 12
    nodes: int = 0
    # time stepping (shared by both flows)
    dt: float = 1e-2
    dt_min: float = 1e-10
    dt_max: float = 1e-2
    newton_tol: float = 1e-13
    max_newton: int = 30
    horizon: float = 60.0
    blowup_threshold: float | None = None
    extinction_threshold: float | None = None
    rel_change: float = 1e-3
    converge_tol: float = 1e-14
    # initial data
    perturb_mode: str = "k"
    perturb_seed: int = 0
    perturb_amplitude: float = 1e-2
    theta: float = 1.0
    initial: str = "generic"
    extinction_T: float = 1.0
    # gradient inequality
    omega_factor: float = 1.2
    n_samples: int = 500
    ball_radius_rel: float = 1e-3
    # output
    output_dir: str = "runs"

    def __post_init__(self):
        check_exponent(self.q, self.dim)
        if self.dim < 1 or self.n_grid < 3 or self.m_eigs < 1 or self.nodes < 0:
            raise ValueError("need dim >= 1, n_grid >= 3, m_eigs >= 1, nodes >= 0")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.perturb_mode not in ("k", "random") and not self.perturb_mode.isdigit():
            raise ValueError("perturb_mode must be 'k', 'random' or a mode index")
        if self.initial not in ("generic", "separable"):
            raise ValueError("initial must be 'generic' or 'separable'")
        if not (self.theta > 0 and self.extinction_T > 0 and self.ball_radius_rel > 0):
            raise ValueError("theta, extinction_T and ball_radius_rel must be positive")
        self.evolution()

    def evolution(self) -> EvolutionConfig:
        names = {f.name for f in dataclasses.fields(EvolutionConfig)}
        return EvolutionConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    @property
    def mode(self) -> str | int:
        return self.perturb_mode if self.perturb_mode in ("k", "random") else int(self.perturb_mode)


_TYPES = typing.get_type_hints(ExperimentConfig)


def _parse_value(key: str, text: str):
    tp = _TYPES[key]
    text = text.strip()
    optional = type(None) in typing.get_args(tp)
    if optional:
        if text.lower() == "none":
            return None
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown or repeated keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n"
                   for f in dataclasses.fields(cfg))


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig(**parse_config(Path(path).read_text()))


# -- output helpers ----------------------------------------------------------------

def _run_dir(cfg: ExperimentConfig, command: str) -> Path:
    d = Path(cfg.output_dir) / command
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.txt").write_text(dump_config(cfg))
    return d


def _write_summary(path: Path, summary: dict) -> None:
    path.write_text(_json(summary) + "\n")


def _json(obj) -> str:
    # numpy scalars -> Python scalars; floats keep shortest round-trip repr
    return json.dumps(obj, indent=2, sort_keys=True,
                      default=lambda o: o.item() if isinstance(o, np.generic) else str(o))


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage {stage}: {type(exc).__name__}: {exc}")
        self.stage, self.exc = stage, exc


_NUMERICAL = (ConvergenceError, StepFailure, DegenerateProfile, np.linalg.LinAlgError, ValueError)


def _stage(name: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except _NUMERICAL as exc:
        raise StageError(name, exc) from exc


def _setup(cfg: ExperimentConfig, with_spectrum: bool) -> ex.Setup:
    setup = _stage("profile", ex.build_setup, cfg.q, cfg.dim, cfg.radius, cfg.n_grid, nodes=cfg.nodes)
    if with_spectrum:
        from .spectrum import solve_weighted_eigs
        spec = _stage("spectrum", solve_weighted_eigs, setup.ops, setup.profile, cfg.m_eigs)
        setup = dataclasses.replace(setup, spec=spec)
    return setup


def _profile_summary(setup: ex.Setup) -> dict:
    p = setup.profile
    return {"q": p.q, "lambda_q": p.lambda_q, "dim": setup.grid.dim, "radius": setup.grid.radius,
            "n_grid": setup.grid.n, "J": p.energy, "lq_norm": p.lq_norm, "h1_norm": p.h1_norm,
            "C_q": p.sobolev_c, "sign_changing": p.sign_changing, "amplitude": float(np.max(np.abs(p.phi))),
            "nehari_defect": p.nehari_defect(), "newton_residual": p.newton_residual}


def _print_checks(checks: dict[str, bool]) -> None:
    for name, ok in checks.items():
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}")


# -- commands ----------------------------------------------------------------------

def cmd_profile(cfg: ExperimentConfig) -> int:
    setup = _setup(cfg, with_spectrum=False)
    out = _run_dir(cfg, "profile")
    write_profile_csv(out / "profile.csv", setup.profile)
    summary = _profile_summary(setup)
    _write_summary(out / "summary.json", summary)
    print(_json(summary))
    return EXIT_OK


def _spectrum_summary(spec, lam_max, checks) -> dict:
    k, lambda0 = spectral_gap(spec)
    norm, j_max = op_norm_linv(spec)
    return {"mu": [float(x) for x in spec.mu], "k": k, "lambda0": lambda0, "opnorm_linv": norm,
            "opnorm_index": j_max, "lambda_max": lam_max,
            "nondegeneracy_margin": spec.nondegeneracy_margin, "checks": checks}


def cmd_spectrum(cfg: ExperimentConfig, mu_values: list[float] | None = None) -> int:
    out = _run_dir(cfg, "spectrum")
    if mu_values is not None:
        spec = spectrum_from_values(mu_values, cfg.q)
        _stage("spectrum", spectral_gap, spec)
        lam_max = _stage("bound", admissible_rate_bound, spec)
        checks = {}
    else:
        setup = _setup(cfg, with_spectrum=True)
        spec, p = setup.spec, setup.profile
        _stage("spectrum", spectral_gap, spec)
        lam_max = _stage("bound", profile_bound, p, spec) if not p.sign_changing else None
        checks = {}
        if not p.sign_changing:
            checks["mu_1 = lambda_q"] = abs(spec.mu[0] - p.lambda_q) <= MU1_TOL * p.lambda_q
            checks["lambda_max <= lambda0"] = lam_max <= spec.lambda0
    write_spectrum_csv(out / "spectrum.csv", spec)
    summary = _spectrum_summary(spec, lam_max, checks)
    _write_summary(out / "summary.json", summary)
    print(_json({k: v for k, v in summary.items() if k != "mu"}))
    _print_checks(checks)
    return EXIT_OK if all(checks.values()) else EXIT_TOLERANCE


def cmd_evolve(cfg: ExperimentConfig) -> int:
    setup = _setup(cfg, with_spectrum=False)
    if cfg.initial == "separable":
        u0 = ex.separable_datum(setup.profile, cfg.extinction_T)
    else:
        base = ex.generic_datum(setup.grid)
        u0 = base * (setup.profile.h1_norm / h1_norm(setup.ops, base))
    res = _stage("evolve", ex.extinction_experiment, u0, cfg.evolution(), setup.ops)
    out = _run_dir(cfg, "evolve")
    res.traj.write_csv(out / "trajectory.csv")
    checks = {"envelope band <= 3": res.band <= BAND_MAX,
              "Dirichlet energy nonincreasing": res.traj.meta["dissipation_violations"] == 0}
    summary = {"initial": cfg.initial, "t_star": res.t_star, "fit_quality": res.fit_quality,
               "envelope": list(res.envelope), "band": res.band, "samples": len(res.traj.samples)}
    if cfg.initial == "separable":
        summary["t_star_error"] = abs(res.t_star - cfg.extinction_T)
        checks["t_star = T within 1e-3"] = summary["t_star_error"] <= T_STAR_TOL
    summary["checks"] = checks
    _write_summary(out / "summary.json", summary)
    print(_json({k: v for k, v in summary.items() if k != "checks"}))
    _print_checks(checks)
    return EXIT_OK if all(checks.values()) else EXIT_TOLERANCE


def _shape(cfg: ExperimentConfig, setup: ex.Setup) -> tuple[np.ndarray, str]:
    d, label = _stage("perturbation", ex.perturbation_direction, setup, cfg.mode, cfg.perturb_seed)
    return setup.profile.phi + cfg.perturb_amplitude * d, label


def _trajectory_summary(traj) -> dict:
    meta = {k: (list(v) if isinstance(v, tuple) else v) for k, v in traj.meta.items()}
    return {"outcome": traj.outcome, "samples": len(traj.samples), **meta}


def cmd_rescaled(cfg: ExperimentConfig) -> int:
    setup = _setup(cfg, with_spectrum=True)
    shape, label = _shape(cfg, setup)
    traj = _stage("rescaled", run_rescaled, cfg.theta * shape, cfg.evolution(), setup.ops,
                  setup.profile, setup.spec)
    out = _run_dir(cfg, "rescaled")
    traj.write_csv(out / "trajectory.csv")
    summary = {"direction": label, "theta": cfg.theta, **_trajectory_summary(traj)}
    _write_summary(out / "summary.json", summary)
    print(_json(summary))
    return EXIT_OK


def cmd_bisect(cfg: ExperimentConfig) -> int:
    setup = _setup(cfg, with_spectrum=True)
    shape, label = _shape(cfg, setup)
    theta, traj = _stage("bisection", amplitude_bisection, shape, cfg.evolution(), setup.ops,
                         setup.profile, setup.spec)
    out = _run_dir(cfg, "bisect")
    traj.write_csv(out / "trajectory.csv")
    summary = {"direction": label, "theta_star": theta, **_trajectory_summary(traj)}
    _write_summary(out / "summary.json", summary)
    print(_json(summary))
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig) -> int:
    setup = _setup(cfg, with_spectrum=True)
    _stage("spectrum", spectral_gap, setup.spec)
    res = _stage("rates", ex.sharp_rate_experiment, setup, cfg.evolution(), cfg.mode,
                 cfg.perturb_seed, cfg.perturb_amplitude)
    out = _run_dir(cfg, "verify")
    write_profile_csv(out / "profile.csv", setup.profile)
    write_spectrum_csv(out / "spectrum.csv", setup.spec)
    res.traj.write_csv(out / "trajectory.csv")
    ex.write_rate_csv(out / "rates.csv", res.rows)
    summary = {"direction": res.direction, "theta_star": res.theta, "lambda0": res.lambda0,
               "lambda_max": res.lambda_max, "window": list(res.window), "checks": res.checks,
               "passed": res.passed, **_trajectory_summary(res.traj)}
    _write_summary(out / "summary.json", summary)
    print(f"direction {res.direction}, theta* = {res.theta!r}, lambda0 = {res.lambda0:.6f}, "
          f"lambda_max = {res.lambda_max:.6f}")
    print(ex.format_rate_table(res.rows))
    _print_checks(res.checks)
    print("VERIFY", "PASS" if res.passed else "FAIL")
    return EXIT_OK if res.passed else EXIT_TOLERANCE


def cmd_gradcheck(cfg: ExperimentConfig) -> int:
    setup = _setup(cfg, with_spectrum=True)
    res = _stage("gradient", ex.gradient_experiment, setup, cfg.omega_factor, cfg.n_samples,
                 cfg.ball_radius_rel, cfg.perturb_seed)
    out = _run_dir(cfg, "gradcheck")
    with open(out / "directional.csv", "w", newline="\n") as fh:
        fh.write("j,measured,predicted\n")
        for j, m, p in res.directional:
            fh.write(f"{j},{float(m)!r},{float(p)!r}\n")
    r = res.report
    summary = {"omega": r.omega, "ball_radius": r.ball_radius, "n_samples": r.n_samples,
               "fraction_ok": r.fraction_ok, "worst_ratio": r.worst_ratio, "passed": r.passed,
               "directional_ok": res.directional_ok}
    _write_summary(out / "summary.json", summary)
    print(r.summary())
    for j, m, p in res.directional:
        print(f"  e_{j}: measured {m:.6g}, predicted {p:.6g}")
    return EXIT_OK if res.passed else EXIT_TOLERANCE


COMMANDS = {
    "profile": cmd_profile,
    "spectrum": cmd_spectrum,
    "evolve": cmd_evolve,
    "rescaled": cmd_rescaled,
    "bisect": cmd_bisect,
    "verify": cmd_verify,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file")
        for f in dataclasses.fields(ExperimentConfig):
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, metavar="VALUE", default=None)
        if name == "spectrum":
            p.add_argument("--mu", help="comma-separated synthetic eigenvalues (skips the solve)")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    values = parse_config(Path(args.config).read_text()) if args.config else {}
    for f in dataclasses.fields(ExperimentConfig):
        flag = getattr(args, f.name)
        if flag is not None:
            values[f.name] = _parse_value(f.name, flag)
    return ExperimentConfig(**values)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except (ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "spectrum" and args.mu:
            return cmd_spectrum(cfg, [float(x) for x in args.mu.split(",")])
        return COMMANDS[args.command](cfg)
    except StageError as exc:
        print(f"numerical failure in {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
