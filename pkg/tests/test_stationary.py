import math

import numpy as np
import pytest
from scipy.integrate import quad

from fastdiff import functionals as fn
from fastdiff.discretization import assemble_operators, build_grid, h1_norm
from fastdiff.stationary import (oracle_profile_norms, quadrature_oracle_profile, sign_changing_profile,
                                 sobolev_constant, solve_positive_profile, write_profile_csv)


def _euclidean_residual(ops, p):
    r = fn.stationary_residual(ops, p.phi, p.q)
    return np.linalg.norm(r) / np.linalg.norm(ops.apply_stiffness(p.phi))


def test_lambda_q(q3):
    assert q3.profile.lambda_q == 2.0


def test_amplitude_matches_oracle(q3_fine):
    amp, _ = quadrature_oracle_profile(3.0, 1.0, 1e-12)
    assert abs(q3_fine.profile.phi.max() - amp) <= 1e-6 * amp


@pytest.mark.parametrize("dim,q,n", [(1, 3.0, 2000), (1, 2.5, 800), (1, 5.0, 500), (2, 3.0, 500),
                                     (2, 6.0, 300), (3, 4.0, 400), (3, 5.5, 300), (4, 3.5, 300)])
def test_profile_invariants(dim, q, n):
    g = build_grid(dim, 1.0, n)
    ops = assemble_operators(g)
    p = solve_positive_profile(g, ops, q)
    assert np.all(p.phi > 0)
    assert _euclidean_residual(ops, p) <= 1e-10
    assert p.nehari_defect() <= 1e-8
    # energy identity J = lam_q (q-2) / (2q) |phi|_q^q
    expected = p.lambda_q * (q - 2) / (2 * q) * fn.lq_power(g, p.phi, q)
    assert abs(p.energy - expected) <= 1e-8 * expected


def test_rejects_supercritical():
    g = build_grid(3, 1.0, 50)
    with pytest.raises(ValueError):
        solve_positive_profile(g, assemble_operators(g), 6.5)


def test_oracle_self_consistency():
    q, R, tol = 3.0, 1.0, 1e-10
    amp, sampler = quadrature_oracle_profile(q, R, tol)
    lam = (q - 1) / (q - 2)
    half, _ = quad(lambda p: 1.0 / math.sqrt(2 * lam / q * (amp**q - p**q)), 0.0, amp,
                   epsabs=1e-13, epsrel=1e-13, limit=200)
    assert abs(half - R / 2) <= tol
    assert sampler(0.0) == pytest.approx(amp, rel=1e-14)
    xs = np.linspace(0.0, 0.5, 11)
    assert np.allclose([sampler(x) for x in xs], [sampler(-x) for x in xs], rtol=0, atol=tol)
    assert abs(sampler(R / 2)) <= 1e-8


def test_oracle_amplitude_decreasing_and_scaling():
    q = 3.0
    amps = [quadrature_oracle_profile(q, R, 1e-12)[0] for R in (0.5, 1.0, 2.0)]
    assert amps[0] > amps[1] > amps[2]
    # phi_R(x) = R^(-2/(q-2)) phi_1(x/R)
    for R, a in zip((0.5, 1.0, 2.0), amps):
        assert a == pytest.approx(R ** (-2.0 / (q - 2.0)) * amps[1], rel=1e-9)


def test_profile_second_order_against_oracle():
    q = 3.0
    amp, sampler = quadrature_oracle_profile(q, 1.0, 1e-13)
    errs = []
    for n in (199, 399, 799):
        g = build_grid(1, 1.0, n)
        p = solve_positive_profile(g, assemble_operators(g), q)
        exact = np.array([sampler(x - 0.5) for x in g.nodes])
        errs.append(np.max(np.abs(p.phi - exact)) / amp)
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(orders - 2.0) < 0.1)


def test_energy_and_sobolev_against_oracle(q3_fine):
    ref = oracle_profile_norms(3.0, 1.0)
    p = q3_fine.profile
    assert abs(p.energy - ref["energy"]) <= 1e-6 * ref["energy"]
    assert abs(sobolev_constant(p) - ref["sobolev_c"]) <= 1e-6 * ref["sobolev_c"]


def test_sobolev_formulas_agree(q3):
    p = q3.profile
    c = sobolev_constant(p)
    other = p.lambda_q ** -0.5 * p.lq_norm ** ((2 - p.q) / 2)
    assert abs(c - other) <= 1e-8 * c


def test_sobolev_is_best_constant(q3, rng):
    c = sobolev_constant(q3.profile)
    n = q3.grid.n
    for _ in range(50):
        w = rng.standard_normal(n).cumsum()
        w -= np.linspace(0, w[-1], n)
        assert fn.lq_norm(q3.grid, w, 3.0) / h1_norm(q3.ops, w) <= c


def test_sign_changing_one_node(q3):
    g = build_grid(1, 1.0, 399)
    ops = assemble_operators(g)
    sc = sign_changing_profile(g, ops, 3.0, 1)
    assert sc.sign_changing
    assert np.count_nonzero(np.diff(np.sign(sc.phi[sc.phi != 0]))) == 1
    pos = solve_positive_profile(g, ops, 3.0)
    assert sc.energy > pos.energy
    assert sc.nehari_defect() <= 1e-8
    assert _euclidean_residual(ops, sc) <= 1e-10
    with pytest.raises(ValueError):
        sobolev_constant(sc)


def test_sign_changing_two_nodes():
    g = build_grid(1, 1.0, 599)
    sc = sign_changing_profile(g, assemble_operators(g), 2.5, 2)
    assert np.count_nonzero(np.diff(np.sign(sc.phi[sc.phi != 0]))) == 2


def test_sign_changing_zero_nodes_is_positive(q3):
    sc = sign_changing_profile(q3.grid, q3.ops, 3.0, 0)
    assert np.max(np.abs(sc.phi - q3.profile.phi)) <= 1e-8 * q3.profile.phi.max()


def test_sign_changing_rejects_radial():
    g = build_grid(2, 1.0, 99)
    with pytest.raises(ValueError):
        sign_changing_profile(g, assemble_operators(g), 3.0, 1)


def test_profile_csv_deterministic(q3, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_profile_csv(a, q3.profile)
    p2 = solve_positive_profile(q3.grid, q3.ops, 3.0)
    write_profile_csv(b, p2)
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0].startswith("# q=3.0,N=1,R=1.0,J=") and "C_q=" in lines[0]
    assert lines[1] == "r,phi"
    assert float(lines[2].split(",")[1]) == q3.profile.phi[0]
