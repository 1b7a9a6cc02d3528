import csv

import numpy as np
import pytest

from plateid.estimator import (
    EstimatorReport,
    coercivity_lower_bound,
    estimator_report,
    objective_error_estimator,
    primal_residual,
    state_error_estimator,
    true_energy_error,
    write_effectivity,
)
from plateid.objective import eval_objective
from plateid.rom import initial_basis

from conftest import make_family, make_grid2d, make_problem


def test_state_bound_closed_form():
    rng = np.random.default_rng(51)
    n, K = 12, 8
    dt, rho = 0.3, 1.7
    mass = 0.5 + rng.random(n)
    c = 0.37
    r = np.zeros((n, K))
    r[4, 0] = c * np.sqrt(rho * mass[4])  # dual norm of column one is exactly c
    got = state_error_estimator(r, mass, rho, dt, zeta=0.5)
    want = 2.0 * c * dt * np.sqrt(K)
    assert abs(got - want) <= 1e-13 * want

    assert state_error_estimator(np.zeros((n, K)), mass, rho, dt, 0.5) == 0.0
    with pytest.raises(AssertionError):
        state_error_estimator(r, mass, rho, dt, zeta=0.3)


def test_fom_trajectory_residual_vanishes():
    prob = make_problem(cells=(4, 4), K=6, noise=0.02, seed=52)
    fom = prob["model"]
    rng = np.random.default_rng(53)
    q = 1.0 + 0.3 * rng.random(fom.n_param)
    _, state = eval_objective(fom, q)
    res = primal_residual(fom, q, state)
    scale = np.abs(fom.load).max()
    assert np.abs(res).max() <= 1e-10 * scale

    # zero trajectory with zero load gives zero residual
    zero_state = type(state)(np.zeros_like(state.u), np.zeros_like(state.v),
                             state.dt, state.zeta)
    saved = fom.load
    fom.load = np.zeros_like(saved)
    assert np.abs(primal_residual(fom, q, zero_state)).max() == 0.0
    fom.load = saved


def test_lifted_snapshot_residual_is_tiny():
    prob = make_problem(cells=(4, 4), K=6, noise=0.02, seed=54)
    fom = prob["model"]
    q0 = np.ones(fom.n_param)
    pair, rom, _ = initial_basis(fom, q0, eps_pod=1e-10)
    state_r = rom.solve_primal(pair.reduce_parameter(q0))
    lifted = pair.lift_trajectory(state_r)
    res = primal_residual(fom, q0, lifted)
    assert np.abs(res).max() <= 1e-8 * np.abs(fom.load).max()


def test_coercivity_dense_path_matches_eigh():
    fam = make_family(make_grid2d((2, 2), extent=1.0), lam=2.0, mu=1.0)
    q = np.ones(fam.n_params)
    a_q = coercivity_lower_bound(fam, q)
    import scipy.linalg as sla

    full = sla.eigh(
        fam.evaluate(q).toarray(), fam.space_gram.toarray(), eigvals_only=True
    )
    assert abs(a_q - 0.99 * full[0]) <= 1e-6 * full[0]
    assert a_q < full[0]


def test_coercivity_sparse_path_lower_bounds_dense():
    fam = make_family(make_grid2d((7, 7), extent=2.0), lam=2.0, mu=1.0)
    assert fam.n_dofs >= 50  # exercises the iterative path
    rng = np.random.default_rng(55)
    q = 0.8 + 0.5 * rng.random(fam.n_params)
    a_q = coercivity_lower_bound(fam, q)
    import scipy.linalg as sla

    full = sla.eigh(
        fam.evaluate(q).toarray(), fam.space_gram.toarray(), eigvals_only=True
    )
    assert a_q <= full[0] * (1.0 + 1e-10), "not a lower bound"
    assert a_q >= 0.99 * full[0] * (1.0 - 0.02), "eigensolve off by more than its tol"


def test_coercivity_scales_linearly_in_uniform_parameter():
    fam = make_family(make_grid2d((3, 3), extent=1.0), lam=2.0, mu=1.0)
    rng = np.random.default_rng(56)
    q = 0.7 + rng.random(fam.n_params)
    a1 = coercivity_lower_bound(fam, q)
    a2 = coercivity_lower_bound(fam, 2.0 * q)
    assert abs(a2 - 2.0 * a1) <= 1e-10 * a2


def test_coercivity_positive_for_random_parameters():
    fam = make_family(make_grid2d((3, 3), extent=1.0), lam=2.0, mu=1.0)
    rng = np.random.default_rng(57)
    for _ in range(20):
        q = 10.0 ** rng.uniform(-2, 2) * (0.5 + rng.random(fam.n_params))
        assert coercivity_lower_bound(fam, q) > 0.0


def test_objective_bound_form():
    assert objective_error_estimator(1.0, 0.0, 2.0, 1.5) == 0.0
    got = objective_error_estimator(0.0, 0.3, 2.0, 1.5)
    assert abs(got - 1.5**2 / 4.0 * 0.09) <= 1e-15
    # monotone in the seminorm bound and in the reduced objective
    lo = objective_error_estimator(1.0, 0.1, 2.0, 1.5)
    hi = objective_error_estimator(1.0, 0.2, 2.0, 1.5)
    assert hi > lo
    assert objective_error_estimator(2.0, 0.1, 2.0, 1.5) > lo


def test_report_invariants():
    with pytest.raises(AssertionError):
        EstimatorReport(-1.0, 0.0, 0.0, 1.0, 1.0)
    with pytest.raises(AssertionError):
        EstimatorReport(1.0, 2.0, 0.0, 1.0, 1.0)
    EstimatorReport(2.0, 1.0, 3.0, 0.5, 1.0)


def test_report_requires_moderate_step():
    prob = make_problem(cells=(3, 3), K=2, T=4.0, noise=0.0, seed=58)
    fom = prob["model"]
    assert fom.dt > 1.0
    q0 = np.ones(fom.n_param)
    _, state = eval_objective(fom, q0)
    with pytest.raises(AssertionError):
        estimator_report(fom, q0, state, 0.0)


def test_bounds_hold_on_random_reduced_iterates():
    prob = make_problem(cells=(4, 4), K=6, noise=0.02, seed=59)
    fom = prob["model"]
    q0 = np.ones(fom.n_param)
    pair, rom, _ = initial_basis(fom, q0, eps_pod=1e-10)
    rng = np.random.default_rng(60)
    q0_r = pair.reduce_parameter(q0)

    state_viol = 0
    obj_viol = 0
    effs = []
    for _ in range(8):
        q_r = q0_r + 0.15 * rng.standard_normal(rom.n_param)
        q_full = pair.lift_parameter(q_r)
        state_r = rom.solve_primal(q_r)
        lifted = pair.lift_trajectory(state_r)
        j_r = rom.objective_value(state_r)
        report = estimator_report(fom, q_full, lifted, j_r)

        j_h, state_h = eval_objective(fom, q_full)
        truth = true_energy_error(fom, q_full, state_h, lifted)
        gap = abs(j_h - j_r)
        if report.state_bound < truth:
            state_viol += 1
        if report.objective_bound < gap:
            obj_viol += 1
        if truth > 0:
            effs.append(report.state_bound / truth)

    assert state_viol == 0, f"state bound violated {state_viol} times"
    assert obj_viol == 0, f"objective bound violated {obj_viol} times"
    assert all(e >= 1.0 for e in effs)


def test_effectivity_csv(tmp_path):
    rows = [dict(parameter_hash="abc", state_bound=2.0, true_state_error=0.5,
                 state_effectivity=4.0, objective_bound=1.0,
                 true_objective_gap=0.1, objective_effectivity=10.0)]
    path = tmp_path / "eff.csv"
    write_effectivity(path, rows)
    with open(path, newline="") as fh:
        back = list(csv.DictReader(fh))
    assert len(back) == 1
    assert float(back[0]["state_bound"]) == 2.0
    assert back[0]["parameter_hash"] == "abc"
