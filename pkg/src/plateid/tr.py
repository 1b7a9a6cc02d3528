"""Trust-region driver over the reduced surrogate.

Each outer iteration solves the regularized Gauss-Newton subproblem on the
current surrogate inside a radius around the center, evaluates the trial
point with one full-order primal solve, and either accepts (enrich bases,
possibly enlarge the radius) or rejects (keep bases, shrink the radius).
Error estimators are logged per iteration for certification; they never
gate the step.
"""

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .estimator import estimator_report, true_energy_error
from .irgnm import irgnm_run
from .objective import eval_objective
from .rom import enrich, initial_basis, reduced_step_projector


@dataclass
class TrustRegionConfig:
    eta0: float = 0.5
    eta_max: float = 2.0
    beta2: float = 0.75
    beta3: float = 0.5
    boundary_fraction: float = 0.95
    max_outer: int = 60
    max_rejections: int = 15
    max_backtracks: int = 20
    eps_pod: float = 1e-10
    consistency_tol: float = 1e-8
    tau_reduced: float = None   # defaults to the full-order discrepancy factor
    log_estimators: bool = True

    def validate(self):
        if not (0.0 < self.eta0 <= self.eta_max):
            raise ValueError(f"need 0 < eta0 <= eta_max, got {self.eta0}, {self.eta_max}")
        if not (0.75 <= self.beta2 < 1.0):
            raise ValueError(f"enlargement threshold outside [3/4, 1): {self.beta2}")
        if not (0.0 < self.beta3 < 1.0):
            raise ValueError(f"shrink factor outside (0, 1): {self.beta3}")
        if not (0.0 < self.boundary_fraction < 1.0):
            raise ValueError("boundary fraction must sit strictly inside (0, 1)")
        return self


@dataclass
class TrResult:
    q: np.ndarray
    objective: float
    ledger: list
    stop_reason: str
    seconds: float
    n_v: int
    n_q: int

    @property
    def converged(self):
        return self.stop_reason == "discrepancy"

    @property
    def iterations(self):
        return len(self.ledger)


def write_tr_ledger(path, result):
    payload = {
        "stop_reason": result.stop_reason,
        "objective": float(result.objective),
        "seconds": float(result.seconds),
        "n_v": result.n_v,
        "n_q": result.n_q,
        "iterations": result.ledger,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def tr_subproblem(rom, q_start_r, eta, delta, irgnm_config, tr_config):
    """Reduced Gauss-Newton run confined to the radius around the center.

    Steps leaving the region are halved back inside (bounded number of
    halvings); the run also stops once the iterate sits close to the
    boundary, or at the reduced discrepancy level, or by its own criteria.
    """
    q_start_r = np.asarray(q_start_r, dtype=float)
    tau_r = tr_config.tau_reduced
    sub_cfg = irgnm_config if tau_r is None else replace(irgnm_config, tau=tau_r)
    forced = {"flag": False}

    def step_hook(q_r, d):
        d = d.copy()
        for _ in range(tr_config.max_backtracks):
            if np.linalg.norm(q_r + d - q_start_r) <= eta:
                return d
            d *= 0.5
        forced["flag"] = True
        return np.zeros_like(d)

    def stop_hook(q_r, j_r):
        if forced["flag"]:
            return "boundary"
        if np.linalg.norm(q_r - q_start_r) >= tr_config.boundary_fraction * eta:
            return "boundary"
        return None

    res = irgnm_run(
        rom, q_start_r, delta, sub_cfg,
        step_hook=step_hook, stop_hook=stop_hook,
        step_projector=reduced_step_projector,
        alpha0=irgnm_config.alpha_init,
    )
    return res


def tr_accept(fom, q_trial, j_current, predicted_drop):
    """One full-order trial evaluation; acceptance needs strict decrease.

    Returns (accepted, ratio, trial objective, trial state).  The ratio of
    actual to predicted decrease is +inf when the surrogate predicted no
    drop on an accepted step: surrogate flatness should not block radius
    enlargement when the full model improved.
    """
    j_trial, state_trial = eval_objective(fom, q_trial)
    accepted = bool(j_trial < j_current)
    ratio = None
    if accepted:
        drop = j_current - j_trial
        ratio = drop / predicted_drop if predicted_drop > 0.0 else np.inf
    return accepted, ratio, j_trial, state_trial


def tr_irgnm(fom, q0, delta, irgnm_config, tr_config, on_iteration=None):
    """Adaptive-surrogate Gauss-Newton outer loop.

    Basis initialization costs one full primal and one full adjoint solve;
    every iteration costs one full primal (trial evaluation), and accepted
    iterations reuse that trajectory plus one full adjoint for enrichment.
    """
    irgnm_config.validate()
    tr_config.validate()
    q0 = np.asarray(q0, dtype=float)
    assert fom.is_admissible(q0), "starting parameter violates the box"
    threshold = 0.5 * (irgnm_config.tau * delta) ** 2
    t_run = time.perf_counter()

    pair, rom, init_info = initial_basis(
        fom, q0, tr_config.eps_pod, consistency_tol=tr_config.consistency_tol
    )
    j_curr = init_info["objective"]
    q_curr = q0.copy()
    q_r = pair.reduce_parameter(q_curr)
    eta = tr_config.eta0
    alpha_warm = irgnm_config.alpha_init
    ledger = []
    rejections = 0
    reason = None

    while True:
        if j_curr <= threshold:
            reason = "discrepancy"
            break
        if len(ledger) >= tr_config.max_outer:
            reason = "max_outer"
            break

        t_iter = time.perf_counter()
        solves_before = fom.fom_solve_count()
        sub_cfg = replace(irgnm_config, alpha_init=alpha_warm)
        sub = tr_subproblem(rom, q_r, eta, delta, sub_cfg, tr_config)
        alpha_warm = sub.alpha_last
        q_trial_r = sub.q
        j_r_center = sub.records[0].objective if sub.records else sub.objective
        j_r_trial = sub.objective
        predicted_drop = j_r_center - j_r_trial
        step_norm = float(np.linalg.norm(q_trial_r - q_r))

        row = {
            "i": len(ledger),
            "eta": float(eta),
            "n_Q": pair.n_q,
            "n_V": pair.n_v,
            "J_r": float(j_r_trial),
            "subproblem_stop": sub.stop_reason,
            "subproblem_iters": sub.iterations,
            "step_norm": step_norm,
            "sandwich_ok": bool(all(r.sandwich_ok for r in sub.records)),
            "reduced_records": [
                {
                    "objective": float(r.objective),
                    "alpha": float(r.alpha),
                    "lin_misfit": float(r.lin_misfit),
                    "sandwich_ok": bool(r.sandwich_ok),
                }
                for r in sub.records
            ],
        }

        if step_norm == 0.0:
            # no trial point to evaluate; still a failed iteration
            accepted = False
            eta = tr_config.beta3 * eta
            rejections += 1
            row.update(J_h=float(j_curr), accepted=False, rho=None,
                       note="subproblem returned the center")
        else:
            q_trial = np.clip(pair.lift_parameter(q_trial_r), fom.lower, fom.upper)
            accepted, ratio, j_trial, state_trial = tr_accept(
                fom, q_trial, j_curr, predicted_drop
            )
            if tr_config.log_estimators:
                lifted = pair.lift_trajectory(
                    rom.solve_primal(q_trial_r)
                )
                report = estimator_report(fom, q_trial, lifted, j_r_trial)
                truth = true_energy_error(fom, q_trial, state_trial, lifted)
                gap = abs(j_trial - j_r_trial)
                row.update(
                    state_bound=float(report.state_bound),
                    true_state_error=float(truth),
                    state_effectivity=float(report.state_bound / truth)
                    if truth > 0 else None,
                    objective_bound=float(report.objective_bound),
                    true_objective_gap=float(gap),
                    objective_effectivity=float(report.objective_bound / gap)
                    if gap > 0 else None,
                    coercivity=float(report.coercivity),
                )

            if accepted:
                assert j_trial < j_curr, "acceptance without strict decrease"
                adjoint = fom.solve_adjoint(q_trial, state_trial)
                grad_full = fom.gradient(state_trial, adjoint)
                pair, rom, enr = enrich(
                    pair, fom, q_trial, grad_full, state_trial, adjoint,
                    tr_config.eps_pod, consistency_tol=tr_config.consistency_tol,
                    prev_rom=rom,
                )
                row.update(
                    value_gap=float(enr["value_gap"]),
                    gradient_gap=float(enr["gradient_gap"]),
                )
                q_curr = q_trial
                q_r = pair.reduce_parameter(q_curr)
                j_curr = j_trial
                if ratio > tr_config.beta2:
                    eta = min(tr_config.eta_max, eta / tr_config.beta3)
                rejections = 0
            else:
                eta = tr_config.beta3 * eta
                rejections += 1
            row.update(
                J_h=float(j_curr),
                J_h_trial=float(j_trial),
                accepted=bool(accepted),
                rho=(None if ratio is None
                     else (float(ratio) if np.isfinite(ratio) else "inf")),
            )

        used = fom.fom_solve_count() - solves_before
        budget = 3 if accepted else 1
        assert used <= budget, (
            f"iteration {len(ledger)} used {used} full-order solves, budget {budget}"
        )
        assert eta <= tr_config.eta_max * (1.0 + 1e-15)
        row.update(
            eta_next=float(eta),
            fom_solves_cum=int(fom.fom_solve_count()),
            seconds=float(time.perf_counter() - t_iter),
        )
        ledger.append(row)
        if on_iteration is not None:
            on_iteration(row)

        if rejections >= tr_config.max_rejections:
            reason = "radius_collapse"
            break

    return TrResult(
        q=q_curr,
        objective=float(j_curr),
        ledger=ledger,
        stop_reason=reason,
        seconds=time.perf_counter() - t_run,
        n_v=pair.n_v,
        n_q=pair.n_q,
    )
