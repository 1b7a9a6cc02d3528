"""Regularized Gauss-Newton outer loop with discrepancy stopping.

Each outer step linearizes the misfit at the current iterate and solves a
Tikhonov subproblem with a box constraint.  The regularization weight is
chosen a posteriori so that the linearized residual lands inside a fixed
two-sided window relative to the current misfit.  The inner solver is a
projected gradient method with alternating Barzilai-Borwein step lengths
and a nonmonotone acceptance safeguard.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .objective import Linearization, eval_objective
from .timestep import SolverError


@dataclass
class IrgnmConfig:
    tau: float = 1.1
    theta: float = 0.4
    big_theta: float = 1.95
    alpha_init: float = 1e-5
    alpha_factor: float = 3.0
    max_alpha_trials: int = 30
    max_outer: int = 60
    max_inner: int = 250
    inner_rel_tol: float = 1e-4
    inner_opt_tol: float = 1e-8
    nonmonotone_window: int = 5
    armijo_sigma: float = 1e-4
    stagnation_tol: float = 1e-12
    stagnation_limit: int = 3
    max_seconds: float | None = None

    def validate(self):
        if not (0.0 < self.theta < self.big_theta < 2.0):
            raise ValueError(
                f"need 0 < theta < Theta < 2, got {self.theta}, {self.big_theta}"
            )
        if self.tau <= 1.0:
            raise ValueError(f"discrepancy factor must exceed 1, got {self.tau}")
        if self.alpha_init <= 0.0 or self.alpha_factor <= 1.0:
            raise ValueError("alpha_init must be positive and alpha_factor > 1")
        return self


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    alpha: float
    inner_iters: int
    alpha_trials: int
    step_norm: float
    lin_misfit: float
    sandwich_ok: bool
    seconds: float


@dataclass
class IrgnmResult:
    q: np.ndarray
    objective: float
    records: list
    stop_reason: str
    seconds: float
    alpha_last: float

    @property
    def iterations(self):
        return len(self.records)

    @property
    def converged(self):
        return self.stop_reason == "discrepancy"


def write_ledger(path, records):
    cols = [
        "iteration", "objective", "alpha", "inner_iters", "alpha_trials",
        "step_norm", "lin_misfit", "sandwich_ok", "seconds",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in records:
            writer.writerow([
                r.iteration, repr(float(r.objective)), repr(float(r.alpha)),
                r.inner_iters, r.alpha_trials, repr(float(r.step_norm)),
                repr(float(r.lin_misfit)), int(r.sandwich_ok),
                repr(float(r.seconds)),
            ])


def box_step_projector(model, q):
    """Feasible-step map for the box: d -> clip(q + d) - q."""
    base = np.asarray(q, dtype=float)

    def project(d):
        return np.clip(base + d, model.lower, model.upper) - base

    return project


def solve_subproblem(lin, alpha, project, config, d0=None):
    """Minimize the regularized Gauss-Newton model over feasible steps.

    Projected gradient with alternating BB1/BB2 step lengths.  A trial is
    accepted when it sits below the maximum of the last few objective values
    minus an Armijo margin; otherwise the step is halved along the chord.
    Returns (d, info) where info carries the final tangent trajectory so the
    caller can evaluate the unregularized model value without another solve.
    """
    n = lin.q.size
    d = project(np.zeros(n) if d0 is None else np.asarray(d0, dtype=float))
    val, grad, lin_state = lin.value_and_gradient(d, alpha)
    history = [val]
    t_bb = 1.0 / max(alpha, np.linalg.norm(grad, np.inf), 1e-12)
    t_min, t_max = 1e-14, 1e14

    # the optimality test is relative to the starting point so that it is
    # invariant under rescaling the data misfit (observation weights carry
    # mesh factors, so absolute gradient magnitudes are not meaningful)
    opt0 = np.linalg.norm(project(d - grad) - d)
    reason = "max_inner"
    it = 0
    for it in range(1, config.max_inner + 1):
        opt = np.linalg.norm(project(d - grad) - d)
        if opt <= config.inner_opt_tol * opt0:
            reason = "first_order"
            break

        d_trial = project(d - t_bb * grad)
        s = d_trial - d
        s_norm = np.linalg.norm(s)
        if s_norm == 0.0:
            reason = "stationary"
            break

        slope = grad @ s
        f_ref = max(history[-config.nonmonotone_window:])
        lam = 1.0
        accepted = False
        for _ in range(30):
            cand = d + lam * s
            f_cand, state_cand = lin.value(cand, alpha)
            if f_cand <= f_ref + config.armijo_sigma * lam * slope:
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            raise SolverError(
                "inner line search exhausted without decrease; "
                "gradient and objective are inconsistent"
            )

        grad_new, _ = _lin_gradient_at(lin, cand, alpha, state_cand)
        sk = cand - d
        yk = grad_new - grad
        sy = sk @ yk
        if sy > 0.0:
            if it % 2 == 1:
                t_bb = (sk @ sk) / sy
            else:
                t_bb = sy / (yk @ yk)
            t_bb = min(max(t_bb, t_min), t_max)
        else:
            t_bb = min(t_bb * 2.0, t_max)

        rel_drop = abs(val - f_cand) / max(abs(val), 1e-300)
        d, val, grad, lin_state = cand, f_cand, grad_new, state_cand
        history.append(val)
        if rel_drop < config.inner_rel_tol:
            reason = "rel_change"
            break

    info = {"iterations": it, "value": val, "reason": reason, "lin_state": lin_state}
    return d, info


def _lin_gradient_at(lin, d, alpha, lin_state):
    return lin.gradient_at(d, alpha, lin_state)


def select_alpha(lin, alpha_prev, project, config):
    """Walk the regularization weight until the two-sided residual window holds.

    theta*J <= 2*m(d_alpha) <= Theta*J where m is the unregularized model value
    at the subproblem solution.  Multiplies alpha by the adaptation factor when
    the residual is too small, divides when too large; once both sides have
    been seen, continues by geometric bisection of the bracket.
    """
    J = lin.base_value
    assert J > 0.0, "alpha selection needs a positive misfit"
    alpha = alpha_prev
    lo = None  # largest alpha seen with residual below the window
    hi = None  # smallest alpha seen with residual above the window
    best = None
    inner_total = 0
    for trial in range(1, config.max_alpha_trials + 1):
        d, info = solve_subproblem(lin, alpha, project, config)
        inner_total += info["iterations"]
        m = lin.misfit_value(d, info["lin_state"])
        val2 = 2.0 * m
        gap = max(config.theta * J - val2, val2 - config.big_theta * J)
        if best is None or gap < best[0]:
            best = (gap, alpha, d, m, trial)
        if val2 < config.theta * J:
            lo = alpha if lo is None else max(lo, alpha)
        elif val2 > config.big_theta * J:
            hi = alpha if hi is None else min(hi, alpha)
        else:
            return alpha, d, m, {
                "trials": trial, "sandwich_ok": True, "inner_iters": inner_total,
            }
        if lo is not None and hi is not None:
            alpha = float(np.sqrt(lo * hi))
        elif val2 < config.theta * J:
            alpha *= config.alpha_factor
        else:
            alpha /= config.alpha_factor
    _, alpha, d, m, _ = best
    return alpha, d, m, {
        "trials": config.max_alpha_trials, "sandwich_ok": False,
        "inner_iters": inner_total,
    }


def irgnm_run(model, q0, delta, config, *, step_hook=None, stop_hook=None,
              step_projector=box_step_projector, alpha0=None):
    """Outer Gauss-Newton iteration with discrepancy-principle stopping.

    step_hook(q, d) may shorten the proposed step (trust-region backtracking);
    stop_hook(q, J) may end the run early with its own reason string.
    """
    config.validate()
    q = np.asarray(q0, dtype=float).copy()
    assert model.is_admissible(q), "starting parameter violates the box"
    threshold = 0.5 * (config.tau * delta) ** 2
    alpha = config.alpha_init if alpha0 is None else alpha0
    records = []
    stagnant = 0
    t_run = time.perf_counter()

    J, state = eval_objective(model, q)
    reason = None
    while True:
        if J <= threshold:
            reason = "discrepancy"
            break
        if len(records) >= config.max_outer:
            reason = "max_outer"
            break
        if config.max_seconds is not None:
            if time.perf_counter() - t_run > config.max_seconds:
                reason = "time_limit"
                break

        t_iter = time.perf_counter()
        lin = Linearization(model, q, state)
        project = step_projector(model, q)
        alpha_sel, d, lin_misfit, sel = select_alpha(lin, alpha, project, config)
        if not sel["sandwich_ok"]:
            # the model misfit cannot be steered into the window (typical at
            # the attainable noise floor): iteration failure, step not taken
            reason = "alpha_window"
            break
        alpha = alpha_sel
        if step_hook is not None:
            d = step_hook(q, d)
        q_new = model.project_admissible(q + d)
        J_new, state_new = eval_objective(model, q_new)

        records.append(IterationRecord(
            iteration=len(records),
            objective=J,
            alpha=alpha,
            inner_iters=sel["inner_iters"],
            alpha_trials=sel["trials"],
            step_norm=float(np.linalg.norm(q_new - q)),
            lin_misfit=lin_misfit,
            sandwich_ok=sel["sandwich_ok"],
            seconds=time.perf_counter() - t_iter,
        ))

        if (J - J_new) < config.stagnation_tol * max(J, 1e-300):
            stagnant += 1
        else:
            stagnant = 0
        q, J, state = q_new, J_new, state_new

        if stagnant >= config.stagnation_limit:
            reason = "stagnation"
            break
        if stop_hook is not None:
            extra = stop_hook(q, J)
            if extra:
                reason = extra
                break

    return IrgnmResult(
        q=q,
        objective=J,
        records=records,
        stop_reason=reason,
        seconds=time.perf_counter() - t_run,
        alpha_last=alpha,
    )
