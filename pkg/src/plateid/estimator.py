"""Residual-based a posteriori error bounds for the reduced surrogate.

The state bound accumulates dual norms of the full-order equation defect of
a lifted reduced trajectory; the objective bound combines it with a computed
coercivity constant of the stiffness and the observation-operator norm.
Both are certified upper bounds and are expected to overestimate by a wide
margin; they are logged, never used to gate the trust region.
"""

import csv
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .timestep import SolverError

DENSE_EIG_CUTOFF = 50


@dataclass
class EstimatorReport:
    state_bound: float          # bound on the root-sum-square energy error
    stiffness_bound: float      # substitute for the stiffness-seminorm part
    objective_bound: float
    coercivity: float
    obs_norm: float
    effectivity_state: float = None
    effectivity_objective: float = None

    def __post_init__(self):
        vals = (self.state_bound, self.stiffness_bound, self.objective_bound,
                self.coercivity, self.obs_norm)
        assert all(v >= 0.0 for v in vals), "estimator quantities must be nonnegative"
        assert self.stiffness_bound <= self.state_bound * (1.0 + 1e-12), (
            "stiffness-seminorm part cannot exceed the full state bound"
        )


def primal_residual(fom, q, trajectory):
    """Full-order equation defect of a (lifted) trajectory, one column per step.

    r^k = load\\_mid^k - A(q) u\\_mid^k - (rho/dt) M (v^k - v^{k-1}) for k = 1..K,
    with mid-quantities combined by the scheme weight.  Exact trajectories
    produce zero up to solver roundoff.
    """
    z = trajectory.zeta
    load_mid = z * fom.load[:, 1:] + (1.0 - z) * fom.load[:, :-1]
    stiff = fom.stiffness(q)
    inertia = (fom.family.material.rho / trajectory.dt) * (
        fom.family.mass_diag[:, None] * (trajectory.v[:, 1:] - trajectory.v[:, :-1])
    )
    return load_mid - stiff @ trajectory.intermediate() - inertia


def state_error_estimator(residuals, mass_diag, rho, dt, zeta):
    """Accumulated dual-norm bound on the energy error of the state.

    Delta = 2 * sqrt(sum_k (dt * sum_{k'<=k} ||r^{k'}||_dual)^2), with the dual
    norm taken against the inverse scaled lumped mass.  Valid for scheme
    weights at or above one half.
    """
    assert zeta >= 0.5, f"estimator requires zeta >= 1/2, got {zeta}"
    weights = 1.0 / (rho * mass_diag)
    norms = np.sqrt(np.einsum("ij,i,ij->j", residuals, weights, residuals))
    partial = dt * np.cumsum(norms)
    return 2.0 * float(np.sqrt(np.sum(partial * partial)))


def coercivity_lower_bound(family, q, rel_tol=0.01, safety=0.99):
    """Certified-style lower bound on the smallest stiffness eigenvalue
    relative to the displacement-space Gram."""
    stiff = family.evaluate(np.asarray(q, dtype=float))
    gram = family.space_gram
    n = stiff.shape[0]
    if n < DENSE_EIG_CUTOFF:
        vals = sla.eigh(
            stiff.toarray(), gram.toarray(), eigvals_only=True, subset_by_index=[0, 0]
        )
        smallest = float(vals[0])
    else:
        try:
            vals = spla.eigsh(
                stiff.tocsc(), k=1, M=gram.tocsc(), sigma=0.0, which="LM",
                tol=rel_tol, return_eigenvectors=False,
            )
        except spla.ArpackNoConvergence as exc:
            raise SolverError(
                f"coercivity eigensolve did not converge: {exc}"
            ) from exc
        smallest = float(vals[0])
    assert smallest > 0.0, "stiffness lost positivity; parameter out of range?"
    return safety * smallest


def objective_error_estimator(j_reduced, stiffness_bound, coercivity, obs_norm):
    """Bound on the objective gap from a bound on the stiffness-seminorm error."""
    assert min(j_reduced, stiffness_bound, coercivity, obs_norm) >= 0.0
    quad = (obs_norm * obs_norm) / (2.0 * coercivity) * stiffness_bound**2
    cross = obs_norm * np.sqrt(2.0 * j_reduced / coercivity) * stiffness_bound
    return float(quad + cross)


def estimator_report(fom, q, lifted_trajectory, j_reduced, coercivity=None):
    """Full report for one reduced solve: state and objective bounds.

    Substitutes the state bound for the stiffness-seminorm part; that keeps
    the objective bound valid because the seminorm sum is dominated by the
    energy sum and the step size never exceeds one in the shipped setups.
    """
    assert fom.dt <= 1.0, (
        "objective bound substitution needs dt <= 1; rescale the time unit"
    )
    res = primal_residual(fom, q, lifted_trajectory)
    family = fom.family
    delta_u = state_error_estimator(
        res, family.mass_diag, family.material.rho, fom.dt, lifted_trajectory.zeta
    )
    if coercivity is None:
        coercivity = coercivity_lower_bound(family, q)
    delta_j = objective_error_estimator(
        j_reduced, delta_u, coercivity, fom.obs.norm_bound
    )
    return EstimatorReport(
        state_bound=delta_u,
        stiffness_bound=delta_u,
        objective_bound=delta_j,
        coercivity=coercivity,
        obs_norm=fom.obs.norm_bound,
    )


def true_energy_error(fom, q, full_traj, lifted_traj):
    """Root-sum-square energy norm of the trajectory difference (truth)."""
    stiff = fom.stiffness(q)
    mass = fom.family.mass_diag * fom.family.material.rho
    eu = full_traj.u - lifted_traj.u
    ev = full_traj.v - lifted_traj.v
    kinetic = np.einsum("ij,i,ij->j", ev, mass, ev)
    elastic = np.einsum("ij,ij->j", eu, stiff @ eu)
    return float(np.sqrt(np.sum(kinetic + elastic)))


def write_effectivity(path, rows):
    cols = [
        "parameter_hash", "state_bound", "true_state_error", "state_effectivity",
        "objective_bound", "true_objective_gap", "objective_effectivity",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in rows:
            writer.writerow([r.get(c, "") for c in cols])
