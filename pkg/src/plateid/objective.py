"""Discrete misfit objective, its linearization, and exact adjoint gradients.

Both the full-order model and any reduced surrogate expose the same small
protocol (solve_primal, solve_adjoint, solve_lin_primal, solve_lin_adjoint,
objective_value, gradient, ...).  Everything in this module and in the
Gauss-Newton loop is written against that protocol, so the reduced solver and
the full solver share one code path.

The adjoint recursion is the exact transpose of the discrete state recursion,
which makes the returned gradients exact for the discrete objective up to
solver roundoff (finite differences match to machine-limited accuracy, not
just to the time-discretization order).
"""

from dataclasses import dataclass, field

import numpy as np

from . import timestep
from .model import ParameterVector, parameter_hash


class AdmissibilityError(ValueError):
    """Raised when a solve is requested at an out-of-bounds parameter."""


def _values(q):
    return q.values if isinstance(q, ParameterVector) else np.asarray(q, dtype=float)


@dataclass
class FomModel:
    """Full-order discrete model binding assembly, data, and stepping.

    load  : consistent load columns, shape (n_dofs, K+1)
    data  : observation coefficients of the measured trajectory, (n_obs, K+1);
            column 0 is carried for alignment but never enters the objective.
    """

    family: object
    obs: object
    load: np.ndarray
    data: np.ndarray
    dt: float
    zeta: float
    q_center: np.ndarray
    lower: float = 1e-20
    upper: float = 1e20
    u0: np.ndarray = None
    v0: np.ndarray = None
    counters: dict = field(default_factory=dict)

    def __post_init__(self):
        self.q_center = np.asarray(self.q_center, dtype=float)
        n = self.family.n_dofs
        if self.load.shape[0] != n:
            raise ValueError("load rows do not match dof count")
        if self.data.shape[1] != self.load.shape[1]:
            raise ValueError("data and load disagree on the number of time nodes")
        if self.u0 is None:
            self.u0 = np.zeros(n)
        if self.v0 is None:
            self.v0 = np.zeros(n)
        self.counters = {
            "primal": 0,
            "adjoint": 0,
            "lin_primal": 0,
            "lin_adjoint": 0,
            "factorizations": 0,
        }
        self._cache_key = None
        self._cache = None
        # data-dependent constants: rhs vectors and the pure-data term
        self._cty = self.obs.data_term(self.data)
        norms = self.obs.obs_norm_sq_columns(self.data[:, 1:])
        self.c_data = 0.5 * self.dt * float(norms.sum())

    # -- protocol: sizes and admissibility ------------------------------------

    @property
    def n_param(self):
        return self.family.n_params

    @property
    def n_steps(self):
        return self.load.shape[1] - 1

    def parameter(self, values):
        return ParameterVector(values, self.lower, self.upper)

    def is_admissible(self, q, tol=1e-12):
        v = _values(q)
        scale = 1.0 + np.abs(v).max(initial=0.0)
        return bool(
            np.all(v >= self.lower - tol * scale) and np.all(v <= self.upper + tol * scale)
        )

    def project_admissible(self, q):
        return np.clip(_values(q), self.lower, self.upper)

    # -- protocol: solves ------------------------------------------------------

    def step_operator(self, q):
        """Factorized step operator, cached per parameter value."""
        v = _values(q)
        key = parameter_hash(v)
        if key != self._cache_key:
            stiffness = self.family.evaluate(v)
            op = timestep.SteppingOperator(
                stiffness, self.family.mass_diag, self.family.material.rho, self.dt, self.zeta
            )
            self.counters["factorizations"] += 1
            self._cache_key = key
            self._cache = (op, stiffness)
        return self._cache[0]

    def stiffness(self, q):
        self.step_operator(q)
        return self._cache[1]

    def solve_primal(self, q):
        if not self.is_admissible(q):
            raise AdmissibilityError("primal solve at inadmissible parameter")
        op = self.step_operator(q)
        self.counters["primal"] += 1
        return timestep.solve_primal(op, self.load, self.u0, self.v0)

    def mismatch(self, state):
        """Columns <C phi_i, y - C u> at every time node."""
        return self._cty - self.obs.quad_form @ state.u

    def solve_adjoint(self, q, state):
        op = self.step_operator(q)
        self.counters["adjoint"] += 1
        return timestep.solve_adjoint(op, self.mismatch(state))

    def solve_lin_primal(self, q, d, state):
        op = self.step_operator(q)
        a_dir = self.family.evaluate_direction(_values(d))
        self.counters["lin_primal"] += 1
        return timestep.solve_linearized_primal(op, a_dir, state)

    def solve_lin_adjoint(self, q, d, state, lin_state):
        op = self.step_operator(q)
        src = self.mismatch(state) - self.obs.quad_form @ lin_state.u
        self.counters["lin_adjoint"] += 1
        return timestep.solve_linearized_adjoint(op, src)

    def tangent_unit_displacements(self, q, state):
        """Tangent displacement columns 1..K for every unit parameter direction.

        Returns shape (n_param, n_dofs, K); all directions march together on
        the shared factorization.  Counts as n_param tangent solves.
        """
        op = self.step_operator(q)
        mid = state.intermediate()
        n_p = self.n_param
        sources = np.empty((n_p, mid.shape[0], mid.shape[1]))
        e = np.zeros(n_p)
        for j in range(n_p):
            e[j] = 1.0
            sources[j] = -(self.family.evaluate_direction(e) @ mid)
            e[j] = 0.0
        self.counters["lin_primal"] += n_p
        u = timestep.march_forward_block(
            op, np.ascontiguousarray(sources.transpose(2, 1, 0))
        )
        return np.ascontiguousarray(np.moveaxis(u[:, :, 1:], 1, 0))

    # -- protocol: values and gradients ---------------------------------------

    def quadform_apply(self, u):
        return self.obs.quad_form @ u

    def objective_value(self, state):
        u = state.u[:, 1:]
        qu = self.obs.quad_form @ u
        quad = 0.5 * np.einsum("ij,ij->", u, qu)
        lin = np.einsum("ij,ij->", u, self._cty[:, 1:])
        return self.c_data + self.dt * (quad - lin)

    def lin_objective_value(self, q, d, alpha, state, lin_state):
        du = lin_state.u[:, 1:]
        qdu = self.obs.quad_form @ du
        g = self.mismatch(state)[:, 1:]
        quad = 0.5 * np.einsum("ij,ij->", du, qdu)
        lin = np.einsum("ij,ij->", du, g)
        misfit = self.objective_value(state) + self.dt * (quad - lin)
        shift = _values(q) + _values(d) - self.q_center
        return misfit + 0.5 * alpha * float(shift @ shift)

    def gradient(self, state, adjoint):
        mid = state.intermediate()
        return self.dt * self.family.param_product_sum(mid, adjoint.u[:, 1:])

    def lin_gradient(self, q, d, alpha, state, lin_adjoint):
        mid = state.intermediate()
        g = self.dt * self.family.param_product_sum(mid, lin_adjoint.u[:, 1:])
        return g + alpha * (_values(q) + _values(d) - self.q_center)

    def fom_solve_count(self):
        c = self.counters
        return c["primal"] + c["adjoint"] + c["lin_primal"] + c["lin_adjoint"]


# -- module-level evaluators ---------------------------------------------------


def eval_objective(model, q):
    """Misfit value and the state trajectory it was computed from."""
    state = model.solve_primal(q)
    return model.objective_value(state), state


def eval_gradient(model, q, state):
    """Exact discrete gradient via one adjoint solve; returns (grad, adjoint)."""
    adjoint = model.solve_adjoint(q, state)
    return model.gradient(state, adjoint), adjoint


def eval_linearized_objective(model, q, d, alpha, state, lin_state=None):
    """Value of the Gauss-Newton model at step d; returns (value, lin_state)."""
    if lin_state is None:
        lin_state = model.solve_lin_primal(q, d, state)
    return model.lin_objective_value(q, d, alpha, state, lin_state), lin_state


def eval_linearized_gradient(model, q, d, alpha, state, lin_state=None):
    if lin_state is None:
        lin_state = model.solve_lin_primal(q, d, state)
    lin_adjoint = model.solve_lin_adjoint(q, d, state, lin_state)
    return model.lin_gradient(q, d, alpha, state, lin_adjoint), lin_adjoint


# parameter dimension up to which the tangent operator is materialized;
# reduced subproblems sit far below this, full-order desk problems far above
DENSE_DIRECTION_LIMIT = 64


class Linearization:
    """Workspace for the Gauss-Newton subproblem at a fixed outer iterate.

    Caches the factorization and base-state mismatch so every inner iteration
    pays only the tangent and (optionally) tangent-adjoint sweeps.  When the
    parameter space is small the tangent operator is materialized column by
    column instead: the model value becomes an explicit quadratic and the
    step computation plus the whole regularization walk run without further
    time-stepping solves.
    """

    def __init__(self, model, q, state):
        self.model = model
        self.q = _values(q)
        self.state = state
        model.step_operator(q)  # warm the factorization cache
        self.base_value = model.objective_value(state)
        self._quad = None
        self._rhs = None
        if self.q.size <= DENSE_DIRECTION_LIMIT:
            self._assemble_dense()

    def _assemble_dense(self):
        """Materialize m(d) = J + d'Wd/2 - b'd with one block tangent sweep."""
        model = self.model
        g = model.mismatch(self.state)[:, 1:]
        du = model.tangent_unit_displacements(self.q, self.state)  # (n, dofs, K)
        n, dofs, steps = du.shape
        qdu = np.asarray(
            model.quadform_apply(du.transpose(1, 0, 2).reshape(dofs, n * steps))
        ).reshape(dofs, n, steps)
        flat = du.reshape(n, dofs * steps)
        qflat = np.ascontiguousarray(qdu.transpose(1, 0, 2)).reshape(n, dofs * steps)
        w = model.dt * (flat @ qflat.T)
        self._quad = 0.5 * (w + w.T)
        self._rhs = model.dt * (flat @ g.ravel())

    @property
    def dense(self):
        return self._quad is not None

    def _dense_misfit(self, d):
        d = _values(d)
        return self.base_value + float(0.5 * (d @ (self._quad @ d)) - self._rhs @ d)

    def _regularizer(self, d, alpha):
        shift = self.q + _values(d) - self.model.q_center
        return 0.5 * alpha * float(shift @ shift)

    def solve(self, d):
        return self.model.solve_lin_primal(self.q, d, self.state)

    def value(self, d, alpha, lin_state=None):
        if self.dense:
            return self._dense_misfit(d) + self._regularizer(d, alpha), None
        if lin_state is None:
            lin_state = self.solve(d)
        return (
            self.model.lin_objective_value(self.q, d, alpha, self.state, lin_state),
            lin_state,
        )

    def misfit_value(self, d, lin_state):
        """Linearized objective without the regularization term."""
        if self.dense:
            return self._dense_misfit(d)
        return self.model.lin_objective_value(self.q, d, 0.0, self.state, lin_state)

    def gradient_at(self, d, alpha, lin_state):
        """Model gradient at a step whose tangent state is already known."""
        if self.dense:
            d = _values(d)
            grad = self._quad @ d - self._rhs
            grad += alpha * (self.q + d - self.model.q_center)
            return grad, None
        lin_adjoint = self.model.solve_lin_adjoint(self.q, d, self.state, lin_state)
        return (
            self.model.lin_gradient(self.q, d, alpha, self.state, lin_adjoint),
            lin_adjoint,
        )

    def value_and_gradient(self, d, alpha):
        if self.dense:
            val = self._dense_misfit(d) + self._regularizer(d, alpha)
            grad, _ = self.gradient_at(d, alpha, None)
            return val, grad, None
        lin_state = self.solve(d)
        val = self.model.lin_objective_value(self.q, d, alpha, self.state, lin_state)
        grad, _ = eval_linearized_gradient(
            self.model, self.q, d, alpha, self.state, lin_state
        )
        return val, grad, lin_state
