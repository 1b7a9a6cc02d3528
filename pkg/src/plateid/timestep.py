"""Implicit two-row time stepping for the second-order semidiscrete system.

One scheme serves the forward state, the backward adjoint, and both linearized
systems.  Each step solves with the same shifted operator

    S = rho * M + dt^2 * zeta^2 * A(q),

factorized once per parameter value and reused across all four system kinds.
The step is performed on the intermediate unknown w = zeta*x_new + (1-zeta)*x_old,
which keeps a single factorization sufficient for every zeta in [1/2, 1].
"""

import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    """Raised when a step operator cannot be factorized or a solve breaks down."""


@dataclass
class Trajectory:
    """Displacement/velocity history on the uniform time grid.

    u, v have shape (n, K+1).  For adjoint roles the columns 1..K hold the
    multipliers marching backward from zero ghost values beyond the final time;
    column 0 is identically zero and unused.
    """

    u: np.ndarray
    v: np.ndarray
    dt: float
    zeta: float
    role: str = "primal"

    @property
    def n_steps(self):
        return self.u.shape[1] - 1

    def intermediate(self):
        """Columns zeta*x^k + (1-zeta)*x^{k-1} for k = 1..K, shape (n, K)."""
        z = self.zeta
        return z * self.u[:, 1:] + (1.0 - z) * self.u[:, :-1]

    def check_consistency(self, atol=1e-8):
        """Velocity/displacement two-row compatibility; loose on roundoff."""
        z, dt = self.zeta, self.dt
        if self.role in ("primal", "lin_primal"):
            lhs = (self.u[:, 1:] - self.u[:, :-1]) / dt
            rhs = z * self.v[:, 1:] + (1.0 - z) * self.v[:, :-1]
        else:
            lam, nu = self.u, self.v
            K = self.n_steps
            lhs = np.empty_like(lam[:, 1:])
            rhs = np.empty_like(lhs)
            lhs[:, : K - 1] = (lam[:, 1:K] - lam[:, 2:]) / dt
            rhs[:, : K - 1] = z * nu[:, 1:K] + (1.0 - z) * nu[:, 2:]
            lhs[:, K - 1] = lam[:, K] / dt
            rhs[:, K - 1] = z * nu[:, K]
        scale = max(np.abs(self.u).max(), np.abs(self.v).max(), 1.0)
        return float(np.abs(lhs - rhs).max()) <= atol * scale


class SteppingOperator:
    """Factorized step operator S = rho*M + dt^2*zeta^2*A plus the mass action.

    Accepts a sparse stiffness (factorized with a sparse direct solver) or a
    dense one (Cholesky).  The mass may be a diagonal vector or a dense matrix.
    """

    def __init__(self, stiffness, mass, rho, dt, zeta):
        if not 0.5 <= zeta <= 1.0:
            raise SolverError(f"zeta={zeta} outside [1/2, 1]")
        if dt <= 0.0:
            raise SolverError("dt must be positive")
        self.rho = float(rho)
        self.dt = float(dt)
        self.zeta = float(zeta)
        self.mass = mass
        shift = dt * dt * zeta * zeta
        try:
            if sp.issparse(stiffness):
                diag = sp.diags(rho * mass) if mass.ndim == 1 else sp.csr_matrix(rho * mass)
                system = (diag + shift * stiffness).tocsc()
                self._solve = spla.splu(system).solve
            else:
                system = shift * np.asarray(stiffness)
                if mass.ndim == 1:
                    system = system + np.diag(rho * mass)
                else:
                    system = system + rho * mass
                cf = sla.cho_factor(system, lower=True, check_finite=False)
                self._solve = lambda b: sla.cho_solve(cf, b, check_finite=False)
        except (RuntimeError, ValueError, sla.LinAlgError) as exc:
            raise SolverError(f"step operator factorization failed: {exc}") from exc

    def mass_apply(self, x):
        if self.mass.ndim == 1:
            if x.ndim == 2:
                return self.rho * (self.mass[:, None] * x)
            return self.rho * (self.mass * x)
        return self.rho * (self.mass @ x)

    def solve(self, b):
        return self._solve(b)


def _march_forward(op, sources, x0, v0, role):
    """Forward sweep; sources[:, k-1] drives the step onto time node k."""
    n, K = sources.shape
    z, dt = op.zeta, op.dt
    c = z * z * dt * dt
    u = np.empty((n, K + 1))
    v = np.empty((n, K + 1))
    u[:, 0] = x0
    v[:, 0] = v0
    for k in range(1, K + 1):
        rhs = op.mass_apply(u[:, k - 1] + z * dt * v[:, k - 1]) + c * sources[:, k - 1]
        w = op.solve(rhs)
        u[:, k] = (w - (1.0 - z) * u[:, k - 1]) / z
        v[:, k] = ((u[:, k] - u[:, k - 1]) / dt - (1.0 - z) * v[:, k - 1]) / z
    return Trajectory(u, v, dt, z, role)


def _march_backward(op, sources, role):
    """Backward sweep from zero ghost values; sources[:, m] drives the step onto m."""
    n = sources.shape[0]
    K = sources.shape[1] - 1
    z, dt = op.zeta, op.dt
    c = z * z * dt * dt
    lam = np.zeros((n, K + 1))
    nu = np.zeros((n, K + 1))
    lam_next = np.zeros(n)
    nu_next = np.zeros(n)
    for m in range(K, 0, -1):
        rhs = op.mass_apply(lam_next + z * dt * nu_next) + c * sources[:, m]
        w = op.solve(rhs)
        lam[:, m] = (w - (1.0 - z) * lam_next) / z
        nu[:, m] = ((lam[:, m] - lam_next) / dt - (1.0 - z) * nu_next) / z
        lam_next = lam[:, m]
        nu_next = nu[:, m]
    return Trajectory(lam, nu, dt, z, role)


def march_forward_block(op, sources, x0=None, v0=None):
    """Forward sweep for several right-hand sides sharing one factorization.

    sources has shape (K, n, m): one (n, m) block per step, column j driving
    system j.  All m systems advance together, so each step performs a single
    multi-column solve instead of m separate ones.  Returns the displacement
    stack with shape (n, m, K+1); velocities are consumed internally and not
    stored, since block callers only read displacement columns.
    """
    K, n, m = sources.shape
    z, dt = op.zeta, op.dt
    c = z * z * dt * dt
    u = np.empty((K + 1, n, m))
    u[0] = 0.0 if x0 is None else x0
    v = np.zeros((n, m)) if v0 is None else np.array(v0, dtype=float)
    for k in range(1, K + 1):
        rhs = op.mass_apply(u[k - 1] + z * dt * v) + c * sources[k - 1]
        w = np.asarray(op.solve(rhs))
        u[k] = (w - (1.0 - z) * u[k - 1]) / z
        v = ((u[k] - u[k - 1]) / dt - (1.0 - z) * v) / z
    return np.ascontiguousarray(np.moveaxis(u, 0, 2))


def solve_primal(op, load, x0=None, v0=None):
    """State solve driven by load columns at the K+1 time nodes."""
    n = load.shape[0]
    if load.ndim != 2 or load.shape[1] < 2:
        raise ValueError("load must provide one column per time node")
    x0 = np.zeros(n) if x0 is None else x0
    v0 = np.zeros(n) if v0 is None else v0
    z = op.zeta
    combined = z * load[:, 1:] + (1.0 - z) * load[:, :-1]
    return _march_forward(op, combined, x0, v0, "primal")


def solve_adjoint(op, mismatch):
    """Adjoint solve; mismatch[:, m] is the data-misfit source at time node m.

    Marches backward with zero ghost terminal values so that the returned
    multipliers make the parameter gradient exact for the discrete objective.
    """
    if mismatch.ndim != 2 or mismatch.shape[1] < 2:
        raise ValueError("mismatch must provide one column per time node")
    return _march_backward(op, mismatch, "adjoint")


def solve_linearized_primal(op, direction_stiffness, state):
    """Tangent solve for a parameter direction; source is -A_dir applied midstep."""
    sources = -(direction_stiffness @ state.intermediate())
    n = sources.shape[0]
    return _march_forward(op, sources, np.zeros(n), np.zeros(n), "lin_primal")


def solve_linearized_adjoint(op, mismatch):
    """Adjoint of the tangent system; identical recursion, linearized sources."""
    return _march_backward(op, mismatch, "lin_adjoint")


# -- binary trajectory/basis interchange --------------------------------------

_MAGIC = b"PIM1"
_DTYPES = {0: np.dtype("<f8")}


def write_matrix(path, matrix):
    """Dump a dense matrix column-major with a fixed 16-byte header."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("only 2-d matrices are supported")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", m.shape[0], m.shape[1], 0))
        fh.write(np.asfortranarray(m).tobytes(order="F"))


def read_matrix(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != _MAGIC:
            raise ValueError(f"{path} is not a matrix dump")
        rows, cols, code = struct.unpack("<III", head[4:])
        if code not in _DTYPES:
            raise ValueError(f"unknown dtype code {code}")
        data = np.frombuffer(fh.read(), dtype=_DTYPES[code])
    if data.size != rows * cols:
        raise ValueError("matrix dump truncated")
    return data.reshape((rows, cols), order="F").copy()


def write_trajectory(path, traj):
    """Store displacement and velocity stacked row-wise."""
    write_matrix(path, np.vstack([traj.u, traj.v]))


def read_trajectory(path, dt, zeta, role="primal"):
    m = read_matrix(path)
    if m.shape[0] % 2:
        raise ValueError("trajectory dump must stack u over v")
    n = m.shape[0] // 2
    return Trajectory(m[:n], m[n:], dt, zeta, role)
