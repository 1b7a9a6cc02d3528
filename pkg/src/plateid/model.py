"""Problem assembly: grids, materials, affine stiffness families, sensing, loads.

The stiffness field is a nodal hat-function expansion on the grid.  Every
coefficient attached to a node in the designated parameter set is free; all
other coefficients are frozen at one and folded into the base matrix.  All
spatial integrals use vertex (Gauss-Lobatto) quadrature, which lumps the mass
matrix and localizes each free coefficient's stiffness contribution to the
quadrature points sitting on its node.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

FACE_NAMES = ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax")
AXIS_OF_FACE = {name: i // 2 for i, name in enumerate(FACE_NAMES)}
SIDE_OF_FACE = {name: i % 2 for i, name in enumerate(FACE_NAMES)}


class ConfigError(ValueError):
    """Raised on invalid problem definitions (grids, sensors, bounds)."""


@dataclass(frozen=True)
class Grid:
    """Axis-aligned tensor-product grid with multilinear elements.

    extents   : ((lo, hi), ...) per axis, hi > lo
    cells     : number of cells per axis, >= 1
    dirichlet : face names where displacement is clamped to zero
    """

    extents: tuple
    cells: tuple
    dirichlet: tuple = ()

    def __post_init__(self):
        if len(self.extents) != len(self.cells):
            raise ConfigError("extents and cells must have matching length")
        if self.dim not in (2, 3):
            raise ConfigError("only 2-d and 3-d grids are supported")
        for (lo, hi), n in zip(self.extents, self.cells):
            if not hi > lo:
                raise ConfigError(f"degenerate extent ({lo}, {hi})")
            if n < 1:
                raise ConfigError("each axis needs at least one cell")
        valid = FACE_NAMES[: 2 * self.dim]
        for name in self.dirichlet:
            if name not in valid:
                raise ConfigError(f"unknown face {name!r} for a {self.dim}-d grid")

    @property
    def dim(self):
        return len(self.cells)

    @property
    def node_counts(self):
        return tuple(n + 1 for n in self.cells)

    @property
    def n_nodes(self):
        return int(np.prod(self.node_counts))

    @property
    def h(self):
        return tuple((hi - lo) / n for (lo, hi), n in zip(self.extents, self.cells))

    def axis_coords(self, axis):
        lo, hi = self.extents[axis]
        return np.linspace(lo, hi, self.node_counts[axis])

    def node_coords(self):
        """All node coordinates, row-major over the node grid, shape (n_nodes, dim)."""
        axes = [self.axis_coords(a) for a in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def node_multi_index(self):
        grids = np.indices(self.node_counts).reshape(self.dim, -1)
        return grids.T

    def face_node_mask(self, face):
        axis = AXIS_OF_FACE[face]
        side = SIDE_OF_FACE[face]
        idx = self.node_multi_index()[:, axis]
        return idx == (0 if side == 0 else self.cells[axis])

    def constrained_node_mask(self):
        mask = np.zeros(self.n_nodes, dtype=bool)
        for face in self.dirichlet:
            mask |= self.face_node_mask(face)
        return mask

    def free_node_rank(self):
        """rank[node] = index among free nodes, -1 for constrained nodes."""
        mask = self.constrained_node_mask()
        rank = -np.ones(self.n_nodes, dtype=np.int64)
        rank[~mask] = np.arange(int((~mask).sum()))
        return rank

    @property
    def n_free_nodes(self):
        return int((~self.constrained_node_mask()).sum())

    @property
    def n_dofs(self):
        return self.n_free_nodes * self.dim

    def interpolate(self, fn):
        """Nodal interpolation of a vector field onto the free displacement dofs.

        fn maps an (n, dim) coordinate array to (n, dim) values.
        """
        vals = np.asarray(fn(self.node_coords()), dtype=float)
        if vals.shape != (self.n_nodes, self.dim):
            raise ConfigError("interpolated field has wrong shape")
        free = ~self.constrained_node_mask()
        return vals[free].ravel()


@dataclass(frozen=True)
class MaterialSpec:
    """Isotropic elastic material plus the set of nodes carrying free coefficients.

    lam, mu   : Lame parameters (already scaled to grid units, see cli.scale_material)
    rho       : mass density
    parameter : "all", ("layer", axis, index), or ("nodes", tuple_of_flat_indices)
    coefficient_stride : the coefficient lattice keeps every stride-th grid node
        along each varying axis; intermediate nodes get multilinearly
        interpolated values.  Stride 1 (default) puts one coefficient on every
        node.  Larger strides decouple the state resolution from the dimension
        of the identified field, so the mesh can be refined while the inverse
        problem stays fixed.
    """

    lam: float
    mu: float
    rho: float
    parameter: object = "all"
    coefficient_stride: int = 1

    def __post_init__(self):
        if self.lam <= 0 or self.mu <= 0 or self.rho <= 0:
            raise ConfigError("material constants must be positive")
        if int(self.coefficient_stride) != self.coefficient_stride or self.coefficient_stride < 1:
            raise ConfigError("coefficient_stride must be a positive integer")

    def _varying_axes(self, grid):
        """Axes along which the coefficient field varies, plus the node sheet."""
        if self.parameter == "all":
            return list(range(grid.dim)), None
        kind = self.parameter[0]
        if kind == "layer":
            _, axis, index = self.parameter
            if index < 0 or index >= grid.node_counts[axis]:
                raise ConfigError("parameter layer index out of range")
            return [a for a in range(grid.dim) if a != axis], (axis, index)
        raise ConfigError(
            "coefficient_stride > 1 needs an 'all' or 'layer' parameter selector"
        )

    def _coarse_counts(self, grid, axes):
        s = int(self.coefficient_stride)
        for a in axes:
            if grid.cells[a] % s:
                raise ConfigError(
                    f"cells along axis {a} must be divisible by coefficient_stride {s}"
                )
        return tuple(grid.cells[a] // s + 1 for a in axes)

    def parameter_nodes(self, grid):
        """Flat node indices carrying free coefficients, in coefficient order."""
        s = int(self.coefficient_stride)
        if s == 1:
            if self.parameter == "all":
                return np.arange(grid.n_nodes)
            kind = self.parameter[0]
            if kind == "layer":
                _, axis, index = self.parameter
                multi = grid.node_multi_index()
                if index < 0 or index >= grid.node_counts[axis]:
                    raise ConfigError("parameter layer index out of range")
                return np.flatnonzero(multi[:, axis] == index)
            if kind == "nodes":
                nodes = np.asarray(self.parameter[1], dtype=np.int64)
                if nodes.size == 0 or nodes.min() < 0 or nodes.max() >= grid.n_nodes:
                    raise ConfigError("explicit parameter node list out of range")
                return np.unique(nodes)
            raise ConfigError(f"unknown parameter selector {self.parameter!r}")
        axes, sheet = self._varying_axes(grid)
        self._coarse_counts(grid, axes)
        multi = grid.node_multi_index()
        mask = np.ones(grid.n_nodes, dtype=bool)
        if sheet is not None:
            mask &= multi[:, sheet[0]] == sheet[1]
        for a in axes:
            mask &= multi[:, a] % s == 0
        return np.flatnonzero(mask)

    def parameter_grid_shape(self, grid):
        """Logical shape of the free-coefficient array, for field dumps."""
        if int(self.coefficient_stride) > 1:
            axes, _ = self._varying_axes(grid)
            return self._coarse_counts(grid, axes)
        if self.parameter == "all":
            return grid.node_counts
        if self.parameter[0] == "layer":
            _, axis, _ = self.parameter
            return tuple(n for a, n in enumerate(grid.node_counts) if a != axis)
        return (len(self.parameter_nodes(grid)),)

    def coefficient_maps(self, grid):
        """Node-level coefficient interpolation: (prolongation, frozen weight).

        The prolongation is (n_nodes, n_params) sparse; row i holds the
        interpolation weights of the free coefficients at node i.  The frozen
        weight vector carries the multiplier contributed by frozen material
        (scaled by the frozen value at evaluation time).  Rows of nodes
        outside the varying sheet have weight entirely on the frozen part.
        """
        n_nodes = grid.n_nodes
        s = int(self.coefficient_stride)
        if s == 1:
            nodes = self.parameter_nodes(grid)
            n_p = len(nodes)
            prolong = sp.csr_matrix(
                (np.ones(n_p), (nodes, np.arange(n_p))), shape=(n_nodes, n_p)
            )
            frozen = np.ones(n_nodes)
            frozen[nodes] = 0.0
            return prolong, frozen
        axes, sheet = self._varying_axes(grid)
        counts = self._coarse_counts(grid, axes)
        multi = grid.node_multi_index()
        if sheet is None:
            sheet_nodes = np.arange(n_nodes)
        else:
            sheet_nodes = np.flatnonzero(multi[:, sheet[0]] == sheet[1])
        cell_idx, local = [], []
        for a in axes:
            m = multi[sheet_nodes, a]
            c = np.minimum(m // s, grid.cells[a] // s - 1)
            cell_idx.append(c)
            local.append((m - c * s) / float(s))
        rows, cols, vals = [], [], []
        for corner in range(1 << len(axes)):
            w = np.ones(len(sheet_nodes))
            corner_idx = []
            for k in range(len(axes)):
                bit = (corner >> k) & 1
                w = w * (local[k] if bit else 1.0 - local[k])
                corner_idx.append(cell_idx[k] + bit)
            keep = w > 0.0
            flat = np.ravel_multi_index([ci[keep] for ci in corner_idx], counts)
            rows.append(sheet_nodes[keep])
            cols.append(flat)
            vals.append(w[keep])
        prolong = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_nodes, int(np.prod(counts))),
        )
        frozen = np.ones(n_nodes)
        frozen[sheet_nodes] = 0.0
        return prolong, frozen


@dataclass
class ParameterVector:
    """Free stiffness coefficients with box bounds."""

    values: np.ndarray
    lower: float = 1e-20
    upper: float = 1e20

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not self.lower < self.upper:
            raise ConfigError("parameter bounds must satisfy lower < upper")

    def admissible(self, tol=0.0):
        return bool(
            np.all(self.values >= self.lower - tol)
            and np.all(self.values <= self.upper + tol)
        )

    def projected(self):
        return ParameterVector(
            np.clip(self.values, self.lower, self.upper), self.lower, self.upper
        )

    def copy_with(self, values):
        return ParameterVector(np.array(values, dtype=float), self.lower, self.upper)


def project_admissible(q):
    """Componentwise projection onto the admissible box (exact for a diagonal norm)."""
    return q.projected()


def _derivative_matrix(grid, axis, free_rank):
    """Vertex-quadrature derivative along one axis, rows = quadrature points.

    Row (cell, corner) evaluates the axis-derivative of a scalar nodal field at
    that cell corner; the value only involves the two nodes of the edge through
    the corner.  Columns are restricted to free node ranks (clamped nodes read 0).
    """
    dim = grid.dim
    n_corners = 1 << dim
    cells_multi = np.indices(grid.cells).reshape(dim, -1).T  # (ncells, dim)
    ncells = cells_multi.shape[0]
    h = grid.h[axis]

    rows, cols, vals = [], [], []
    for corner in range(n_corners):
        offs = np.array([(corner >> a) & 1 for a in range(dim)])
        qp = np.arange(ncells) * n_corners + corner
        hi_multi = cells_multi + offs
        hi_multi[:, axis] = cells_multi[:, axis] + 1
        lo_multi = cells_multi + offs
        lo_multi[:, axis] = cells_multi[:, axis]
        hi = np.ravel_multi_index(hi_multi.T, grid.node_counts)
        lo = np.ravel_multi_index(lo_multi.T, grid.node_counts)
        for nodes, sign in ((hi, 1.0), (lo, -1.0)):
            r = free_rank[nodes]
            keep = r >= 0
            rows.append(qp[keep])
            cols.append(r[keep])
            vals.append(np.full(keep.sum(), sign / h))
    nqp = ncells * n_corners
    nfree = int((free_rank >= 0).sum())
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nqp, nfree),
    )


def _expand_to_dofs(scalar_mat, comp, dim):
    """Map a (nqp x n_free_nodes) scalar operator onto interleaved vector dofs."""
    m = scalar_mat.tocoo()
    return sp.csr_matrix(
        (m.data, (m.row, m.col * dim + comp)),
        shape=(m.shape[0], m.shape[1] * dim),
    )


class AffineOperatorFamily:
    """Stiffness family A(q) = A0 + sum_p q_p A_p plus the grid's Gram matrices.

    Evaluation runs over a fixed union sparsity pattern: every quadrature point
    contributes a rank-one-in-coefficient update, so A(q) is a weighted bincount
    into precomputed slots.  Also carries the lumped kinetic Gram (diagonal),
    the displacement-space Gram (lumped mass plus gradient Gram), and the
    machinery for parameter-direction products used by gradients.
    """

    def __init__(self, grid, material):
        self.grid = grid
        self.material = material
        dim = grid.dim
        self.dim = dim
        free_rank = grid.free_node_rank()
        self.free_rank = free_rank
        self.n_dofs = grid.n_dofs

        n_corners = 1 << dim
        cells_multi = np.indices(grid.cells).reshape(dim, -1).T
        ncells = cells_multi.shape[0]
        self.n_qp = ncells * n_corners
        self.qp_weight = float(np.prod(grid.h)) / n_corners

        # node sitting on each quadrature point, in qp order
        qp_node = np.empty(self.n_qp, dtype=np.int64)
        for corner in range(n_corners):
            offs = np.array([(corner >> a) & 1 for a in range(dim)])
            nodes = np.ravel_multi_index((cells_multi + offs).T, grid.node_counts)
            qp_node[np.arange(ncells) * n_corners + corner] = nodes
        self.qp_node = qp_node

        param_nodes = material.parameter_nodes(grid)
        self.param_nodes = param_nodes
        prolong_nodes, frozen_nodes = material.coefficient_maps(grid)
        self.n_params = prolong_nodes.shape[1]
        assert self.n_params == len(param_nodes), "coefficient maps disagree on count"
        self._prolong = prolong_nodes.tocsr()[qp_node]  # (n_qp, n_params)
        self._prolong_t = self._prolong.T.tocsr()
        self._qp_frozen = frozen_nodes[qp_node]

        dmats = [_derivative_matrix(grid, a, free_rank) for a in range(dim)]
        self._scalar_dmats = dmats

        # strain-type forms: combined stiffness is sum_f coef_f * Bf' W(q) Bf
        forms = []
        div = sum(_expand_to_dofs(dmats[a], a, dim) for a in range(dim))
        forms.append((material.lam, div.tocsr()))
        for a in range(dim):
            forms.append((2.0 * material.mu, _expand_to_dofs(dmats[a], a, dim)))
        for a in range(dim):
            for b in range(a + 1, dim):
                eps = 0.5 * (
                    _expand_to_dofs(dmats[a], b, dim) + _expand_to_dofs(dmats[b], a, dim)
                )
                forms.append((4.0 * material.mu, eps.tocsr()))
        self.forms = forms

        self._build_pair_tables()
        self._build_grams()

    # -- pattern construction -------------------------------------------------

    def _build_pair_tables(self):
        pair_qp, pair_val, keys = [], [], []
        nd = self.n_dofs
        for coef, mat in self.forms:
            mat = mat.tocsr()
            counts = np.diff(mat.indptr)
            sq = counts * counts
            total = int(sq.sum())
            if total == 0:
                continue
            row_of_pair = np.repeat(np.arange(mat.shape[0]), sq)
            start_of_pair = np.repeat(mat.indptr[:-1], sq)
            offset = np.arange(total) - np.repeat(np.cumsum(sq) - sq, sq)
            c = counts[row_of_pair]
            i_loc = offset // c
            j_loc = offset - i_loc * c
            ii = mat.indices[start_of_pair + i_loc]
            jj = mat.indices[start_of_pair + j_loc]
            vv = mat.data[start_of_pair + i_loc] * mat.data[start_of_pair + j_loc]
            pair_qp.append(row_of_pair)
            pair_val.append(coef * self.qp_weight * vv)
            keys.append(ii.astype(np.int64) * nd + jj.astype(np.int64))
        pair_qp = np.concatenate(pair_qp)
        pair_val = np.concatenate(pair_val)
        keys = np.concatenate(keys)

        uniq, inverse = np.unique(keys, return_inverse=True)
        self._pair_qp = pair_qp
        self._pair_val = pair_val
        self._pair_slot = inverse
        self._nnz = len(uniq)
        rows = (uniq // nd).astype(np.int32)
        cols = (uniq % nd).astype(np.int32)
        indptr = np.searchsorted(rows, np.arange(nd + 1))
        self._pattern_indptr = indptr.astype(np.int32)
        self._pattern_indices = cols

    def _pattern_matrix(self, data):
        return sp.csr_matrix(
            (data, self._pattern_indices, self._pattern_indptr),
            shape=(self.n_dofs, self.n_dofs),
        )

    def _build_grams(self):
        w = self.qp_weight
        vol = np.bincount(self.qp_node, minlength=self.grid.n_nodes) * w
        free = ~self.grid.constrained_node_mask()
        self.mass_diag = np.repeat(vol[free], self.dim)  # density-free kinetic Gram

        nfree = self.grid.n_free_nodes
        lap = sp.csr_matrix((nfree, nfree))
        for dmat in self._scalar_dmats:
            lap = lap + dmat.T @ (w * dmat)
        self.grad_gram = sp.kron(lap, sp.identity(self.dim, format="csr")).tocsr()
        self.space_gram = (
            sp.diags(self.mass_diag) + self.grad_gram
        ).tocsr()  # H1-type displacement Gram

    # -- coefficient fields ---------------------------------------------------

    def _qp_field(self, q, frozen_value=1.0):
        """Stiffness multiplier at each quadrature point for free values q."""
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n_params,):
            raise ValueError(
                f"parameter vector has length {q.shape}, expected {self.n_params}"
            )
        return frozen_value * self._qp_frozen + self._prolong @ q

    def evaluate(self, q):
        """A(q) as CSR on the fixed union pattern."""
        values = q.values if isinstance(q, ParameterVector) else q
        m = self._qp_field(values, frozen_value=1.0)
        data = np.bincount(
            self._pair_slot, weights=self._pair_val * m[self._pair_qp], minlength=self._nnz
        )
        return self._pattern_matrix(data)

    def evaluate_direction(self, d):
        """sum_p d_p A_p (frozen coefficients contribute nothing)."""
        m = self._qp_field(d, frozen_value=0.0)
        data = np.bincount(
            self._pair_slot, weights=self._pair_val * m[self._pair_qp], minlength=self._nnz
        )
        return self._pattern_matrix(data)

    def component_matrix(self, p):
        """A_p for a single free coefficient; intended for tests and small studies."""
        e = np.zeros(self.n_params)
        e[p] = 1.0
        return self.evaluate_direction(e)

    def base_matrix(self):
        """A0: contribution of all frozen coefficients at value one."""
        return self.evaluate(np.zeros(self.n_params))

    # -- parameter-direction products ----------------------------------------

    def _form_products(self, u, v):
        """Per-quadrature-point value sum_f coef_f * (Bf u)(Bf v), times the weight."""
        z = np.zeros(self.n_qp)
        for coef, mat in self.forms:
            z += coef * (mat @ u) * (mat @ v)
        return self.qp_weight * z

    def scatter_to_params(self, z):
        """Accumulate per-quadrature-point scalars onto free coefficients."""
        return self._prolong_t @ z

    def param_product(self, u, v):
        """Vector with entries v' A_p u for every free coefficient p."""
        return self.scatter_to_params(self._form_products(u, v))

    def param_product_sum(self, U, V):
        """sum_j of param_product(U[:, j], V[:, j]) without forming columns."""
        z = np.zeros(self.n_qp)
        for coef, mat in self.forms:
            z += coef * np.einsum("ij,ij->i", mat @ U, mat @ V)
        return self.scatter_to_params(self.qp_weight * z)

    def parameter_jacobian(self, u):
        """Sparse matrix whose column p equals A_p u."""
        out = sp.csr_matrix((self.n_dofs, self.n_params))
        for coef, mat in self.forms:
            weighted = sp.diags(coef * self.qp_weight * (mat @ u)) @ self._prolong
            out = out + mat.T @ weighted
        return out.tocsr()

    def field_on_param_grid(self, q):
        """Reshape free coefficients onto their logical grid for dumps/plots."""
        return np.asarray(q, dtype=float).reshape(
            self.material.parameter_grid_shape(self.grid)
        )


def assemble_operators(grid, material):
    """Build the affine stiffness family and Gram matrices for a problem."""
    return AffineOperatorFamily(grid, material)


# -- observation --------------------------------------------------------------


@dataclass
class ObservationOperator:
    """Maps a displacement dof vector to observation coefficients.

    kind "full"    : identity on dofs, observation Gram = displacement Gram.
    kind "sensors" : one row per (node, component); each row is the face-lumped
                     trace functional of that node's hat function over the
                     measurement surface.
    """

    kind: str
    raw: sp.spmatrix          # functional rows <C phi_i, c_j>, shape (n_obs, n_dofs)
    obs_gram: object          # Gram on observation coefficients (sparse or None=identity)
    quad_form: sp.spmatrix    # raw' M_C^{ -1} raw on dofs
    norm_bound: float         # operator norm from the displacement Gram
    sensor_nodes: np.ndarray = None
    sensor_comps: np.ndarray = None

    @property
    def n_obs(self):
        return self.raw.shape[0]

    def apply(self, u):
        """Observation coefficients of a state (column) or trajectory (matrix)."""
        if self.kind == "full":
            return u
        return self.raw @ u

    def data_term(self, y):
        """Right-hand-side vectors <C phi_i, y> for data coefficients y."""
        return self.raw.T @ y

    def obs_inner(self, a, b):
        if self.obs_gram is None:
            return float(a @ b)
        return float(a @ (self.obs_gram @ b))

    def obs_norm_sq_columns(self, y):
        """Squared observation norm of each column of y."""
        if self.obs_gram is None:
            return np.einsum("ij,ij->j", y, y)
        return np.einsum("ij,ij->j", y, self.obs_gram @ y)


def operator_norm(quad_form, space_gram, tol=1e-12, maxit=500, seed=0):
    """Largest generalized singular value: quad_form v = s^2 * space_gram v.

    Plain power iteration with the Gram factorized once; both matrices are
    symmetric positive semi-definite, the Gram definite.
    """
    n = quad_form.shape[0]
    solve = spla.splu(space_gram.tocsc()).solve
    rng = np.random.default_rng(seed)
    v = np.ones(n) + 0.01 * rng.standard_normal(n)
    v /= np.sqrt(v @ (space_gram @ v))
    prev = 0.0
    for _ in range(maxit):
        w = solve(quad_form @ v)
        nrm = np.sqrt(w @ (space_gram @ w))
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        cur = float(v @ (quad_form @ v))
        if abs(cur - prev) <= tol * max(cur, 1e-300):
            break
        prev = cur
    return float(np.sqrt(cur))


def _sensor_layout_nodes(grid, layout, face):
    """Resolve a sensor layout description to flat node indices on the surface."""
    dim = grid.dim
    if face == "domain":
        in_face_axes = list(range(dim))
        fixed = {}
    else:
        axis = AXIS_OF_FACE[face]
        side = SIDE_OF_FACE[face]
        in_face_axes = [a for a in range(dim) if a != axis]
        fixed = {axis: 0 if side == 0 else grid.cells[axis]}

    counts = [grid.node_counts[a] for a in in_face_axes]
    kind = layout.get("kind", "grid")
    if kind == "explicit":
        idx = np.asarray(layout["nodes"], dtype=np.int64)
        if idx.min() < 0 or idx.max() >= grid.n_nodes:
            raise ConfigError("sensor node index out of range")
        if face != "domain":
            axis = AXIS_OF_FACE[face]
            multi = grid.node_multi_index()[idx]
            if np.any(multi[:, axis] != fixed[axis]):
                raise ConfigError("sensor off the measurement face")
        return idx

    margin = int(layout.get("margin", 1))
    for n in counts:
        if 2 * margin >= n:
            raise ConfigError("sensor margin leaves no admissible positions")

    if kind == "grid":
        per_axis = layout.get("count", 8)
        if np.isscalar(per_axis):
            per_axis = [int(per_axis)] * len(in_face_axes)
        picks = [
            np.unique(np.round(np.linspace(margin, n - 1 - margin, int(c))).astype(int))
            for n, c in zip(counts, per_axis)
        ]
        mesh = np.meshgrid(*picks, indexing="ij")
        face_multi = np.stack([m.ravel() for m in mesh], axis=1)
    elif kind == "edge":
        lo = margin
        stride = int(layout.get("stride", 1))
        if stride < 1:
            raise ConfigError("sensor stride must be a positive integer")
        his = [n - 1 - margin for n in counts]
        for h in his:
            if (h - lo) % stride:
                raise ConfigError(
                    "edge layout does not close: far edge unreachable at this stride"
                )
        mesh = np.meshgrid(*[np.arange(lo, h + 1, stride) for h in his], indexing="ij")
        face_multi = np.stack([m.ravel() for m in mesh], axis=1)
        on_ring = np.zeros(len(face_multi), dtype=bool)
        for a, h in enumerate(his):
            on_ring |= (face_multi[:, a] == lo) | (face_multi[:, a] == h)
        face_multi = face_multi[on_ring]
    else:
        raise ConfigError(f"unknown sensor layout kind {kind!r}")

    multi = np.zeros((len(face_multi), dim), dtype=np.int64)
    for j, a in enumerate(in_face_axes):
        multi[:, a] = face_multi[:, j]
    for a, v in fixed.items():
        multi[:, a] = v
    return np.ravel_multi_index(multi.T, grid.node_counts)


def _surface_weights(grid, face):
    """Lumped surface quadrature weight of every node on the measurement surface."""
    if face == "domain":
        w_axis = []
        for a in range(grid.dim):
            n = grid.node_counts[a]
            w = np.full(n, grid.h[a])
            w[0] = w[-1] = grid.h[a] / 2
            w_axis.append(w)
    else:
        axis = AXIS_OF_FACE[face]
        w_axis = []
        for a in range(grid.dim):
            n = grid.node_counts[a]
            if a == axis:
                w_axis.append(np.ones(n))
            else:
                w = np.full(n, grid.h[a])
                w[0] = w[-1] = grid.h[a] / 2
                w_axis.append(w)
    mesh = np.meshgrid(*w_axis, indexing="ij")
    return np.prod(np.stack([m.ravel() for m in mesh]), axis=0)


def assemble_observation(grid, family, kind, layout=None, face=None, component=0):
    """Build the observation operator and compute its norm bound.

    For sensors, each reading is the surface-lumped integral of one hat
    function against one displacement component: reading = weight * u[node, comp].
    """
    if kind == "full":
        gram = family.space_gram
        op = ObservationOperator(
            kind="full",
            raw=gram,
            obs_gram=gram,
            quad_form=gram,
            norm_bound=1.0,
        )
        op.norm_bound = operator_norm(op.quad_form, family.space_gram)
        return op
    if kind != "sensors":
        raise ConfigError(f"unknown observation kind {kind!r}")

    layout = layout or {"kind": "grid", "count": 8, "margin": 1}
    if face is None:
        face = "domain" if grid.dim == 2 else "xmin"
    nodes = _sensor_layout_nodes(grid, layout, face)
    comps = np.asarray(layout.get("components", [component]), dtype=np.int64)
    if comps.min() < 0 or comps.max() >= grid.dim:
        raise ConfigError("sensor component out of range")

    weights = _surface_weights(grid, face)
    rank = grid.free_node_rank()
    rows, cols, vals = [], [], []
    sensor_nodes, sensor_comps = [], []
    r = 0
    for node in nodes:
        for comp in comps:
            if rank[node] < 0:
                raise ConfigError("sensor placed on a clamped node reads zero")
            rows.append(r)
            cols.append(rank[node] * grid.dim + comp)
            vals.append(weights[node])
            sensor_nodes.append(node)
            sensor_comps.append(comp)
            r += 1
    raw = sp.csr_matrix((vals, (rows, cols)), shape=(r, grid.n_dofs))
    quad = (raw.T @ raw).tocsr()
    op = ObservationOperator(
        kind="sensors",
        raw=raw,
        obs_gram=None,
        quad_form=quad,
        norm_bound=0.0,
        sensor_nodes=np.array(sensor_nodes),
        sensor_comps=np.array(sensor_comps),
    )
    op.norm_bound = operator_norm(quad, family.space_gram)
    return op


# -- loads --------------------------------------------------------------------


@dataclass
class LoadSignal:
    """Separable excitation: windowed sine burst in time, compact bump in space.

    temporal  t -> amplitude * sin(2 pi freq (t - t_center)) * exp(-((t-t_center)/t_width)^2)
    spatial   raised-cosine bump of given widths around center, or uniform 1.
    """

    amplitude: float = 1.0
    direction: tuple = None
    frequency: float = 0.5
    t_center: float = 2.0
    t_width: float = 1.0
    center: tuple = None
    width: object = None  # scalar, per-axis tuple, or None for uniform load

    def temporal(self, t):
        t = np.asarray(t, dtype=float)
        arg = (t - self.t_center) / self.t_width
        return self.amplitude * np.sin(2 * np.pi * self.frequency * (t - self.t_center)) * np.exp(
            -arg * arg
        )

    def spatial(self, coords):
        if self.width is None:
            return np.ones(coords.shape[0])
        center = np.asarray(
            self.center if self.center is not None else np.zeros(coords.shape[1])
        )
        width = self.width
        if np.isscalar(width):
            width = [width] * coords.shape[1]
        out = np.ones(coords.shape[0])
        for a, w in enumerate(width):
            xi = np.clip(np.abs(coords[:, a] - center[a]) / w, 0.0, 1.0)
            out *= np.cos(0.5 * np.pi * xi) ** 2
        return out

    def direction_vector(self, dim):
        d = np.asarray(
            self.direction if self.direction is not None else np.eye(dim)[0], dtype=float
        )
        n = np.linalg.norm(d)
        if n == 0:
            raise ConfigError("load direction must be nonzero")
        return d / n


def assemble_load(grid, family, signal, times):
    """Consistent (lumped) load columns for every time node, shape (n_dofs, K+1)."""
    coords = grid.node_coords()[~grid.constrained_node_mask()]
    shape = signal.spatial(coords)
    direction = signal.direction_vector(grid.dim)
    spatial_dof = (shape[:, None] * direction[None, :]).ravel() * family.mass_diag
    temporal = signal.temporal(np.asarray(times))
    return np.outer(spatial_dof, temporal)


def parameter_hash(q):
    """Stable short hash of a coefficient vector, for caches and reports."""
    v = q.values if isinstance(q, ParameterVector) else np.asarray(q, dtype=float)
    return hashlib.sha256(np.ascontiguousarray(v).tobytes()).hexdigest()[:16]
