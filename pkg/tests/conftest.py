import numpy as np
import pytest

from plateid.model import (
    Grid,
    LoadSignal,
    MaterialSpec,
    assemble_load,
    assemble_observation,
    assemble_operators,
)
from plateid.objective import FomModel


def make_grid2d(cells=(3, 3), extent=1.0, dirichlet="all"):
    faces = ("xmin", "xmax", "ymin", "ymax") if dirichlet == "all" else tuple(dirichlet)
    return Grid(((0.0, extent), (0.0, extent)), cells, faces)


def make_family(grid=None, lam=2.0, mu=1.0, rho=1.0, parameter="all"):
    grid = grid or make_grid2d()
    return assemble_operators(grid, MaterialSpec(lam, mu, rho, parameter))


def make_problem(
    cells=(4, 4),
    extent=2.0,
    K=8,
    T=2.0,
    zeta=0.5,
    lam=2.0,
    mu=1.0,
    rho=1.0,
    obs_kind="full",
    q_true=None,
    noise=0.0,
    seed=0,
    parameter="all",
):
    """Small end-to-end problem: truth solve, optional noise, assembled model."""
    grid = make_grid2d(cells, extent)
    family = make_family(grid, lam, mu, rho, parameter)
    if obs_kind == "full":
        obs = assemble_observation(grid, family, "full")
    else:
        obs = assemble_observation(
            grid, family, "sensors", {"kind": "grid", "count": 3, "margin": 1}
        )
    dt = T / K
    times = dt * np.arange(K + 1)
    signal = LoadSignal(
        amplitude=1.0,
        frequency=1.0 / T * 2,
        t_center=T / 4,
        t_width=T / 6,
        center=(extent / 2, extent / 2),
        width=extent / 2,
    )
    load = assemble_load(grid, family, signal, times)

    if q_true is None:
        q_true = np.ones(family.n_params)
    model_probe = FomModel(
        family=family,
        obs=obs,
        load=load,
        data=np.zeros((obs.n_obs, K + 1)),
        dt=dt,
        zeta=zeta,
        q_center=np.ones(family.n_params),
    )
    truth_state = model_probe.solve_primal(q_true)
    clean = obs.apply(truth_state.u)
    data = np.array(clean)
    delta = 0.0
    if noise > 0:
        rng = np.random.default_rng(seed)
        xi = rng.uniform(-1.0, 1.0, size=(obs.n_obs, K))
        xi_norm = np.sqrt(dt * obs.obs_norm_sq_columns(xi).sum())
        clean_norm = np.sqrt(dt * obs.obs_norm_sq_columns(clean[:, 1:]).sum())
        delta = noise * clean_norm
        data[:, 1:] = clean[:, 1:] + delta * xi / xi_norm
    model = FomModel(
        family=family,
        obs=obs,
        load=load,
        data=data,
        dt=dt,
        zeta=zeta,
        q_center=np.ones(family.n_params),
    )
    return {
        "grid": grid,
        "family": family,
        "obs": obs,
        "load": load,
        "model": model,
        "q_true": q_true,
        "delta": delta,
        "truth_state": truth_state,
    }


@pytest.fixture
def toy_family():
    return make_family()


@pytest.fixture
def toy_problem():
    return make_problem()
