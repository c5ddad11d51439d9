"""Second-order macroscopic solver: density plus an advected property field w
(CGARZ flux family), with trajectory-embedded speeds and the material-
derivative acceleration field that feeds the emission models.

Density advances with the same Godunov/cell-transmission kernel as the
first-order solver, built on a per-cell flux Q(rho, w_j); w advances with an
upwind step driven by the embedded speed.  The blend with tracked vehicles
always uses the closest vehicle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .core import (
    CgarzAtFixedW,
    CgarzDiagram,
    ConfigError,
    CutoffShape,
    MacroState2,
    SimulationError,
    SpatialGrid,
    _clamped,
    cgarz_speed,
    cgarz_speed_drho,
    cutoff,
    cutoff_derivative,
)
from .lagrangian import Fleet
from .lwr import (
    FluxSamplingConfig,
    _critical_tables,
    _Embedding,
    _prepared_step,
    max_dt,
)
from .lwr import EmbeddingMode as _Mode

ArrayLike = Union[float, np.ndarray]


def embedded_speed_2(x: ArrayLike, t: float, rho: ArrayLike, w: ArrayLike,
                     fleet: Optional[Fleet], diag: CgarzDiagram,
                     shape: Optional[CutoffShape]) -> ArrayLike:
    """Speed field v(rho, w) blended with the closest tracked vehicle."""
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    rho_arr = _clamped(np.atleast_1d(np.asarray(rho, dtype=float)),
                       0.0, diag.rho_max, "density")
    v = np.asarray(cgarz_speed(rho_arr, w, diag), dtype=float)
    emb = _Embedding(xs, t, fleet, shape, _Mode.CLOSEST_VEHICLE
                     if fleet is not None and len(fleet) else _Mode.NONE)
    out = np.broadcast_to(emb.blended(v), (xs.size,)).copy()
    if np.ndim(x) == 0 and np.ndim(rho) == 0:
        return float(out[0])
    return out


def max_dt_2(fleet: Optional[Fleet], diag: CgarzDiagram, grid: SpatialGrid) -> float:
    """dx / max{fastest tracked speed, V_max} with V_max = max_w v(0, w)."""
    return max_dt(fleet, CgarzAtFixedW(diag, diag.w_right), grid)


def _prepared_inputs(state: MacroState2, grid: SpatialGrid, t: float,
                     diag: CgarzDiagram, fleet: Optional[Fleet],
                     shape: Optional[CutoffShape],
                     sampling: FluxSamplingConfig):
    """Validated fields plus the embedding and speed tables one step needs."""
    rho = _clamped(state.rho, 0.0, diag.rho_max, "density")
    w = _clamped(state.w, diag.w_left, diag.w_right, "property w")
    mode = (_Mode.CLOSEST_VEHICLE if fleet is not None and len(fleet)
            else _Mode.NONE)
    emb = _Embedding(grid.centers(), t, fleet, shape, mode)
    rho_samples = sampling.samples(diag.rho_max)
    u_samples = np.asarray(cgarz_speed(rho_samples[:, None], w[None, :], diag),
                           dtype=float)
    u_own = np.asarray(cgarz_speed(rho, w, diag), dtype=float)
    return rho, w, emb, u_own, rho_samples, u_samples


def boundary_capacities(state: MacroState2, grid: SpatialGrid, t: float,
                        diag: CgarzDiagram, fleet: Optional[Fleet] = None,
                        shape: Optional[CutoffShape] = None,
                        sampling: FluxSamplingConfig = FluxSamplingConfig(),
                        ) -> tuple[float, float]:
    """(receiving capacity of the first cell, sending capacity of the last).

    Computed from the same tables a step builds, so a boundary flux capped by
    these values passes through the step's internal min() unchanged — the
    basis for exact junction conservation in network runs.
    """
    rho, _, emb, u_own, rho_samples, u_samples = _prepared_inputs(
        state, grid, t, diag, fleet, shape, sampling)
    speed_own = np.broadcast_to(np.asarray(emb.blended(u_own), dtype=float),
                                (emb.n_points,))
    sigma, flux_max = _critical_tables(emb, rho_samples, u_samples)
    flux_own = rho * speed_own
    below = rho <= sigma
    recv = float(flux_max[0]) if below[0] else float(flux_own[0])
    send = float(flux_own[-1]) if below[-1] else float(flux_max[-1])
    return recv, send


def step(state: MacroState2, grid: SpatialGrid, t: float, dt: float,
         diag: CgarzDiagram, fleet: Optional[Fleet] = None,
         shape: Optional[CutoffShape] = None,
         sampling: FluxSamplingConfig = FluxSamplingConfig(),
         left_flux: float = 0.0, right_flux: Optional[float] = None,
         left_w: Optional[float] = None,
         return_fluxes: bool = False):
    """One step of the two-field scheme.

    rho: conservative update with sending/receiving built from Q = rho * V
    and a per-cell critical density sampled with that cell's w.
    w: upwind advection w_j -= (dt/dx) V_j (w_j - w_{j-1}), the left ghost
    carrying left_w (defaults to the first cell, homogeneous Neumann).

    Returns the new state, or (state, interface_fluxes) with return_fluxes.
    """
    if state.rho.size != grid.n_cells:
        raise ConfigError(
            f"state has {state.rho.size} cells but the grid has {grid.n_cells}"
        )
    bound = max_dt_2(fleet, diag, grid)
    if dt > bound * (1.0 + 1e-12):
        raise SimulationError(f"time step {dt} exceeds the admissible bound {bound}")
    rho, w, emb, u_own, rho_samples, u_samples = _prepared_inputs(
        state, grid, t, diag, fleet, shape, sampling)
    rho_new, fluxes, speed_own = _prepared_step(
        rho, grid, emb, u_own, rho_samples, u_samples, dt, left_flux, right_flux)
    if left_w is None:
        ghost_w = w[0]
    else:
        ghost_w = float(_clamped(np.asarray(float(left_w)), diag.w_left,
                                 diag.w_right, "left boundary w"))
    w_upstream = np.concatenate(([ghost_w], w[:-1]))
    w_new = w - (dt / grid.dx_km) * speed_own * (w - w_upstream)
    new_state = MacroState2(rho=rho_new, w=w_new)
    if return_fluxes:
        return new_state, fluxes
    return new_state


# ---------------------------------------------------------------------------
# acceleration field
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AccelerationField:
    """Per-cell acceleration of the embedded speed field, in km/h^2."""

    a_kmh2: np.ndarray

    def __post_init__(self) -> None:
        a = np.array(self.a_kmh2, dtype=float)
        if a.ndim != 1 or not np.all(np.isfinite(a)):
            raise ConfigError("acceleration field must be a finite 1-d array")
        a.flags.writeable = False
        object.__setattr__(self, "a_kmh2", a)


def acceleration_field(state: MacroState2, grid: SpatialGrid, t: float,
                       diag: CgarzDiagram, fleet: Optional[Fleet] = None,
                       shape: Optional[CutoffShape] = None) -> AccelerationField:
    """Material derivative of the embedded speed, a = DV/Dt, per cell.

    The density-coupling term uses the centered finite difference of the
    discrete speed field (its total spatial variation); the remaining terms
    use the closed-form partials in x and t at fixed (rho, w):

        a = -rho V_rho dV/dx|_field + V_t + V V_x

    with V_rho = (chi 2 pdot^2/(pdot+v)^2 + (1-chi)) v_rho,
         V_t   = chi' pdot v (v-pdot)/(pdot+v) + chi 2 pddot v^2/(pdot+v)^2,
         V_x   = chi' v (pdot-v)/(pdot+v),

    which reproduces DV/Dt exactly on solutions of the two-field system.
    Cells where pdot + v = 0 get a = 0 by the zero-speed convention.
    """
    rho = _clamped(state.rho, 0.0, diag.rho_max, "density")
    w = _clamped(state.w, diag.w_left, diag.w_right, "property w")
    centers = grid.centers()
    v = np.asarray(cgarz_speed(rho, w, diag), dtype=float)
    v_rho = np.asarray(cgarz_speed_drho(rho, w, diag), dtype=float)

    chi = np.zeros_like(v)
    chi_prime = np.zeros_like(v)
    p_dot = np.zeros_like(v)
    p_ddot = np.zeros_like(v)
    if fleet is not None and len(fleet):
        if shape is None:
            raise ConfigError("vehicle embedding needs a cutoff shape")
        _, positions, speeds, accels = fleet.snapshot(t)
        if positions.size:
            xi = centers[:, None] - positions[None, :]
            nearest = np.argmin(np.abs(xi), axis=1)
            xi_k = np.take_along_axis(xi, nearest[:, None], axis=1)[:, 0]
            chi = np.asarray(cutoff(xi_k, shape))
            chi_prime = np.asarray(cutoff_derivative(xi_k, shape))
            p_dot = speeds[nearest]
            p_ddot = accels[nearest]

    denom = p_dot + v
    moving = denom > 0.0
    safe = np.where(moving, denom, 1.0)
    blend = 2.0 * p_dot * v / safe
    vel_field = chi * blend + (1.0 - chi) * v
    vel_x_field = np.gradient(vel_field, grid.dx_km)

    factor = chi * 2.0 * p_dot * p_dot / (safe * safe) + (1.0 - chi)
    vel_x_expl = chi_prime * v * (p_dot - v) / safe
    vel_t_expl = (chi_prime * p_dot * v * (v - p_dot) / safe
                  + chi * 2.0 * p_ddot * v * v / (safe * safe))
    a = (-rho * factor * v_rho * vel_x_field
         + vel_t_expl + vel_field * vel_x_expl)
    return AccelerationField(a_kmh2=np.where(moving, a, 0.0))
