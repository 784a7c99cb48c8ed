"""Adaptive propagation of states and state-transition matrices.

Wraps DOP853 (8th order with embedded 5th/3rd order error control and dense
output) for single states, stacked batches, and the 42-dimensional variational
system.  Event localization uses the integrator's dense output.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from hr4bp import _integrate as fast
from hr4bp.model import (
    ModelParams,
    State,
    acceleration,
    hamiltonian_values,
    momenta_from_velocity,
    potential_hessian,
)

DEFAULT_TOL = 1e-12
DEFAULT_BACKEND = "numba" if fast.NUMBA_AVAILABLE else "scipy"
_MAX_STEPS = 50_000_000

# canonical symplectic form, position-momentum block ordering
J6 = np.block([[np.zeros((3, 3)), np.eye(3)], [-np.eye(3), np.zeros((3, 3))]])


class PropagationError(RuntimeError):
    """Integration failed (step underflow, usually near a primary)."""

    def __init__(self, message, closest_approach=None):
        super().__init__(message)
        self.closest_approach = closest_approach


def _rhs_single(p: ModelParams):
    def rhs(tau, y):
        acc = acceleration(y[None, :3], y[None, 3:6], tau, p)[0]
        return np.concatenate([y[3:6], acc])
    return rhs


def _rhs_batch(p: ModelParams, n: int):
    def rhs(tau, y):
        yy = y.reshape(n, 6)
        acc = acceleration(yy[:, :3], yy[:, 3:6], tau, p)
        return np.concatenate([yy[:, 3:6], acc], axis=1).ravel()
    return rhs


def _rhs_batch_stm(p: ModelParams, n: int):
    w = 2.0 * (1.0 + p.m)

    def rhs(tau, y):
        yy = y.reshape(n, 42)
        pos, vel = yy[:, :3], yy[:, 3:6]
        acc = acceleration(pos, vel, tau, p)
        hess = potential_hessian(pos, tau, p)
        phi = yy[:, 6:].reshape(n, 6, 6)
        dphi = np.empty_like(phi)
        dphi[:, :3, :] = phi[:, 3:, :]
        dphi[:, 3:, :] = hess @ phi[:, :3, :]
        # Coriolis coupling in velocity rows
        dphi[:, 3, :] += w * phi[:, 4, :]
        dphi[:, 4, :] -= w * phi[:, 3, :]
        out = np.empty_like(yy)
        out[:, :3] = vel
        out[:, 3:6] = acc
        out[:, 6:] = dphi.reshape(n, 36)
        return out.ravel()
    return rhs


@dataclass
class Trajectory:
    """Dense solution of one propagation with monotone tau samples."""

    taus: np.ndarray
    states: np.ndarray  # shape (len(taus), 6)
    sol: object = None  # scipy OdeSolution
    params: ModelParams = None

    def state_at(self, tau):
        if self.sol is None:
            raise ValueError("trajectory has no dense output")
        return np.asarray(self.sol(tau))

    def end_state(self) -> State:
        return State.from_vector(self.states[-1], tau=float(self.taus[-1]))

    def hamiltonian_series(self):
        h = np.array([hamiltonian_values(y[None, :], t, self.params)[0]
                      for t, y in zip(self.taus, self.states)])
        return self.taus, h

    def to_csv(self) -> str:
        lines = ["tau,x,y,z,vx,vy,vz,H"]
        _, h = self.hamiltonian_series()
        for t, y, e in zip(self.taus, self.states, h):
            row = ",".join(f"{val:.16e}" for val in (t, *y, e))
            lines.append(row)
        return "\n".join(lines) + "\n"


@dataclass
class StmSolution:
    """Terminal state and state-transition matrix over one arc."""

    state: State
    stm: np.ndarray

    def canonical_stm(self, m: float) -> np.ndarray:
        """STM conjugated to canonical (position, momentum) coordinates."""
        w = 1.0 + m
        t = np.eye(6)
        t[3, 1] = -w
        t[4, 0] = w
        tinv = np.eye(6)
        tinv[3, 1] = w
        tinv[4, 0] = -w
        return t @ self.stm @ tinv


@dataclass(frozen=True)
class EventSpec:
    """Scalar event g(tau, y) localized on the dense output."""

    name: str
    func: Callable
    terminal: bool = True
    direction: float = 0.0


@dataclass
class EventHit:
    name: str
    tau: float
    state: np.ndarray


def _solve(rhs, y0, tau0, dtau, tol, events=None, dense=False, max_step=np.inf):
    if dtau == 0.0:
        raise ValueError("zero-span propagation handled by caller")
    t1 = tau0 + dtau
    try:
        sol = solve_ivp(rhs, (tau0, t1), y0, method="DOP853",
                        rtol=tol, atol=tol, dense_output=dense,
                        events=events, max_step=max_step)
    except (ValueError, FloatingPointError) as exc:
        raise PropagationError(f"integrator failure: {exc}") from exc
    if not sol.success and sol.status != 1:
        r = np.linalg.norm(sol.y[:3, -1]) if sol.y.size else np.nan
        raise PropagationError(
            f"integration stalled at tau = {sol.t[-1]:.6f}: {sol.message}",
            closest_approach=r)
    return sol


def _check_fast_status(status, t_end, where: str):
    if status == fast.STEP_UNDERFLOW:
        raise PropagationError(
            f"step size underflow at tau = {t_end:.6f} during {where}")
    if status == fast.TOO_MANY_STEPS:
        raise PropagationError(f"step budget exhausted during {where}")


def flow(s: State, dtau: float, p: ModelParams, tol: float = DEFAULT_TOL,
         backend: str = None) -> State:
    """Propagate a state by dtau (may be negative)."""
    if dtau == 0.0:
        return s
    if (backend or DEFAULT_BACKEND) == "numba":
        status, t_end, y = fast.integrate(
            0, s.vector, s.tau, s.tau + dtau, tol, tol, np.inf, _MAX_STEPS,
            *fast.pack_params(p))
        _check_fast_status(status, t_end, "flow")
        return State.from_vector(y, tau=s.tau + dtau)
    sol = _solve(_rhs_single(p), s.vector, s.tau, dtau, tol)
    return State.from_vector(sol.y[:, -1], tau=s.tau + dtau)


def flow_states(y0, tau0: float, dtau: float, p: ModelParams,
                tol: float = DEFAULT_TOL, backend: str = None):
    """Propagate stacked (n, 6) states over a common arc; returns (n, 6)."""
    y0 = np.atleast_2d(np.asarray(y0, dtype=float))
    if dtau == 0.0:
        return y0.copy()
    n = y0.shape[0]
    if (backend or DEFAULT_BACKEND) == "numba":
        status, t_end, y = fast.integrate(
            0, y0.ravel(), tau0, tau0 + dtau, tol, tol, np.inf, _MAX_STEPS,
            *fast.pack_params(p))
        _check_fast_status(status, t_end, "flow_states")
        return y.reshape(n, 6)
    sol = _solve(_rhs_batch(p, n), y0.ravel(), tau0, dtau, tol)
    return sol.y[:, -1].reshape(n, 6)


def flow_with_stm(s: State, dtau: float, p: ModelParams,
                  tol: float = DEFAULT_TOL, backend: str = None) -> StmSolution:
    """Propagate state plus 6x6 state-transition matrix."""
    out_y, out_phi = flow_states_with_stm(s.vector[None, :], s.tau, dtau, p,
                                          tol, backend=backend)
    return StmSolution(state=State.from_vector(out_y[0], tau=s.tau + dtau),
                       stm=out_phi[0])


def flow_states_with_stm(y0, tau0: float, dtau: float, p: ModelParams,
                         tol: float = DEFAULT_TOL, backend: str = None):
    """Batched state+STM propagation; returns (states (n,6), stms (n,6,6))."""
    y0 = np.atleast_2d(np.asarray(y0, dtype=float))
    n = y0.shape[0]
    if dtau == 0.0:
        return y0.copy(), np.broadcast_to(np.eye(6), (n, 6, 6)).copy()
    z0 = np.concatenate([y0, np.tile(np.eye(6).ravel(), (n, 1))], axis=1)
    if (backend or DEFAULT_BACKEND) == "numba":
        status, t_end, z = fast.integrate(
            1, z0.ravel(), tau0, tau0 + dtau, tol, tol, np.inf, _MAX_STEPS,
            *fast.pack_params(p))
        _check_fast_status(status, t_end, "flow_states_with_stm")
        zf = z.reshape(n, 42)
    else:
        sol = _solve(_rhs_batch_stm(p, n), z0.ravel(), tau0, dtau, tol)
        zf = sol.y[:, -1].reshape(n, 42)
    return zf[:, :6].copy(), zf[:, 6:].reshape(n, 6, 6).copy()


def flow_until(s: State, p: ModelParams, events: Sequence[EventSpec],
               tau_max: float, tol: float = DEFAULT_TOL,
               forward: bool = True):
    """Propagate until the first terminal event or |dtau| = tau_max.

    Returns (Trajectory, EventHit or None).  Initial-condition hits (event
    already satisfied at tau0) are reported at tau0 without integrating.
    """
    y0 = s.vector
    for ev in events:
        val = ev.func(s.tau, y0)
        inside = (ev.direction < 0 and val <= 0.0) or \
                 (ev.direction > 0 and val >= 0.0)
        if inside:
            # degenerate start: already past the crossing at tau0
            traj = Trajectory(taus=np.array([s.tau]),
                              states=y0[None, :], sol=None, params=p)
            return traj, EventHit(ev.name, s.tau, y0.copy())

    sign = 1.0 if forward else -1.0
    sci_events = []
    for ev in events:
        def make(evspec):
            def g(tau, y):
                return evspec.func(tau, y)
            g.terminal = evspec.terminal
            # direction is in integration (step) order, also when backward
            g.direction = evspec.direction
            return g
        sci_events.append(make(ev))

    sol = _solve(_rhs_single(p), y0, s.tau, sign * tau_max, tol,
                 events=sci_events, dense=True)
    traj = Trajectory(taus=sol.t.copy(), states=sol.y.T.copy(), sol=sol.sol,
                      params=p)
    hit = None
    if sol.status == 1:
        # first terminal event; scipy already root-polished on dense output
        for spec, t_ev, y_ev in zip(events, sol.t_events, sol.y_events):
            if len(t_ev):
                if hit is None or (sign * t_ev[0] < sign * hit.tau):
                    hit = EventHit(spec.name, float(t_ev[0]), np.asarray(y_ev[0]))
    return traj, hit


def propagate_dense(s: State, dtau: float, p: ModelParams,
                    tol: float = DEFAULT_TOL) -> Trajectory:
    """Propagate with dense output and return the full trajectory."""
    sol = _solve(_rhs_single(p), s.vector, s.tau, dtau, tol, dense=True)
    return Trajectory(taus=sol.t.copy(), states=sol.y.T.copy(), sol=sol.sol,
                      params=p)


def symplectic_defect(stm: np.ndarray, m: float) -> float:
    """Norm of Phi^T J Phi - J for the canonical-coordinate STM."""
    w = 1.0 + m
    t = np.eye(6)
    t[3, 1] = -w
    t[4, 0] = w
    tinv = np.eye(6)
    tinv[3, 1] = w
    tinv[4, 0] = -w
    phi = t @ stm @ tinv
    return float(np.linalg.norm(phi.T @ J6 @ phi - J6))


# Common event factories -----------------------------------------------------

def lunar_distance_event(p: ModelParams, radius: float) -> EventSpec:
    def g(tau, y):
        _, moon = p.primaries(tau)
        return float(np.linalg.norm(y[:3] - moon) - radius)
    return EventSpec("lunar_impact", g, terminal=True, direction=-1.0)


def earth_distance_event(p: ModelParams, radius: float,
                         name: str = "geo_crossing") -> EventSpec:
    def g(tau, y):
        earth, _ = p.primaries(tau)
        return float(np.linalg.norm(y[:3] - earth) - radius)
    return EventSpec(name, g, terminal=True, direction=-1.0)


def escape_radius_event(radius: float) -> EventSpec:
    def g(tau, y):
        return float(np.linalg.norm(y[:3]) - radius)
    return EventSpec("escape", g, terminal=True, direction=1.0)


def plane_crossing_event(index: int = 2, value: float = 0.0,
                         direction: float = 0.0,
                         name: str = "z_cross") -> EventSpec:
    def g(tau, y):
        return float(y[index] - value)
    return EventSpec(name, g, terminal=True, direction=direction)
