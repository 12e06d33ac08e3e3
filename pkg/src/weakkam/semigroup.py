"""Semi-Lagrangian realizations of the backward and forward solution semigroups.

One backward step pulls values from the foot points x - v*dt along straight
characteristics, charges the running cost dt*L(x,v) from the Lagrangian
table, and applies the contact correction -dt*W(x,u):

    u'(x_i) = min_j [ u(x_i - v_j dt) + dt L(x_i, v_j) ] - dt W(x_i, u(x_i))

The forward step is the mirror image (max, +dt W).  The velocity search is
exhaustive over the table's velocity grid (L may be nonsmooth), foot points
use monotone periodic linear interpolation, and the contact term is treated
explicitly by default; "picard" mode re-evaluates W at the updated value by
scalar fixed-point iteration, which contracts because dt*Lambda <= 1/2.

Stability requirements enforced at construction:
    dt * Lambda <= 1/2        (contact term)
    dt * vmax   <= period/2   (foot points stay within half the torus)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import Field, TorusGrid, lipschitz
from .hamiltonian import HamiltonianSpec, LagrangianTable

__all__ = [
    "CFLError",
    "PicardError",
    "Stepper",
    "backward_step",
    "forward_step",
    "evolve",
    "EvolveResult",
    "stationary_solve",
    "StationaryResult",
]


class CFLError(ValueError):
    """Time step too large for the declared bounds."""


class PicardError(RuntimeError):
    def __init__(self, node: int, delta: float):
        super().__init__(f"picard iteration did not converge at node {node} (|delta|={delta:.3e})")
        self.node = node


class GatherPlan:
    """Precomputed periodic interpolation stencil for foot points x_i -+ v_j*dt."""

    def __init__(self, g: TorusGrid, vgrid: np.ndarray, dt: float, backward: bool):
        sign = -1.0 if backward else 1.0
        shift = sign * vgrid * dt / g.h
        base = np.floor(shift)
        theta = (shift - base)[:, None]
        idx0 = (np.arange(g.n)[None, :] + base.astype(np.int64)[:, None]) % g.n
        self.idx0 = np.ascontiguousarray(idx0)
        self.idx1 = np.ascontiguousarray((idx0 + 1) % g.n)
        self.w0 = 1.0 - theta
        self.w1 = theta

    def apply(self, u: np.ndarray) -> np.ndarray:
        return u[self.idx0] * self.w0 + u[self.idx1] * self.w1


class Stepper:
    """Reusable one-step operator bound to (spec, table, dt, mode)."""

    def __init__(self, spec: HamiltonianSpec, lt: LagrangianTable, dt: float,
                 mode: str = "explicit"):
        if mode not in ("explicit", "picard"):
            raise ValueError(f"mode must be 'explicit' or 'picard', got {mode!r}")
        if dt <= 0:
            raise CFLError("dt must be positive")
        if dt * spec.lambda_bound > 0.5 + 1e-12:
            raise CFLError(
                f"dt*Lambda = {dt * spec.lambda_bound:.3g} exceeds 1/2")
        if dt * lt.vmax > lt.grid.period / 2 + 1e-12:
            raise CFLError(
                f"dt*vmax = {dt * lt.vmax:.3g} exceeds period/2 = {lt.grid.period / 2:.3g}")
        self.spec = spec
        self.lt = lt
        self.dt = dt
        self.mode = mode
        self.xs = lt.grid.nodes
        self._back = GatherPlan(lt.grid, lt.vgrid, dt, backward=True)
        self._fwd = GatherPlan(lt.grid, lt.vgrid, dt, backward=False)
        self._dtLT = np.ascontiguousarray(dt * lt.L.T)

    def _contact(self, u: np.ndarray) -> np.ndarray:
        out = self.spec.W.evaluate({"x": self.xs, "u": u})
        return np.broadcast_to(np.asarray(out, dtype=float), u.shape)

    def _resolve(self, base: np.ndarray, u: np.ndarray, sign: float) -> np.ndarray:
        if self.mode == "explicit":
            return base + sign * self.dt * self._contact(u)
        z = base + sign * self.dt * self._contact(u)
        for _ in range(50):
            z_new = base + sign * self.dt * self._contact(z)
            delta = np.abs(z_new - z)
            z = z_new
            if delta.max() <= 1e-13:
                return z
        raise PicardError(int(np.argmax(delta)), float(delta.max()))

    def backward_values(self, u: np.ndarray) -> np.ndarray:
        base = (self._back.apply(u) + self._dtLT).min(axis=0)
        return self._resolve(base, u, -1.0)

    def forward_values(self, u: np.ndarray) -> np.ndarray:
        base = (self._fwd.apply(u) - self._dtLT).max(axis=0)
        return self._resolve(base, u, +1.0)


def backward_step(u: Field, spec: HamiltonianSpec, lt: LagrangianTable, dt: float,
                  mode: str = "explicit") -> Field:
    return Field(u.grid, Stepper(spec, lt, dt, mode).backward_values(u.values))


def forward_step(u: Field, spec: HamiltonianSpec, lt: LagrangianTable, dt: float,
                 mode: str = "explicit") -> Field:
    return Field(u.grid, Stepper(spec, lt, dt, mode).forward_values(u.values))


@dataclass
class EvolveResult:
    snapshots: list          # [(t, Field)], strictly increasing times
    final: Field
    dt: float
    steps: int
    lipschitz: list          # discrete Lipschitz constant of each snapshot
    final_residual: float    # sup|u_k - u_{k-1}| / dt at the last step


def evolve(phi: Field, spec: HamiltonianSpec, lt: LagrangianTable, T: float, dt: float,
           mode: str = "explicit", direction: str = "backward",
           snap_every: int = 0) -> EvolveResult:
    """Repeated stepping from phi over steps = ceil(T/dt)."""
    if T <= 0:
        raise ValueError("horizon T must be positive")
    if direction not in ("backward", "forward"):
        raise ValueError(f"direction must be 'backward' or 'forward', got {direction!r}")
    stepper = Stepper(spec, lt, dt, mode)
    advance = stepper.backward_values if direction == "backward" else stepper.forward_values
    steps = math.ceil(T / dt - 1e-12)
    u = phi.values.copy()
    snapshots = []
    lip = []
    prev_delta = 0.0
    for k in range(1, steps + 1):
        nu = advance(u)
        if not np.all(np.isfinite(nu)):
            raise ValueError(f"nonfinite values at t={k * dt:.6g}")
        prev_delta = float(np.max(np.abs(nu - u)))
        u = nu
        if (snap_every and k % snap_every == 0) or k == steps:
            f = Field(phi.grid, u)
            snapshots.append((k * dt, f))
            lip.append(lipschitz(f))
    final = snapshots[-1][1]
    return EvolveResult(snapshots, final, dt, steps, lip, prev_delta / dt)


@dataclass
class StationaryResult:
    field: Field
    residual: float        # sup|u_{k+1} - u_k| / dt at the final iterate
    converged: bool
    steps: int
    t_elapsed: float


def stationary_solve(phi0: Field, spec: HamiltonianSpec, lt: LagrangianTable, dt: float,
                     tol: float, T_max: float, mode: str = "explicit") -> StationaryResult:
    """Evolve backward until the per-unit-time residual drops below tol.

    Returns the last iterate either way; non-convergence within T_max is
    reported through the flag, not raised, since a residual stall at the
    scheme consistency level is a meaningful outcome.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    stepper = Stepper(spec, lt, dt, mode)
    u = phi0.values.copy()
    max_steps = math.ceil(T_max / dt)
    residual = math.inf
    for k in range(1, max_steps + 1):
        nu = stepper.backward_values(u)
        if not np.all(np.isfinite(nu)):
            raise ValueError(f"nonfinite values at t={k * dt:.6g}")
        residual = float(np.max(np.abs(nu - u))) / dt
        u = nu
        if residual <= tol:
            return StationaryResult(Field(phi0.grid, u), residual, True, k, k * dt)
    return StationaryResult(Field(phi0.grid, u), residual, False, max_steps, max_steps * dt)
