"""Occupational-measure linear programming and the Peierls barrier.

Closed probability measures on position x velocity space are discretized
as nonnegative weights w[i,j] on the grid x velocity-grid, subject to

    sum_ij w[i,j] = 1,
    sum_ij w[i,j] * v_j * De_k(x_i) = 0   for every hat function e_k,

with De_k the centered difference of the hat centered at node k.  The
minimum of sum w*(L - pot) over that polytope equals -c of the Hamiltonian
G + pot, and a second-stage program over the optimal face produces the
extremes of integrals of a given function against minimizing measures.

LP solves use a dense two-phase tableau simplex.  Pivots follow Dantzig's
rule while the objective improves and switch permanently to Bland's rule
after a stall, which precludes cycling; leaving-variable ties always break
by smallest basis index.  The occupational programs have few rows but
n*m columns, so they are solved through restricted masters with exact
pricing over all columns (each column has three structural nonzeros),
which certifies global optimality at the same 1e-9 tolerance while
keeping every tableau small.

The Peierls barrier is computed by min-plus dynamic programming on the
normalized running cost L + c, seeded from the diagonal, with the liminf
over horizons realized as a min over a finite horizon list.  A residual
drift of the diagonal minimum between the two largest horizons estimates
any error in the supplied normalization constant and is subtracted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Field, TorusGrid
from .hamiltonian import LagrangianTable
from .semigroup import GatherPlan

__all__ = [
    "LinearProgram",
    "LPError",
    "LPInfeasibleError",
    "LPUnboundedError",
    "lp_simplex",
    "OccupationalMeasure",
    "solve_occupational",
    "extremal_integral",
    "BarrierTable",
    "peierls_barrier",
    "aubry_set",
]

L_CLIP = 1e6


class LPError(RuntimeError):
    pass


class LPInfeasibleError(LPError):
    pass


class LPUnboundedError(LPError):
    pass


@dataclass(frozen=True)
class LinearProgram:
    """minimize c.x subject to A x = b, x >= 0."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if A.ndim != 2 or c.ndim != 1 or b.ndim != 1:
            raise ValueError("A must be a matrix, c and b vectors")
        if A.shape != (b.size, c.size):
            raise ValueError(f"inconsistent LP dimensions: A{A.shape}, c{c.shape}, b{b.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
            raise ValueError("LP data must be finite")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)


def _pivot(tab: np.ndarray, row: int, col: int):
    piv = tab[row] / tab[row, col]
    colv = tab[:, col].copy()
    tab -= np.outer(colv, piv)
    tab[row] = piv


def _simplex_phase(tab: np.ndarray, basis: np.ndarray, var_cols: np.ndarray,
                   tol: float, max_iter: int, stall_limit: int = 50):
    """Run pivots until the reduced costs over var_cols are nonnegative.

    tab carries the constraint rows, a trailing rhs column, and a final
    reduced-cost row whose rhs entry is minus the current objective.
    """
    nrows = tab.shape[0] - 1
    bland = False
    stall = 0
    best_obj = math.inf
    for _ in range(max_iter):
        red = tab[-1, var_cols]
        if bland:
            neg = np.nonzero(red < -tol)[0]
            if neg.size == 0:
                return
            col = int(var_cols[neg[0]])
        else:
            j = int(np.argmin(red))
            if red[j] >= -tol:
                return
            col = int(var_cols[j])
        ratios = tab[:nrows, col]
        ok = ratios > tol
        if not np.any(ok):
            raise LPUnboundedError("objective unbounded below on the feasible set")
        cand = np.nonzero(ok)[0]
        theta = tab[cand, -1] / ratios[cand]
        tmin = theta.min()
        ties = cand[theta <= tmin + 1e-12]
        row = int(ties[np.argmin(basis[ties])])  # smallest basis index: anti-cycling
        _pivot(tab, row, col)
        basis[row] = col
        obj = -tab[-1, -1]
        if obj < best_obj - 1e-12:
            best_obj = obj
            stall = 0
        else:
            stall += 1
            if stall >= stall_limit:
                bland = True
    raise LPError(f"simplex exceeded {max_iter} pivots")


def _solve_standard_form(lp: LinearProgram, tol: float, max_iter: int):
    """Two-phase simplex; returns (x, value, basis, kept_rows, duals)."""
    A = lp.A.copy()
    b = lp.b.copy()
    c = lp.c
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0
    nrows, ncols = A.shape

    # phase 1: drive artificial variables out
    tab = np.zeros((nrows + 1, ncols + nrows + 1))
    tab[:nrows, :ncols] = A
    tab[:nrows, ncols:ncols + nrows] = np.eye(nrows)
    tab[:nrows, -1] = b
    tab[-1, :] = -tab[:nrows, :].sum(axis=0)
    tab[-1, ncols:ncols + nrows] = 0.0
    basis = np.arange(ncols, ncols + nrows)
    var_cols = np.arange(ncols)
    _simplex_phase(tab, basis, var_cols, tol, max_iter)
    if -tab[-1, -1] > 1e-7 * max(1.0, float(np.abs(b).max())):
        raise LPInfeasibleError(f"phase-1 objective {-tab[-1, -1]:.3e} > 0")

    # pivot out artificials still basic (at zero); rows with no pivot are redundant
    keep = np.ones(nrows, dtype=bool)
    for row in range(nrows):
        if basis[row] >= ncols:
            entries = np.abs(tab[row, :ncols])
            j = int(np.argmax(entries))
            if entries[j] > tol:
                _pivot(tab, row, j)
                basis[row] = j
            else:
                keep[row] = False
    rows_idx = np.nonzero(keep)[0]
    tab = np.vstack([tab[rows_idx][:, list(range(ncols)) + [ncols + nrows]],
                     np.zeros(ncols + 1)])
    basis = basis[rows_idx]
    nrows_kept = rows_idx.size

    # phase 2: reduced costs for the true objective
    tab[-1, :ncols] = c
    for row in range(nrows_kept):
        cb = c[basis[row]]
        if cb != 0.0:
            tab[-1] -= cb * tab[row]
    _simplex_phase(tab, basis, var_cols, tol, max_iter)

    x = np.zeros(ncols)
    x[basis] = tab[:nrows_kept, -1]
    x[x < 0] = 0.0  # clip pivot dust
    feas = float(np.max(np.abs(lp.A @ x - lp.b)))
    if feas > 1e-9 * max(1.0, float(np.abs(lp.b).max()), float(np.abs(lp.A).max())):
        raise LPError(f"primal feasibility residual {feas:.3e} too large")

    # duals from B^T y = c_B on the kept rows; dropped (redundant) rows get 0
    sign = np.where(neg, -1.0, 1.0)
    B = lp.A[rows_idx][:, basis] * sign[rows_idx, None]
    try:
        y_kept = np.linalg.solve(B.T, c[basis])
    except np.linalg.LinAlgError:
        y_kept = np.linalg.lstsq(B.T, c[basis], rcond=None)[0]
    duals = np.zeros(lp.b.size)
    duals[rows_idx] = y_kept * sign[rows_idx]
    return x, float(c @ x), basis, rows_idx, duals


def lp_simplex(lp: LinearProgram, tol: float = 1e-9,
               max_iter: int = 200_000) -> tuple[np.ndarray, float]:
    """Optimal basic feasible solution of a standard-form LP.

    Returns (x, value).  Raises LPInfeasibleError / LPUnboundedError.
    """
    x, value, _, _, _ = _solve_standard_form(lp, tol, max_iter)
    return x, value


class _OccupationalColumns:
    """Implicit constraint columns of the occupational program.

    Column (i, j) carries weight w[i,j]: a 1 in the probability row, plus
    +v_j/(2h) in the flux row of node i+1 and -v_j/(2h) in the flux row of
    node i-1.  An optional extra row holds a second-stage face constraint.
    """

    def __init__(self, lt: LagrangianTable, cost: np.ndarray,
                 face_row: np.ndarray | None = None, face_rhs: float = 0.0):
        self.n = lt.grid.n
        self.m = lt.m
        self.vs = lt.vgrid
        self.scale = 1.0 / (2.0 * lt.grid.h)
        self.cost = cost
        self.face_row = face_row          # (n, m) coefficients or None
        self.face_rhs = face_rhs
        self.nrows = 1 + self.n + (1 if face_row is not None else 0)

    def rhs(self) -> np.ndarray:
        b = np.zeros(self.nrows)
        b[0] = 1.0
        if self.face_row is not None:
            b[-1] = self.face_rhs
        return b

    def matrix(self, cols_i: np.ndarray, cols_j: np.ndarray,
               slack: bool = False) -> np.ndarray:
        ncols = cols_i.size + (1 if slack else 0)
        A = np.zeros((self.nrows, ncols))
        t = np.arange(cols_i.size)
        A[0, t] = 1.0
        coeff = self.vs[cols_j] * self.scale
        np.add.at(A, ((cols_i + 1) % self.n + 1, t), coeff)
        np.add.at(A, ((cols_i - 1) % self.n + 1, t), -coeff)
        if self.face_row is not None:
            A[-1, t] = self.face_row[cols_i, cols_j]
            if slack:
                A[-1, -1] = 1.0
        return A

    def reduced_costs(self, duals: np.ndarray) -> np.ndarray:
        yf = duals[1:1 + self.n]
        red = (self.cost - duals[0]
               - (np.roll(yf, -1) - np.roll(yf, 1))[:, None] * self.vs[None, :] * self.scale)
        if self.face_row is not None:
            red = red - duals[-1] * self.face_row
        return red


def _column_generation(cols: _OccupationalColumns, init_i: np.ndarray,
                       init_j: np.ndarray, with_slack: bool,
                       price_tol: float = 1e-9, batch: int = 64,
                       max_rounds: int = 500):
    """Exact solve of the occupational LP through restricted masters."""
    # deduplicate while keeping order
    keys = {}
    for i, j in zip(init_i.tolist(), init_j.tolist()):
        keys.setdefault((i, j), None)
    active = list(keys)
    for _ in range(max_rounds):
        ci = np.array([t[0] for t in active], dtype=int)
        cj = np.array([t[1] for t in active], dtype=int)
        A = cols.matrix(ci, cj, slack=with_slack)
        cost = cols.cost[ci, cj]
        if with_slack:
            cost = np.concatenate([cost, [0.0]])
        lp = LinearProgram(cost, A, cols.rhs())
        x, value, _, _, duals = _solve_standard_form(lp, 1e-9, 200_000)
        red = cols.reduced_costs(duals)
        red[ci, cj] = 0.0
        flat = np.argsort(red, axis=None)
        worst = red.flat[flat[0]]
        normal = cols.cost[cols.cost < L_CLIP / 2]
        scale = max(1.0, float(np.abs(normal).max()) if normal.size else 1.0)
        if worst >= -price_tol * scale:
            weights = np.zeros((cols.n, cols.m))
            weights[ci, cj] = x[:ci.size]
            return weights, value
        take = flat[:batch]
        new_i, new_j = np.unravel_index(take, red.shape)
        added = False
        for i, j in zip(new_i.tolist(), new_j.tolist()):
            if red[i, j] < -price_tol * scale and (i, j) not in keys:
                keys[(i, j)] = None
                active.append((i, j))
                added = True
        if not added:
            weights = np.zeros((cols.n, cols.m))
            weights[ci, cj] = x[:ci.size]
            return weights, value
    raise LPError("column generation did not converge")


@dataclass
class OccupationalMeasure:
    grid: TorusGrid
    vgrid: np.ndarray
    weights: np.ndarray      # (n, m), nonnegative, sums to 1
    value: float             # optimal integral of (L - potential)
    objective: np.ndarray = field(repr=False)   # cost matrix used, (n, m)
    _lt: LagrangianTable = field(repr=False, default=None)

    def closedness_residual(self) -> float:
        flux = self.weights @ (self.vgrid / (2.0 * self.grid.h))
        res = np.roll(flux, -1) - np.roll(flux, 1)
        return float(np.max(np.abs(res)))

    def mean_velocity(self) -> float:
        return float((self.weights @ self.vgrid).sum())

    def node_mass(self) -> np.ndarray:
        return self.weights.sum(axis=1)


def occupational_cost(lt: LagrangianTable,
                      potential: Field | np.ndarray | None = None) -> np.ndarray:
    L = np.minimum(lt.L, L_CLIP)
    if potential is not None:
        pot = potential.values if isinstance(potential, Field) else np.asarray(potential, float)
        L = L - pot[:, None]
    return L


def solve_occupational(lt: LagrangianTable,
                       potential: Field | np.ndarray | None = None) -> OccupationalMeasure:
    """Minimize the action integral over discrete closed probability measures."""
    cost = occupational_cost(lt, potential)
    cols = _OccupationalColumns(lt, cost)
    n, m = lt.grid.n, lt.m
    j0 = int(np.argmin(np.abs(lt.vgrid)))    # v = 0 column per node: always feasible
    init_i = np.concatenate([np.arange(n), np.arange(n)])
    init_j = np.concatenate([np.full(n, j0, dtype=int), np.argmin(cost, axis=1)])
    weights, value = _column_generation(cols, init_i, init_j, with_slack=False)
    total = weights.sum()
    if abs(total - 1.0) > 1e-9:
        raise LPError(f"measure mass {total} deviates from 1")
    return OccupationalMeasure(lt.grid, lt.vgrid, weights, value, cost, lt)


def extremal_integral(measure: OccupationalMeasure, f: Field, sense: str = "min",
                      face_tol: float = 1e-6) -> float:
    """Optimize the integral of f over the optimal face of the base program.

    The base objective is constrained to value + face_tol through a slack
    variable, then sum_ij w[i,j] f(x_i) is minimized or maximized.
    """
    if sense not in ("min", "max"):
        raise ValueError("sense must be 'min' or 'max'")
    if face_tol <= 0:
        raise ValueError("face_tol must be positive")
    sign = 1.0 if sense == "min" else -1.0
    fmat = np.broadcast_to(sign * f.values[:, None],
                           measure.objective.shape).copy()
    lt = measure._lt
    cols = _OccupationalColumns(lt, fmat, face_row=measure.objective,
                                face_rhs=measure.value + face_tol)
    n = measure.grid.n
    j0 = int(np.argmin(np.abs(measure.vgrid)))
    sup_i, sup_j = np.nonzero(measure.weights > 0)
    init_i = np.concatenate([np.arange(n), sup_i])
    init_j = np.concatenate([np.full(n, j0, dtype=int), sup_j])
    _, value = _column_generation(cols, init_i, init_j, with_slack=True)
    return float(sign * value)


@dataclass
class BarrierTable:
    h: np.ndarray              # (n, n): normalized barrier from x to y
    c_used: float              # normalization constant after drift correction
    aubry_indices: np.ndarray  # nodes with h[y,y] <= aubry_tol
    aubry_tol: float
    grid: TorusGrid
    t_list: tuple


def peierls_barrier(lt: LagrangianTable, c: float, t_list=(4.0, 8.0, 16.0),
                    dt: float | None = None, big: float = L_CLIP,
                    aubry_tol: float = 1e-2, safety: float = 4.0) -> BarrierTable:
    """Min-plus dynamic programming for the normalized minimal action.

    H_{t+dt}[x,y] = min_j ( H_t[x, y - v_j dt] + dt (L[y,j] + c) ), seeded
    with 0 on the diagonal and a large constant elsewhere.  The barrier is
    the min over the horizon list of the drift-corrected tables.
    """
    g = lt.grid
    t_list = tuple(sorted(float(t) for t in t_list))
    if len(t_list) < 1 or any(t <= 0 for t in t_list):
        raise ValueError("t_list must contain positive horizons")
    if dt is None:
        dt = min(0.02, safety * g.h / lt.vmax)
    if dt * lt.vmax > safety * g.h + 1e-12:
        raise ValueError(f"dt*vmax = {dt * lt.vmax:.3g} exceeds {safety:g}*h = {safety * g.h:.3g}")
    plan = GatherPlan(g, lt.vgrid, dt, backward=True)
    run_cost = dt * (np.minimum(lt.L, big) + c)   # (n, m), indexed by arrival node
    n, m = g.n, lt.m

    H = np.full((n, n), big)
    np.fill_diagonal(H, 0.0)
    snap_steps = [max(1, int(round(t / dt))) for t in t_list]
    snaps = []
    step = 0
    for target in snap_steps:
        while step < target:
            best = None
            for j in range(m):
                cand = (H[:, plan.idx0[j]] * plan.w0[j] + H[:, plan.idx1[j]] * plan.w1[j]
                        + run_cost[:, j][None, :])
                best = cand if best is None else np.minimum(best, cand)
            H = np.minimum(best, big)
            if not np.all(np.isfinite(H)):
                raise ValueError(f"nonfinite barrier values at t={step * dt:.4g}")
            step += 1
        snaps.append(H.copy())

    # estimate the residual normalization drift from the diagonal minimum
    drift = 0.0
    if len(snaps) >= 2:
        d2 = float(np.diag(snaps[-1]).min())
        d1 = float(np.diag(snaps[-2]).min())
        drift = (d2 - d1) / (snap_steps[-1] * dt - snap_steps[-2] * dt)
    barrier = None
    for tgt, snap in zip(snap_steps, snaps):
        corrected = snap - drift * (tgt * dt)
        barrier = corrected if barrier is None else np.minimum(barrier, corrected)

    diag = np.diag(barrier)
    indices = np.nonzero(diag <= aubry_tol)[0]
    return BarrierTable(barrier, c - drift, indices, aubry_tol, g, t_list)


def aubry_set(bt: BarrierTable, tol: float) -> np.ndarray:
    """Node indices y with h[y,y] <= tol."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    return np.nonzero(np.diag(bt.h) <= tol)[0]
