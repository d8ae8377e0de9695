"""The oscillating divergence-form problem and its piecewise-constant limit.

On ``Omega = (-1/2, 1/2)^d`` with zero Dirichlet data we solve

* ``div(B(x/eps) grad u_eps) = f(x) m(x/eps)`` with ``B = a m + phi`` built
  from the slab fields (continued by the periodic pieces beyond ``|y1| = R``),
* ``div(A_hat(x) grad u_0) = f(x) q(x)`` with ``A_hat = q_+ A_+`` for
  ``x1 > 0`` and ``q_- A_-`` for ``x1 < 0``,

on the same grid ``h = eps / n_cell``, and fit the rate of ``u_eps - u_0``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp

from .cell import EffectiveTensor, effective_tensor
from .grid import BoxGrid, StructuredGrid, assemble_divergence, nodal_to_faces
from .interface import InterfacePipeline
from .solver import SolveReport, solve_linear

logger = logging.getLogger(__name__)

__all__ = [
    "ResolutionError",
    "PiecewiseTensor",
    "piecewise_tensor",
    "bump_source",
    "oscillating_fields",
    "solve_oscillating",
    "solve_effective",
    "solve_divergence",
    "discrete_energy",
    "error_norms",
    "RateFit",
    "fit_rate",
    "ConvergenceExperiment",
    "convergence_study",
]


class ResolutionError(ValueError):
    """The grid does not resolve the oscillation scale as configured."""


@dataclass
class PiecewiseTensor:
    """``A(x) = q_+ A_+ - M_+`` for ``x1 > 0`` and ``q_- A_- - M_-`` for ``x1 < 0``.

    ``cell_plus`` / ``cell_minus`` are the cell tensors computed with
    mean-zero flux correctors.  The antisymmetric part of a cell tensor moves
    with the additive constant of its flux corrector; the interface fixes
    that constant through ``phi_b - q phi -> -M`` on each side, so the
    matched limit tensor is ``q A - M``.  ``gauge="mean-zero"`` drops ``M``
    (both blocks then equal ``q`` times the cell tensors).
    """

    cell_plus: EffectiveTensor
    cell_minus: EffectiveTensor
    q_plus: float
    q_minus: float
    M_plus: np.ndarray | None = None
    M_minus: np.ndarray | None = None
    gauge: str = "matched"

    def __post_init__(self):
        if self.gauge not in ("matched", "mean-zero"):
            raise ValueError(f"unknown gauge {self.gauge!r}")
        d = self.cell_plus.A.shape[0]
        if self.M_plus is None:
            self.M_plus = np.zeros((d, d))
        if self.M_minus is None:
            self.M_minus = np.zeros((d, d))

    @property
    def plus(self) -> np.ndarray:
        out = self.q_plus * self.cell_plus.A
        return out - self.M_plus if self.gauge == "matched" else out

    @property
    def minus(self) -> np.ndarray:
        out = self.q_minus * self.cell_minus.A
        return out - self.M_minus if self.gauge == "matched" else out

    def elliptic(self) -> bool:
        return all(np.linalg.eigvalsh(0.5 * (M + M.T)).min() > 0 for M in (self.plus, self.minus))

    def with_gauge(self, gauge: str) -> "PiecewiseTensor":
        return PiecewiseTensor(self.cell_plus, self.cell_minus, self.q_plus, self.q_minus, self.M_plus, self.M_minus, gauge)

    def to_dict(self):
        return {
            "q_plus": self.q_plus,
            "q_minus": self.q_minus,
            "gauge": self.gauge,
            "cell_A_plus": self.cell_plus.A.tolist(),
            "cell_A_minus": self.cell_minus.A.tolist(),
            "M_plus": self.M_plus.tolist(),
            "M_minus": self.M_minus.tolist(),
            "A_plus": self.plus.tolist(),
            "A_minus": self.minus.tolist(),
        }


def piecewise_tensor(pipe: InterfacePipeline, tol: float = 1e-12, gauge: str = "matched") -> PiecewiseTensor:
    """Cell effective tensors of both sides (same resolution as the slab), scaled by ``q+-``."""
    ep = effective_tensor(pipe.plus.tc, pipe.plus.phi, tol=tol)
    em = ep if pipe.minus is pipe.plus else effective_tensor(pipe.minus.tc, pipe.minus.phi, tol=tol)
    Mp = Mm = None
    if pipe.corrector is not None:
        Mp, Mm = pipe.corrector.M_plus, pipe.corrector.M_minus
    return PiecewiseTensor(ep, em, pipe.cfg.q_plus, pipe.cfg.q_minus, Mp, Mm, gauge)


def bump_source(x: np.ndarray) -> np.ndarray:
    """Smooth source supported in the disc ``|x| < 0.45``, with a low-frequency factor."""
    r2 = np.sum(x**2, axis=0) / 0.45**2
    with np.errstate(divide="ignore", over="ignore"):
        bump = np.where(r2 < 1.0, np.exp(1.0 - 1.0 / np.maximum(1.0 - r2, 1e-300)), 0.0)
    return bump * (1.0 + 0.5 * np.sin(2.0 * np.pi * x[0]) * np.cos(np.pi * x[-1]))


def _box(eps: float, n_cell: int, d: int) -> StructuredGrid:
    N = round(n_cell / eps)
    if abs(N * eps - n_cell) > 1e-9 or N % 2:
        raise ResolutionError(f"1/eps * n_cell = {n_cell / eps} must be an even integer")
    return BoxGrid(d, -0.5, 0.5, N)


def oscillating_fields(pipe: InterfacePipeline, eps: float, grid: StructuredGrid) -> tuple[np.ndarray, np.ndarray]:
    """``B(x/eps)`` and ``m(x/eps)`` on the nodes of ``grid``.

    Inside ``|y1| <= R`` the slab fields are used; outside, the periodic
    pieces ``q(a m + phi) - M`` and ``q m``.
    """
    if pipe.corrector is None:
        raise ValueError("the interface flux corrector is required (d = 2)")
    sg = pipe.grid
    n = pipe.plus.grid.shape[0]
    h = grid.spacing[0]
    if abs(h * n - eps) > 1e-9 * eps:
        raise ResolutionError(f"grid spacing {h} must equal eps / n_cell = {eps / n}")
    R = pipe.cfg.R
    y1 = grid.axis(0) / eps
    y2 = grid.axis(1) / eps
    cols = np.rint(y2 * n).astype(int) % n
    d = 2
    a_slab = pipe.field.a(sg.coords()) * pipe.slab.values
    B_slab = a_slab + pipe.corrector.matrix()
    sides = {}
    for name, side, q, M in (("plus", pipe.plus, pipe.cfg.q_plus, pipe.corrector.M_plus), ("minus", pipe.minus, pipe.cfg.q_minus, pipe.corrector.M_minus)):
        Bp = q * (side.tc.a_tilde + side.phi.matrix()) - M.reshape(d, d, 1, 1)
        sides[name] = (Bp, q * side.measure.values)
    B = np.empty((d, d) + grid.shape)
    m = np.empty(grid.shape)
    inside = np.abs(y1) <= R + 1e-9
    rows = np.rint((y1[inside] + R) * n).astype(int)
    B[:, :, inside] = B_slab[:, :, rows][:, :, :, cols]
    m[inside] = pipe.slab.values[rows][:, cols]
    for name, sel in (("plus", y1 > R + 1e-9), ("minus", y1 < -R - 1e-9)):
        if sel.any():
            Bp, mp = sides[name]
            r = np.rint(y1[sel] * n).astype(int) % n
            B[:, :, sel] = Bp[:, :, r][:, :, :, cols]
            m[sel] = mp[r][:, cols]
    return B, m


def solve_divergence(faces, rhs: np.ndarray, grid: StructuredGrid, tol: float = 1e-10, precond: str = "ilu") -> tuple[np.ndarray, SolveReport]:
    """``div(B grad u) = rhs`` with zero Dirichlet data (face fluxes given)."""
    L = assemble_divergence(faces, grid)
    b = np.where(grid.boundary_mask(), 0.0, rhs).ravel()
    # equilibrate: interior rows scale like 1/h^2, Dirichlet rows like 1
    D = sp.diags(1.0 / np.abs(L.diagonal()))
    x, rep = solve_linear(D @ L, D @ b, tol=tol, precond=precond)
    return x.reshape(grid.shape), rep


def solve_oscillating(pipe: InterfacePipeline, eps: float, f=bump_source, n_cell: int | None = None, min_cells: int = 8, tol: float = 1e-10):
    """Oscillating problem at scale ``eps`` on the grid ``h = eps / n_cell``."""
    n = pipe.plus.grid.shape[0] if n_cell is None else n_cell
    if n < min_cells:
        raise ResolutionError(f"grid spacing eps/{n} is coarser than the required eps/{min_cells}")
    if n != pipe.plus.grid.shape[0]:
        raise ResolutionError("n_cell must equal the resolution of the interface pipeline")
    grid = _box(eps, n, 2)
    B, m = oscillating_fields(pipe, eps, grid)
    u, rep = solve_divergence(nodal_to_faces(B, grid), f(grid.coords()) * m, grid, tol=tol)
    return grid, u, rep, (B, m)


def effective_faces(pt: PiecewiseTensor, grid: StructuredGrid) -> list[np.ndarray]:
    """Face values of the piecewise tensor.

    ``x1 = 0`` is a node line, so normal faces in ``x1`` lie strictly on one
    side; faces along the interface line get the mean of the two tensors.
    """
    d = grid.d
    x1 = grid.axis(0)
    faces = []
    for i in range(d):
        c = x1 + (0.5 * grid.spacing[0] if i == 0 else 0.0)
        wp = np.where(c > 1e-12, 1.0, np.where(c < -1e-12, 0.0, 0.5))
        shape = (-1,) + (1,) * (d - 1)
        wp = np.broadcast_to(wp.reshape(shape), grid.shape)
        faces.append(np.stack([wp * pt.plus[i, j] + (1.0 - wp) * pt.minus[i, j] for j in range(d)]))
    return faces


def effective_rhs(pt: PiecewiseTensor, f_values: np.ndarray, grid: StructuredGrid) -> np.ndarray:
    x1 = grid.axis(0)
    q = np.where(x1 > 1e-12, pt.q_plus, np.where(x1 < -1e-12, pt.q_minus, 0.5 * (pt.q_plus + pt.q_minus)))
    return f_values * q.reshape((-1,) + (1,) * (grid.d - 1))


def solve_effective(pt: PiecewiseTensor, f, grid: StructuredGrid, tol: float = 1e-10):
    """``div(A_hat grad u_0) = f q`` with zero Dirichlet data."""
    fv = f(grid.coords()) if callable(f) else np.asarray(f, dtype=float)
    return solve_divergence(effective_faces(pt, grid), effective_rhs(pt, fv, grid), grid, tol=tol)


def discrete_energy(faces, u: np.ndarray, grid: StructuredGrid) -> float:
    """``sum_faces (D_i u) * flux_i * h^d``: equals ``-<u, div(B grad u)>`` for zero boundary data."""
    L = assemble_divergence(faces, grid)
    interior = grid.interior_mask().ravel()
    Lu = L @ u.ravel()
    return float(-np.sum(u.ravel()[interior] * Lu[interior]) * grid.cell_volume)


def error_norms(e: np.ndarray, grid: StructuredGrid, collar: float = 0.125) -> dict:
    """``L2``, ``Linf`` and ``Linf`` over nodes at distance ``>= collar`` from the boundary."""
    x = grid.coords()
    dist = np.min(0.5 - np.abs(x), axis=0)
    interior = dist >= collar - 1e-12
    return {
        "L2": float(math.sqrt(np.sum(e**2) * grid.cell_volume)),
        "Linf": float(np.max(np.abs(e))),
        "interior_Linf": float(np.max(np.abs(e[interior]))),
    }


@dataclass
class RateFit:
    slope: float
    pair_slopes: list
    r2: float
    degenerate: bool

    def in_band(self, lo: float = 0.7, hi: float = 1.3) -> bool:
        return (not self.degenerate) and lo <= self.slope <= hi

    def to_dict(self):
        return dict(self.__dict__)


def fit_rate(eps, errors, floor: float = 1e-11) -> RateFit:
    """Least-squares slope of ``log error`` against ``log eps`` (needs >= 3 points)."""
    eps = np.asarray(eps, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if len(eps) < 3:
        raise ValueError("a rate fit needs at least three values")
    if np.all(errors <= floor):
        return RateFit(math.nan, [], math.nan, True)
    le, lerr = np.log(eps), np.log(np.maximum(errors, 1e-300))
    slope, icpt = np.polyfit(le, lerr, 1)
    pred = slope * le + icpt
    ss = float(np.sum((lerr - lerr.mean()) ** 2))
    r2 = 1.0 - float(np.sum((lerr - pred) ** 2)) / ss if ss > 0 else 1.0
    pairs = [float((lerr[k + 1] - lerr[k]) / (le[k + 1] - le[k])) for k in range(len(eps) - 1)]
    return RateFit(float(slope), pairs, r2, bool(np.any(errors <= floor)))


@dataclass
class ConvergenceExperiment:
    rows: list = dc_field(default_factory=list)
    rates: dict = dc_field(default_factory=dict)
    truncated: bool = False
    reason: str = ""

    def monotone(self, key: str = "interior_Linf") -> bool:
        vals = [r[key] for r in self.rows]
        return all(b < a for a, b in zip(vals, vals[1:]))

    def to_dict(self):
        return {"rows": self.rows, "rates": {k: v.to_dict() for k, v in self.rates.items()}, "truncated": self.truncated, "reason": self.reason}

    CSV_COLUMNS = ("eps", "grid", "L2", "Linf", "interior_Linf", "iterations", "seconds")


def convergence_study(pipe: InterfacePipeline, eps_list, f=bump_source, tol: float = 1e-10, max_seconds: float = math.inf, max_unknowns: int = 2**21, pt: PiecewiseTensor | None = None, compare_gauge: bool = False, collar: float = 0.125) -> ConvergenceExperiment:
    """Errors ``u_eps - u_0`` for each ``eps`` (descending), and their rate fits.

    A run whose grid exceeds ``max_unknowns`` is not attempted; once
    ``max_seconds`` have elapsed the remaining values are skipped.  Either
    way the experiment is marked truncated.
    """
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 3:
        raise ValueError("the convergence study needs at least three eps values")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps values must be strictly decreasing")
    n = pipe.plus.grid.shape[0]
    if pt is None:
        pt = piecewise_tensor(pipe)
    exp = ConvergenceExperiment()
    t0 = time.perf_counter()
    for eps in eps_list:
        grid = _box(eps, n, 2)
        if grid.size > max_unknowns:
            exp.truncated, exp.reason = True, f"eps={eps}: {grid.size} unknowns exceed the budget {max_unknowns}"
            break
        if time.perf_counter() - t0 > max_seconds:
            exp.truncated, exp.reason = True, f"time budget {max_seconds}s exhausted before eps={eps}"
            break
        ts = time.perf_counter()
        grid, ue, rep, _ = solve_oscillating(pipe, eps, f, tol=tol)
        u0, rep0 = solve_effective(pt, f, grid, tol=tol)
        row = {"eps": eps, "grid": grid.shape[0]}
        row.update(error_norms(ue - u0, grid, collar))
        if compare_gauge:
            other = pt.with_gauge("mean-zero" if pt.gauge == "matched" else "matched")
            u0b, _ = solve_effective(other, f, grid, tol=tol)
            row[f"interior_Linf_{other.gauge}"] = error_norms(ue - u0b, grid, collar)["interior_Linf"]
        row["u0_max"] = float(np.max(np.abs(u0)))
        row["iterations"] = rep.iterations + rep0.iterations
        row["seconds"] = time.perf_counter() - ts
        exp.rows.append(row)
        logger.info("eps=%g grid=%d interior Linf=%.3e (%.1fs)", eps, grid.shape[0], row["interior_Linf"], row["seconds"])
    if len(exp.rows) >= 3:
        e = [r["eps"] for r in exp.rows]
        # errors below 1e-8 max|u_0| are solver noise: u_eps = u_0 discretely
        floor = 1e-8 * max(r["u0_max"] for r in exp.rows)
        for key in ("L2", "Linf", "interior_Linf"):
            exp.rates[key] = fit_rate(e, [r[key] for r in exp.rows], floor=floor)
    return exp
