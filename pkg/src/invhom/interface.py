"""The interface problem on the truncated slab ``[-R, R] x T^(d-1)``.

The two periodic sides are joined through the constant ``q_-``, chosen so
that the conserved slice flux ``int a11 m`` matches on both sides.  The slab
measure ``m_R`` solves the transposed generator with Dirichlet data
``q_+ m_+`` at ``y1 = R`` and ``q_- m_- `` at ``y1 = -R``; its deviation from
the cut-off periodic measures decays exponentially away from the interface.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp

from .cell import FluxCorrector, InvariantMeasure, TransformedCoefficients, _trapezoid_open, _trapezoid_periodic, flux_corrector, invariant_measure, transformed
from .fields import smoothstep
from .grid import StructuredGrid, TorusGrid, _identity_rows, adjoint, assemble_nondiv, centered_gradient, slab_grid_per_unit, slice_integrals
from .solver import SolveReport, solve_linear

logger = logging.getLogger(__name__)

__all__ = [
    "FluxConstancyError",
    "MaximumPrincipleError",
    "SupportError",
    "CellSide",
    "cell_side",
    "InterfaceConfig",
    "compute_q_minus",
    "SlabMeasure",
    "solve_slab_measure",
    "cutoffs",
    "deviation_field",
    "flux_zero_check",
    "slab_flux",
    "ExpFit",
    "fit_exponential",
    "DecayFit",
    "decay_fit",
    "slice_profiles",
    "InterfaceFluxCorrector",
    "interface_flux_corrector",
    "periodic_extension",
    "r_stability",
    "InterfacePipeline",
    "build_interface",
]


class FluxConstancyError(ValueError):
    """Slice integrals that should be constant are not."""


class MaximumPrincipleError(RuntimeError):
    """Slab measure outside the range of its boundary data (strict mode only)."""


class SupportError(RuntimeError):
    """The source of the deviation equation leaks outside the interface band."""


# ---------------------------------------------------------------------------
# one periodic side


@dataclass
class CellSide:
    """Cell data of one side at transverse resolution ``n``."""

    coeffs: object
    grid: StructuredGrid
    measure: InvariantMeasure
    tc: TransformedCoefficients
    phi: FluxCorrector
    slice_flux: np.ndarray  # int a11 m over each y1-slice of the torus
    drift: float  # torus mean of b~_2: discrete centering defect

    @property
    def flux(self) -> float:
        return float(np.mean(self.slice_flux))

    @property
    def flux_variation(self) -> float:
        """``(max - min) / mean`` of the slice integrals."""
        return float(np.ptp(self.slice_flux) / abs(self.flux))


def cell_side(coeffs, n: int, tol: float = 1e-13, precond: str = "jacobi") -> CellSide:
    """Measure, transformed coefficients and stream-function corrector on an ``n^d`` torus."""
    g = TorusGrid(coeffs.dimension, n)
    m = invariant_measure(coeffs, g, tol=tol, precond=precond)
    tc = transformed(coeffs, m)
    a = coeffs.a(g.coords())
    S = slice_integrals(a[0, 0] * m.values, g)
    method = "stream" if g.d == 2 else "poisson"
    phi = flux_corrector(tc, method=method)
    return CellSide(coeffs, g, m, tc, phi, S, float(tc.mean_b_tilde[-1]))


@dataclass(frozen=True)
class InterfaceConfig:
    q_plus: float
    q_minus: float
    R: float

    def __post_init__(self):
        if not (self.q_plus > 0 and self.q_minus > 0):
            raise ValueError("q_plus and q_minus must be positive")
        if self.R <= 2:
            raise ValueError(f"slab half-width must exceed 2, got {self.R}")


def compute_q_minus(cell_plus: CellSide, cell_minus: CellSide, q_plus: float, rel_tol: float | None = None) -> float:
    """``q_- = q_+ <int a+11 m+> / <int a-11 m->``, after checking slice constancy.

    ``rel_tol`` bounds the relative variation of each side's slice integrals
    (default ``10 h^2``); exceeding it raises :class:`FluxConstancyError`.
    """
    if q_plus <= 0:
        raise ValueError("q_plus must be positive")
    for name, side in (("plus", cell_plus), ("minus", cell_minus)):
        tol = rel_tol if rel_tol is not None else 10.0 * side.grid.spacing[0] ** 2
        if side.flux_variation > tol:
            raise FluxConstancyError(
                f"{name} side: slice integrals of a11*m vary by {side.flux_variation:.2e} (relative) > {tol:.2e}; "
                "the slice-flux constancy check failed"
            )
    return q_plus * cell_plus.flux / cell_minus.flux


# ---------------------------------------------------------------------------
# slab solve


def periodic_extension(values: np.ndarray, torus: StructuredGrid, y1: np.ndarray) -> np.ndarray:
    """Rows of a torus field at the abscissae ``y1`` (must be torus nodes mod 1)."""
    n = torus.shape[0]
    k = np.asarray(y1, dtype=float) * n
    ki = np.rint(k)
    if np.max(np.abs(k - ki), initial=0.0) > 1e-6:
        raise ValueError("slab abscissae are not nodes of the periodic cell grid")
    return values[(ki.astype(int) % n)]


@dataclass
class SlabMeasure:
    grid: StructuredGrid
    values: np.ndarray
    data_plus: np.ndarray
    data_minus: np.ndarray
    residual: float
    report: SolveReport
    matrix: sp.csr_matrix = dc_field(repr=False)
    torus_range: tuple = (math.nan, math.nan)

    @property
    def data_range(self) -> tuple[float, float]:
        data = np.concatenate([self.data_plus.ravel(), self.data_minus.ravel()])
        return float(data.min()), float(data.max())

    @property
    def min(self):
        return float(self.values.min())

    @property
    def max(self):
        return float(self.values.max())

    def max_principle_excess(self) -> float:
        """Largest excursion outside the boundary-data range, relative to that range."""
        lo, hi = self.data_range
        span = max(hi - lo, 1e-300)
        return float(max(lo - self.min, self.max - hi, 0.0) / span)

    def max_principle_ok(self, tol: float = 1e-8) -> bool:
        lo, hi = self.data_range
        span = hi - lo
        return bool(self.min >= lo - tol * span and self.max <= hi + tol * span)

    def torus_range_ok(self, tol: float = 1e-8) -> bool:
        """Bound by the full range of ``q_+ m_+`` and ``q_- m_-`` over the torus."""
        lo, hi = self.torus_range
        span = hi - lo
        return bool(self.min >= lo - tol * span and self.max <= hi + tol * span)

    def measure_bounds_ok(self) -> bool:
        """``min(q m) / 2 <= m_R <= 3 max(q m) / 2`` at every node."""
        lo, hi = self.torus_range
        return bool(self.min >= 0.5 * lo and self.max <= 1.5 * hi)

    def to_dict(self):
        lo, hi = self.data_range
        return {
            "min": self.min,
            "max": self.max,
            "data_min": lo,
            "data_max": hi,
            "torus_min": self.torus_range[0],
            "torus_max": self.torus_range[1],
            "max_principle_excess": self.max_principle_excess(),
            "residual": self.residual,
            "solve": self.report.to_dict(),
        }


def solve_slab_measure(field, cfg: InterfaceConfig, grid: StructuredGrid, plus: CellSide, minus: CellSide, tol: float = 1e-13, precond: str = "ilu", strict: bool = False) -> SlabMeasure:
    """Transposed generator on the slab with data ``q_+ m_+`` / ``q_- m_-`` at ``y1 = +-R``.

    The generator is assembled with stencil rows on the Dirichlet nodes, so
    its transpose keeps every coupling of the interior equations; the
    Dirichlet rows are then replaced by identity rows.  The reported
    residual is that of the row-equilibrated system.  With ``strict=True``
    an excursion outside the boundary-data range raises
    :class:`MaximumPrincipleError`; otherwise it is only recorded.
    """
    if abs(grid.origin[0] + cfg.R) > 1e-12:
        raise ValueError("slab grid does not match the configured R")
    if grid.shape[1:] != plus.grid.shape[1:] or grid.shape[1:] != minus.grid.shape[1:]:
        raise ValueError("transverse resolution of the slab differs from the cell grids")
    L = assemble_nondiv(field, grid, boundary="stencil")
    bmask = grid.boundary_mask()
    M = _identity_rows(adjoint(L), bmask.ravel())
    y1 = grid.axis(0)
    dp = cfg.q_plus * periodic_extension(plus.measure.values, plus.grid, y1[-1:])[0]
    dm = cfg.q_minus * periodic_extension(minus.measure.values, minus.grid, y1[:1])[0]
    rhs = np.zeros(grid.shape)
    rhs[-1] = dp
    rhs[0] = dm
    # initial guess: the two scaled periodic measures joined at y1 = 0
    w = cut_off_measures(grid, cfg, plus, minus)
    # interior rows scale like 1/h^2 and the data rows like 1; equilibrate so
    # the relative residual is not floored by round-off in the interior rows
    Ms = sp.diags(1.0 / np.abs(M.diagonal())) @ M
    x, rep = solve_linear(Ms, rhs.ravel(), tol=tol, x0=w.ravel(), precond=precond)
    vals = x.reshape(grid.shape)
    qp, qm = cfg.q_plus * plus.measure.values, cfg.q_minus * minus.measure.values
    torus_range = (float(min(qp.min(), qm.min())), float(max(qp.max(), qm.max())))
    sm = SlabMeasure(grid, vals, dp, dm, rep.residual, rep, M, torus_range)
    if not sm.max_principle_ok():
        msg = (
            f"slab measure leaves the boundary-data range [{sm.data_range[0]:.6g}, {sm.data_range[1]:.6g}]: "
            f"min {sm.min:.6g}, max {sm.max:.6g} (relative excess {sm.max_principle_excess():.3e})"
        )
        if strict:
            raise MaximumPrincipleError(msg)
        logger.warning(msg)
    return sm


def cutoffs(y1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``psi_+ = s(y1)`` (0 for y1 <= 0, 1 for y1 >= 1) and its mirror ``psi_-``."""
    return smoothstep(y1), smoothstep(-y1)


def cut_off_measures(grid, cfg, plus: CellSide, minus: CellSide) -> np.ndarray:
    """``q_+ m_+ psi_+ + q_- m_- psi_-`` on the slab nodes."""
    y1 = grid.axis(0)
    pp, pm = cutoffs(y1)
    shape = (-1,) + (1,) * (grid.d - 1)
    mp = periodic_extension(plus.measure.values, plus.grid, y1)
    mm = periodic_extension(minus.measure.values, minus.grid, y1)
    return cfg.q_plus * mp * pp.reshape(shape) + cfg.q_minus * mm * pm.reshape(shape)


@dataclass
class Deviation:
    v: np.ndarray
    f: np.ndarray
    support_leak: float  # max |f| outside the band, row-scaled
    equation_residual: float  # ||M v - f|| / ||f|| on interior rows

    def to_dict(self):
        return {"support_leak": self.support_leak, "equation_residual": self.equation_residual, "max_abs_v": float(np.max(np.abs(self.v))), "max_abs_f": float(np.max(np.abs(self.f)))}


def deviation_field(sm: SlabMeasure, cfg: InterfaceConfig, plus: CellSide, minus: CellSide, support_tol: float = 1e-8) -> Deviation:
    """``v = m_R - q_+ m_+ psi_+ - q_- m_- psi_-`` and its source ``f = -L_h^T w``.

    ``f`` must vanish (to the cell-solve accuracy) outside
    ``|y1| <= 1 + 2 h1``; a larger leak raises :class:`SupportError`.
    """
    g = sm.grid
    w = cut_off_measures(g, cfg, plus, minus)
    v = sm.values - w
    interior = g.interior_mask()
    f = np.where(interior, -(sm.matrix @ w.ravel()).reshape(g.shape), 0.0)
    y1 = g.axis(0)
    h1 = g.spacing[0]
    band = np.abs(y1) <= 1.0 + 2.0 * h1 + 1e-12
    diag = np.abs(sm.matrix.diagonal()).reshape(g.shape)
    scaled = np.abs(f) / diag
    scale = max(float(np.max(np.abs(w))), 1e-300)
    leak = float(np.max(scaled[~band], initial=0.0) / scale)
    if leak > support_tol:
        raise SupportError(f"source f leaks outside |y1| <= 1 + 2h: relative size {leak:.3e} > {support_tol:.1e}")
    r = np.where(interior, (sm.matrix @ v.ravel()).reshape(g.shape) - f, 0.0)
    nf = np.linalg.norm(f)
    res = float(np.linalg.norm(r) / nf) if nf > 0 else float(np.linalg.norm(r))
    return Deviation(v, f, leak, res)


def slab_flux(values: np.ndarray, field, grid) -> np.ndarray:
    """``int a11 u`` over every y1-slice."""
    a11 = field.a(grid.coords())[0, 0]
    return slice_integrals(a11 * values, grid)


def flux_zero_check(v: np.ndarray, field, grid) -> tuple[np.ndarray, np.ndarray]:
    """Slices ``|t| >= 1`` and the values of ``int a11 v`` there."""
    t = grid.axis(0)
    sel = np.abs(t) >= 1.0 - 1e-12
    return t[sel], slab_flux(v, field, grid)[sel]


# ---------------------------------------------------------------------------
# exponential fits


# relative level below which decay profiles are treated as solver noise
FIT_FLOOR = 1e-10


@dataclass
class ExpFit:
    """``value ~ amplitude * exp(-rate * |t|)`` fitted in log space."""

    rate: float
    amplitude: float
    r2: float
    n_points: int
    degenerate: bool

    def accepted(self, r2_min: float = 0.98) -> bool:
        return (not self.degenerate) and self.rate > 0 and self.r2 >= r2_min

    @property
    def vanishes(self) -> bool:
        """Every value was at or below the floor: nothing left to decay."""
        return self.degenerate and self.n_points == 0

    def to_dict(self):
        return {**self.__dict__, "vanishes": self.vanishes}


def fit_exponential(t, values, floor: float | None = None) -> ExpFit:
    """Least-squares line through ``log(values)`` against ``|t|``.

    Points at or below ``floor`` (default ``100 eps max(1, max values)``) are
    dropped; with fewer than three left the fit is marked degenerate.
    """
    t = np.abs(np.asarray(t, dtype=float))
    values = np.asarray(values, dtype=float)
    if floor is None:
        floor = 100.0 * np.finfo(float).eps * max(1.0, float(np.max(values, initial=0.0)))
    keep = values > floor
    if keep.sum() < 3:
        return ExpFit(math.nan, math.nan, math.nan, int(keep.sum()), True)
    x, yv = t[keep], np.log(values[keep])
    slope, icpt = np.polyfit(x, yv, 1)
    pred = slope * x + icpt
    ss_tot = float(np.sum((yv - yv.mean()) ** 2))
    r2 = 1.0 - float(np.sum((yv - pred) ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return ExpFit(float(-slope), float(math.exp(icpt)), r2, int(keep.sum()), False)


def slice_profiles(v: np.ndarray, grid) -> tuple[np.ndarray, np.ndarray]:
    """Per-slice ``sup |v|`` and ``sup |grad v|`` (centred differences)."""
    n1 = grid.shape[0]
    grad2 = sum(centered_gradient(v, grid, k) ** 2 for k in range(grid.d))
    sup_v = np.max(np.abs(v).reshape(n1, -1), axis=1)
    sup_g = np.max(np.sqrt(grad2).reshape(n1, -1), axis=1)
    return sup_v, sup_g


@dataclass
class DecayFit:
    side: str
    window: tuple[float, float]
    value: ExpFit
    gradient: ExpFit

    @property
    def degenerate(self) -> bool:
        return self.value.degenerate or self.gradient.degenerate

    def accepted(self, r2_min: float = 0.98) -> bool:
        return self.value.accepted(r2_min) and self.gradient.accepted(r2_min)

    @property
    def vanishes(self) -> bool:
        return self.value.vanishes and self.gradient.vanishes

    def to_dict(self):
        return {"side": self.side, "window": list(self.window), "value": self.value.to_dict(), "gradient": self.gradient.to_dict(), "degenerate": self.degenerate}


def decay_fit(v: np.ndarray, grid, side: str, window: tuple[float, float] | None = None, rel_floor: float = FIT_FLOOR) -> DecayFit:
    """Exponential fits of ``sup|v|`` and ``sup|grad v|`` over slices in ``window``.

    ``window`` is given in ``|y1|`` and defaults to ``[2, R - 2]``; it must
    stay inside that range.  Values below ``rel_floor * max(1, max sup|v|)``
    are solver noise and are left out of the fit.
    """
    if side not in ("plus", "minus"):
        raise ValueError("side must be 'plus' or 'minus'")
    R = -grid.origin[0]
    lo, hi = window if window is not None else (2.0, R - 2.0)
    if lo < 2.0 - 1e-12 or hi > R - 2.0 + 1e-12 or lo >= hi:
        raise ValueError(f"decay window [{lo}, {hi}] must lie inside [2, R-2] = [2, {R - 2}]")
    t = grid.axis(0)
    sel = (np.abs(t) >= lo - 1e-12) & (np.abs(t) <= hi + 1e-12) & ((t > 0) if side == "plus" else (t < 0))
    sup_v, sup_g = slice_profiles(v, grid)
    fv = rel_floor * max(1.0, float(sup_v.max()))
    fg = rel_floor * max(1.0, float(sup_g.max()))
    return DecayFit(side, (lo, hi), fit_exponential(t[sel], sup_v[sel], fv), fit_exponential(t[sel], sup_g[sel], fg))


# ---------------------------------------------------------------------------
# interface flux corrector (d = 2)


@dataclass
class InterfaceFluxCorrector:
    grid: StructuredGrid
    psi: np.ndarray
    b_tilde: np.ndarray
    compat_defect: float  # max |slice mean of b~_1|, relative
    psi_residual: float  # max |d1 psi + b~_2| away from the slab ends
    M_plus: np.ndarray
    M_minus: np.ndarray
    match_plus: np.ndarray  # per-slice sup |phi_b - q phi_+ + M_+| on y1 > 0
    match_minus: np.ndarray
    fit_plus: ExpFit
    fit_minus: ExpFit

    def matrix(self) -> np.ndarray:
        z = np.zeros_like(self.psi)
        return np.array([[z, -self.psi], [self.psi, z]])

    def to_dict(self):
        return {
            "compat_defect": self.compat_defect,
            "psi_residual": self.psi_residual,
            "M_plus": self.M_plus.tolist(),
            "M_minus": self.M_minus.tolist(),
            "fit_plus": self.fit_plus.to_dict(),
            "fit_minus": self.fit_minus.to_dict(),
        }


def _antisym(mu):
    return np.array([[0.0, -mu], [mu, 0.0]])


def interface_flux_corrector(sm: SlabMeasure, field, cfg: InterfaceConfig, plus: CellSide, minus: CellSide, compat_tol: float = 1e-7) -> InterfaceFluxCorrector:
    """Stream function ``Psi`` of ``b~ = b m_R - div(a m_R)`` on the slab and the constants ``M+-``.

    ``Psi`` is integrated along each slice in ``y2`` (trapezoid rule) from
    ``b~_1``; the slice constants integrate ``-mean_slice(b~_2)`` in ``y1``,
    with the discrete centering defects of the two periodic sides
    (``q_+ delta_+ psi_+ + q_- delta_- psi_-``) removed so the far field does
    not drift linearly.  ``Psi`` is anchored to mean zero on ``y1 = 0``.
    ``M+-`` are medians of ``q phi_+- - phi_b`` over the outer quarter of each side.
    """
    g = sm.grid
    if g.d != 2:
        raise ValueError("the interface flux corrector is implemented for d = 2")
    a = field.a(g.coords())
    b = field.b(g.coords())
    at = a * sm.values
    bt = b * sm.values - np.stack([sum(centered_gradient(at[i, j], g, j) for j in range(2)) for i in range(2)])
    scale = max(float(np.max(np.abs(bt))), 1.0)
    compat = float(np.max(np.abs(bt[0].mean(axis=1))) / scale)
    if compat > compat_tol:
        raise FluxConstancyError(
            f"slice means of b~_1 reach {compat:.2e} (relative) > {compat_tol:.1e}; the slab flux is not constant across slices"
        )
    h1, h2 = g.spacing
    y1 = g.axis(0)
    psi = _trapezoid_periodic(bt[0], h2, axis=1)
    pp, pm = cutoffs(y1)
    s = -(bt[1].mean(axis=1) - cfg.q_plus * plus.drift * pp - cfg.q_minus * minus.drift * pm)
    const = _trapezoid_open(s, h1)
    psi = psi - psi.mean(axis=1, keepdims=True) + const[:, None]
    i0 = int(np.argmin(np.abs(y1)))
    psi = psi - psi[i0].mean()
    # d1 psi = -b~_2 up to the removed drift; compare away from the slab ends
    d1 = centered_gradient(psi, g, 0)
    target = -(bt[1] - (cfg.q_plus * plus.drift * pp + cfg.q_minus * minus.drift * pm)[:, None])
    inner = slice(2, -2)
    psi_res = float(np.max(np.abs(d1[inner] - target[inner])))

    R = cfg.R
    out = {}
    for name, side, q, sign in (("plus", plus, cfg.q_plus, 1.0), ("minus", minus, cfg.q_minus, -1.0)):
        psi_side = periodic_extension(-side.phi.upper[(0, 1)], side.grid, y1)  # phi_21 = Psi
        diff = psi - q * psi_side  # (2,1) entry of phi_b - q phi
        quarter = (sign * y1 >= 0.75 * R - 1e-12) & (sign * y1 <= R + 1e-12)
        mu = -float(np.median(diff[quarter]))
        resid = np.max(np.abs(diff + mu), axis=1)
        sel = (sign * y1 >= 2.0 - 1e-12) & (sign * y1 <= R - 2.0 + 1e-12)
        floor = FIT_FLOOR * max(1.0, float(np.max(np.abs(psi))))
        out[name] = (_antisym(mu), resid, fit_exponential(y1[sel], resid[sel], floor))
    return InterfaceFluxCorrector(
        g, psi, bt, compat, psi_res,
        out["plus"][0], out["minus"][0], out["plus"][1], out["minus"][1], out["plus"][2], out["minus"][2],
    )


def r_stability(field, cfg: InterfaceConfig, plus: CellSide, minus: CellSide, R_values, n: int, margin: float = 2.0, tol: float = 1e-13) -> list[dict]:
    """Sup-difference of ``m_R`` and ``m_{2R}`` on ``[-R + margin, R - margin]`` for each ``R``."""
    out = []
    for R in R_values:
        sms = []
        for RR in (R, 2 * R):
            c = InterfaceConfig(cfg.q_plus, cfg.q_minus, RR)
            sms.append(solve_slab_measure(field, c, slab_grid_per_unit(field.dimension, RR, n), plus, minus, tol=tol))
        a, b = sms
        ya, yb = a.grid.axis(0), b.grid.axis(0)
        sel = np.abs(ya) <= R - margin + 1e-12
        idx = np.rint((ya[sel] - yb[0]) / b.grid.spacing[0]).astype(int)
        diff = float(np.max(np.abs(a.values[sel] - b.values[idx])))
        out.append({"R": R, "sup_difference": diff})
    return out


@dataclass
class InterfacePipeline:
    """Everything computed for one two-sided field at one resolution."""

    field: object
    cfg: InterfaceConfig
    plus: CellSide
    minus: CellSide
    grid: StructuredGrid
    slab: SlabMeasure
    corrector: InterfaceFluxCorrector | None


def build_interface(field, n: int, R: float, q_plus: float = 1.0, tol: float = 1e-13, with_corrector: bool = True) -> InterfacePipeline:
    """Cell sides at resolution ``n``, ``q_-``, the slab measure and (d = 2) ``Psi``."""
    plus = cell_side(field.plus, n, tol=tol)
    minus = plus if field.minus is field.plus else cell_side(field.minus, n, tol=tol)
    cfg = InterfaceConfig(q_plus, compute_q_minus(plus, minus, q_plus), R)
    grid = slab_grid_per_unit(field.dimension, R, n)
    sm = solve_slab_measure(field, cfg, grid, plus, minus, tol=tol)
    ifc = interface_flux_corrector(sm, field, cfg, plus, minus) if (with_corrector and field.dimension == 2) else None
    return InterfacePipeline(field, cfg, plus, minus, grid, sm, ifc)
