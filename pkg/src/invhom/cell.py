"""Periodic cell quantities on one side of the interface.

Pipeline on a torus grid: invariant measure ``m`` (kernel of the transposed
generator), transformed coefficients ``a m`` and ``b m - div(a m)``, an
antisymmetric flux corrector ``phi`` with ``d_j phi_ji = b~_i``, and the
effective tensor of the divergence-form operator ``div((a m + phi) grad)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp

from .grid import StructuredGrid, assemble_nondiv, adjoint, assemble_divergence, centered_gradient, nodal_to_faces
from .solver import SolveReport, PoissonCompatibilityError, solve_linear, solve_nullspace, solve_poisson_torus

logger = logging.getLogger(__name__)

__all__ = [
    "InvariantMeasure",
    "TransformedCoefficients",
    "FluxCorrector",
    "EffectiveTensor",
    "invariant_measure",
    "centering_defect",
    "transformed",
    "flux_corrector",
    "stream_function_torus",
    "effective_tensor",
    "face_flux_average",
    "node_flux_average",
    "cell_summary",
]


@dataclass
class InvariantMeasure:
    """Positive unit-mean kernel vector of the transposed generator on a torus."""

    grid: StructuredGrid
    values: np.ndarray
    residual: float
    report: SolveReport | None = None

    @property
    def min(self) -> float:
        return float(self.values.min())

    @property
    def max(self) -> float:
        return float(self.values.max())

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    def to_dict(self):
        return {"min": self.min, "max": self.max, "mean": self.mean, "residual": self.residual}


def invariant_measure(coeffs, grid: StructuredGrid, tol: float = 1e-10, precond: str = "jacobi", mixed="adaptive") -> InvariantMeasure:
    """Solve ``L_h^T m = 0`` with unit mean; ``coeffs`` needs ``.a`` and ``.b``."""
    if not all(grid.periodic):
        raise ValueError("invariant_measure needs a torus grid")
    L = assemble_nondiv(coeffs, grid, mixed=mixed)
    m, rep = solve_nullspace(adjoint(L), normalization="mean-one", tol=tol, precond=precond)
    return InvariantMeasure(grid, m.reshape(grid.shape), rep.residual, rep)


def _values(m):
    return m.values if isinstance(m, InvariantMeasure) else np.asarray(m, dtype=float)


def centering_defect(coeffs, m, grid: StructuredGrid | None = None) -> np.ndarray:
    """Quadrature of ``b_i m`` over the unit torus, one entry per direction."""
    if grid is None:
        grid = m.grid
    b = coeffs.b(grid.coords())
    return np.array([float(np.mean(b[i] * _values(m))) for i in range(grid.d)])


@dataclass
class TransformedCoefficients:
    """``a~ = a m``, ``beta = b m`` and ``b~ = beta - d_j a~_ij`` on a grid."""

    grid: StructuredGrid
    a_tilde: np.ndarray
    beta: np.ndarray
    b_tilde: np.ndarray
    m: np.ndarray

    def divergence(self) -> np.ndarray:
        """Centred divergence of ``b~`` (zero in the continuum)."""
        return sum(centered_gradient(self.b_tilde[i], self.grid, i) for i in range(self.grid.d))

    @property
    def div_residual(self) -> float:
        return float(np.max(np.abs(self.divergence())))

    @property
    def mean_b_tilde(self) -> np.ndarray:
        return self.b_tilde.reshape(self.grid.d, -1).mean(axis=1)

    def to_dict(self):
        return {"div_residual": self.div_residual, "mean_b_tilde": self.mean_b_tilde.tolist()}


def transformed(coeffs, m, grid: StructuredGrid | None = None) -> TransformedCoefficients:
    """Pointwise products with ``m`` and the centred-difference divergence of ``a m``."""
    if grid is None:
        grid = m.grid
    mv = _values(m).reshape(grid.shape)
    y = grid.coords()
    at = coeffs.a(y) * mv
    beta = coeffs.b(y) * mv
    bt = beta - np.stack([sum(centered_gradient(at[i, j], grid, j) for j in range(grid.d)) for i in range(grid.d)])
    return TransformedCoefficients(grid, at, beta, bt, mv)


@dataclass
class FluxCorrector:
    """Antisymmetric ``phi`` stored through its strictly upper entries.

    ``upper[(i, j)]`` holds ``phi_ij`` for ``i < j``; :meth:`matrix` returns the
    full array with ``phi_ji = -phi_ij`` exactly.
    """

    grid: StructuredGrid
    upper: dict
    method: str
    div_residual: float = float("nan")

    def matrix(self) -> np.ndarray:
        d = self.grid.d
        out = np.zeros((d, d) + self.grid.shape)
        for (i, j), v in self.upper.items():
            out[i, j] = v
            out[j, i] = -v
        return out

    def divergence(self) -> np.ndarray:
        """``(d_j phi_ji)_i`` by centred differences."""
        phi = self.matrix()
        d = self.grid.d
        return np.stack([sum(centered_gradient(phi[j, i], self.grid, j) for j in range(d)) for i in range(d)])

    def to_dict(self):
        return {"method": self.method, "div_residual": self.div_residual}


def stream_function_torus(b_tilde: np.ndarray, grid: StructuredGrid) -> tuple[np.ndarray, float]:
    """Periodic ``Psi`` with ``d2 Psi = b~_1``, ``d1 Psi = -b~_2`` (d = 2) by line integration.

    Each slice is integrated in ``y2`` with the periodic trapezoid rule; the
    slice constants come from integrating ``-mean_slice(b~_2)`` in ``y1``.
    The mean of ``b~_2`` (the discrete centering defect, O(h^2)) is removed
    first so the result is periodic; it is returned alongside ``Psi``.
    """
    if grid.d != 2:
        raise ValueError("stream functions are two-dimensional")
    h1, h2 = grid.spacing
    b1, b2 = b_tilde
    psi = _trapezoid_periodic(b1, h2, axis=1)
    drift = float(b2.mean())
    s = -(b2.mean(axis=1) - drift)
    const = _trapezoid_open(s, h1)
    psi = psi - psi.mean(axis=1, keepdims=True) + const[:, None]
    return psi - psi.mean(), drift


def _trapezoid_periodic(f, h, axis):
    """Running trapezoid integral starting at 0 along a periodic axis."""
    f = np.moveaxis(f, axis, -1)
    inc = 0.5 * h * (f + np.roll(f, -1, axis=-1))
    out = np.concatenate([np.zeros(f.shape[:-1] + (1,)), np.cumsum(inc[..., :-1], axis=-1)], axis=-1)
    return np.moveaxis(out, -1, axis)


def _trapezoid_open(f, h):
    inc = 0.5 * h * (f[1:] + f[:-1])
    return np.concatenate([[0.0], np.cumsum(inc)])


def flux_corrector(tc: TransformedCoefficients, method: str = "poisson", mean_tol: float | None = None) -> FluxCorrector:
    """Antisymmetric potential of the divergence-free field ``b~``.

    ``method="poisson"``: ``Lap f_i = b~_i`` on the torus and
    ``phi_ji = d_j f_i - d_i f_j``.  ``method="stream"`` (d = 2):
    ``phi_21 = Psi`` from :func:`stream_function_torus`.

    The torus mean of ``b~`` equals the discrete centering defect; it is
    removed when below ``mean_tol`` (default ``10 h^2 max|b~|``), otherwise
    :class:`PoissonCompatibilityError` is raised.
    """
    g = tc.grid
    d = g.d
    scale = max(float(np.max(np.abs(tc.b_tilde))), 1.0)
    if mean_tol is None:
        mean_tol = 10.0 * max(g.spacing) ** 2 * scale
    mean = tc.mean_b_tilde
    if np.max(np.abs(mean)) > mean_tol:
        raise PoissonCompatibilityError(
            f"mean of b~ is {mean.tolist()}, above {mean_tol:.2e}: the centering condition fails for these coefficients"
        )
    bt = tc.b_tilde - mean.reshape((d,) + (1,) * d)
    if method == "poisson":
        f = [solve_poisson_torus(bt[i], g.spacing, tol=1e-9) for i in range(d)]
        upper = {}
        for i in range(d):
            for j in range(i + 1, d):
                # phi_ij = d_i f_j - d_j f_i
                upper[(i, j)] = centered_gradient(f[j], g, i) - centered_gradient(f[i], g, j)
    elif method == "stream":
        psi, _ = stream_function_torus(bt, g)
        upper = {(0, 1): -psi}
    else:
        raise ValueError(f"unknown flux corrector method {method!r}")
    fc = FluxCorrector(g, upper, method)
    fc.div_residual = float(np.max(np.abs(fc.divergence() - bt)))
    return fc


@dataclass
class EffectiveTensor:
    """Homogenized matrix with its correctors ``chi_k`` (stored as ``(d, *shape)``)."""

    A: np.ndarray
    correctors: np.ndarray
    residuals: list = dc_field(default_factory=list)
    node_average: np.ndarray | None = None

    @property
    def asymmetry(self) -> float:
        return float(np.max(np.abs(self.A - self.A.T)))

    @property
    def min_sym_eig(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.A + self.A.T)).min())

    def to_dict(self):
        return {
            "A": self.A.tolist(),
            "asymmetry": self.asymmetry,
            "min_sym_eigenvalue": self.min_sym_eig,
            "corrector_residuals": [float(r) for r in self.residuals],
            "node_average_difference": None if self.node_average is None else float(np.max(np.abs(self.node_average - self.A))),
        }


def _face_gradient(u, grid, i):
    """Gradient of ``u`` on the faces ``k + e_i/2``: shape ``(d, *shape)``."""
    d, h = grid.d, grid.spacing
    out = []
    for j in range(d):
        if j == i:
            out.append((np.roll(u, -1, axis=i) - u) / h[i])
        else:
            c = centered_gradient(u, grid, j)
            out.append(0.5 * (c + np.roll(c, -1, axis=i)))
    return np.stack(out)


def face_flux_average(faces, chi, grid, k) -> np.ndarray:
    """``int B (grad chi + e_k)`` with fluxes evaluated on half-step faces."""
    d = grid.d
    col = np.zeros(d)
    for i in range(d):
        g = _face_gradient(chi, grid, i)
        g[k] += 1.0
        col[i] = float(np.mean(np.sum(faces[i] * g, axis=0)))
    return col


def node_flux_average(B, chi, grid, k) -> np.ndarray:
    """Same average using node values and centred gradients."""
    d = grid.d
    g = np.stack([centered_gradient(chi, grid, j) for j in range(d)])
    g[k] += 1.0
    return np.array([float(np.mean(np.sum(B[i] * g, axis=0))) for i in range(d)])


def _bordered_mean_zero(L, rhs, tol, precond):
    N = L.shape[0]
    K = sp.bmat([[L, sp.csr_matrix(np.ones((N, 1)))], [sp.csr_matrix(np.full((1, N), 1.0 / N)), None]], format="csr")
    sol, rep = solve_linear(K, np.append(rhs, 0.0), tol=tol, precond=precond)
    return sol[:N], rep


def effective_tensor(tc: TransformedCoefficients | None, phi: FluxCorrector | None, B: np.ndarray | None = None, grid=None, tol: float = 1e-10, precond: str = "ilu") -> EffectiveTensor:
    """Homogenized tensor of ``div(B grad)`` with ``B = a~ + phi`` (or an explicit ``B``).

    Solves ``div(B(grad chi_k + e_k)) = 0`` for mean-zero periodic ``chi_k``
    with the face-flux discretization, then ``A e_k = int B(grad chi_k + e_k)``.
    """
    if B is None:
        B = tc.a_tilde + (phi.matrix() if phi is not None else 0.0)
        grid = tc.grid
    if grid is None:
        raise ValueError("grid is required with an explicit B")
    d, h = grid.d, grid.spacing
    faces = nodal_to_faces(B, grid)
    L = assemble_divergence(faces, grid)
    A = np.zeros((d, d))
    An = np.zeros((d, d))
    chis, res = [], []
    for k in range(d):
        rhs = -sum((faces[i][k] - np.roll(faces[i][k], 1, axis=i)) / h[i] for i in range(d))
        if np.max(np.abs(rhs)) <= 1e-14 * max(1.0, float(np.max(np.abs(B)))):
            chi, r = np.zeros(grid.shape), 0.0
        else:
            # the bordering row has no diagonal; row scaling keeps ILU well posed
            x, rep = _bordered_mean_zero(L, rhs.ravel(), tol, precond)
            chi, r = x.reshape(grid.shape), rep.residual
        chis.append(chi)
        res.append(r)
        A[:, k] = face_flux_average(faces, chi, grid, k)
        An[:, k] = node_flux_average(B, chi, grid, k)
    return EffectiveTensor(A, np.stack(chis), res, An)


def cell_summary(coeffs, grid, phi_method="poisson", tol=1e-10) -> dict:
    """Full cell pipeline; returns a JSON-ready dict plus the intermediate objects."""
    m = invariant_measure(coeffs, grid, tol=tol)
    tc = transformed(coeffs, m)
    phi = flux_corrector(tc, method=phi_method)
    eff = effective_tensor(tc, phi, tol=tol)
    out = {
        "measure": m.to_dict(),
        "centering_defect": centering_defect(coeffs, m).tolist(),
        "transformed": tc.to_dict(),
        "flux_corrector": phi.to_dict(),
        "effective": eff.to_dict(),
    }
    return out, (m, tc, phi, eff)
