"""Structured grids, finite-difference stencils and field I/O.

Nodes are stored in C order with axis 0 along ``y1``.  A grid axis is either
periodic (``n`` nodes, the node ``n`` being identified with node ``0``) or
bounded (``n + 1`` nodes including both end points, which are Dirichlet
nodes).
"""

from __future__ import annotations

import csv
import logging
import math
import struct
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

__all__ = [
    "StructuredGrid",
    "TorusGrid",
    "SlabGrid",
    "BoxGrid",
    "ScalarField",
    "PositivityReport",
    "StencilPositivityWarning",
    "stencil_positivity",
    "assemble_nondiv",
    "adjoint",
    "nodal_to_faces",
    "assemble_divergence",
    "centered_gradient",
    "slice_integral",
    "slice_integrals",
    "write_csv",
    "read_csv",
    "write_binary",
    "read_binary",
]


@dataclass(frozen=True)
class StructuredGrid:
    """Tensor-product grid; ``origin[k] + i*spacing[k]`` are the node coordinates."""

    origin: tuple[float, ...]
    spacing: tuple[float, ...]
    shape: tuple[int, ...]
    periodic: tuple[bool, ...]

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def axis(self, k: int) -> np.ndarray:
        return self.origin[k] + self.spacing[k] * np.arange(self.shape[k])

    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(d, *shape)``."""
        return np.stack(np.meshgrid(*(self.axis(k) for k in range(self.d)), indexing="ij"))

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for k in range(self.d):
            if not self.periodic[k]:
                idx = [slice(None)] * self.d
                idx[k] = 0
                mask[tuple(idx)] = True
                idx[k] = -1
                mask[tuple(idx)] = True
        return mask

    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask()

    @property
    def cell_volume(self) -> float:
        return math.prod(self.spacing)

    def shifted_index(self, offset) -> tuple[np.ndarray, np.ndarray]:
        """Flat index of ``node + offset`` for every node, plus a validity mask."""
        idx = np.indices(self.shape)
        valid = np.ones(self.shape, dtype=bool)
        for k, o in enumerate(offset):
            if o == 0:
                continue
            j = idx[k] + o
            if self.periodic[k]:
                j %= self.shape[k]
            else:
                valid &= (j >= 0) & (j < self.shape[k])
                j = np.clip(j, 0, self.shape[k] - 1)
            idx[k] = j
        return np.ravel_multi_index(tuple(idx), self.shape), valid


def TorusGrid(d: int, n: int) -> StructuredGrid:
    """Grid on the unit torus ``[0,1)^d`` with ``n`` nodes per axis."""
    if n < 4:
        raise ValueError(f"torus grid needs n >= 4, got {n}")
    if d < 1:
        raise ValueError("dimension must be positive")
    return StructuredGrid((0.0,) * d, (1.0 / n,) * d, (n,) * d, (True,) * d)


def SlabGrid(d: int, R: float, n1: int, nt: int) -> StructuredGrid:
    """Grid on ``[-R, R] x T^(d-1)``: ``n1`` intervals along ``y1``, ``nt`` nodes per transverse axis.

    Both ``y1 = +-R`` and ``y1 = +-1`` must fall on nodes.
    """
    if R <= 1:
        raise ValueError(f"slab half-width must exceed 1, got {R}")
    if nt < 4 or n1 < 2:
        raise ValueError("slab grid too coarse")
    h1 = 2.0 * R / n1
    k1 = (R - 1.0) / h1
    if abs(k1 - round(k1)) > 1e-9:
        raise ValueError(f"y1 = +-1 is not a node for R={R}, n1={n1}")
    return StructuredGrid((-float(R),) + (0.0,) * (d - 1), (h1,) + (1.0 / nt,) * (d - 1), (n1 + 1,) + (nt,) * (d - 1), (False,) + (True,) * (d - 1))


def slab_grid_per_unit(d: int, R: int, n: int) -> StructuredGrid:
    """Slab with the same spacing ``1/n`` on every axis."""
    return SlabGrid(d, R, 2 * R * n, n)


def BoxGrid(d: int, lo: float, hi: float, n: int) -> StructuredGrid:
    """Dirichlet box ``[lo, hi]^d`` with ``n`` intervals per axis."""
    return StructuredGrid((float(lo),) * d, ((hi - lo) / n,) * d, (n + 1,) * d, (False,) * d)


@dataclass
class ScalarField:
    grid: StructuredGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("scalar field has non-finite values")


# ---------------------------------------------------------------------------
# non-divergence stencil


def _sample(field, grid):
    y = grid.coords()
    return field.a(y), field.b(y)


def _nondiv_weights(A, b, spacing, drift_scale, mixed="adaptive"):
    """Stencil weights ``{offset: array}`` of ``a_ij d_ij + s b_i d_i``.

    Second derivatives use the 3-point stencil.  With ``mixed="adaptive"``
    each mixed pair uses the 7-point stencil whose diagonal is chosen by the
    sign of ``a_ij``, so the only possibly negative off-diagonals are the axis
    neighbours; ``mixed="symmetric"`` uses the 4-point cross stencil, which
    has negative weights wherever ``a_ij != 0``.
    """
    if mixed not in ("adaptive", "symmetric"):
        raise ValueError(f"unknown mixed stencil {mixed!r}")
    d = len(spacing)
    h = spacing
    w = {}

    def add(off, val):
        w[off] = w.get(off, 0.0) + val

    for i in range(d):
        e = [0] * d
        for sgn in (1, -1):
            e[i] = sgn
            add(tuple(e), A[i, i] / h[i] ** 2 + sgn * drift_scale * b[i] / (2.0 * h[i]))
    for i in range(d):
        for j in range(i + 1, d):
            c = A[i, j]
            if mixed == "symmetric":
                q = c / (2.0 * h[i] * h[j])
                for si in (1, -1):
                    for sj in (1, -1):
                        off = [0] * d
                        off[i], off[j] = si, sj
                        add(tuple(off), q if si == sj else -q)
                continue
            pos = np.maximum(c, 0.0) / (h[i] * h[j])
            neg = np.maximum(-c, 0.0) / (h[i] * h[j])
            ab = np.abs(c) / (h[i] * h[j])
            for si in (1, -1):
                for sj in (1, -1):
                    off = [0] * d
                    off[i], off[j] = si, sj
                    add(tuple(off), pos if si == sj else neg)
            for k in (i, j):
                for sgn in (1, -1):
                    off = [0] * d
                    off[k] = sgn
                    add(tuple(off), -ab)
    return w


@dataclass
class PositivityReport:
    ok: bool
    min_offdiag: float
    worst_node: tuple[float, ...] | None
    n_violations: int
    suggested_h: float | None

    def to_dict(self):
        return dict(self.__dict__)


class StencilPositivityWarning(UserWarning):
    """The assembled stencil is not a Markov generator at some node."""

    def __init__(self, report: PositivityReport):
        self.report = report
        hint = f"; try h <= {report.suggested_h:.3g}" if report.suggested_h else "; refinement alone will not fix it"
        super().__init__(
            f"stencil positivity violated at {report.n_violations} node(s); worst off-diagonal "
            f"{report.min_offdiag:.3e} at y={report.worst_node}{hint}"
        )


def stencil_positivity(field, grid, drift_scale=1.0, A=None, b=None, mixed="adaptive") -> PositivityReport:
    """Check ``a_ii/h_i^2 - sum_j |a_ij|/(h_i h_j) >= |s b_i|/(2 h_i)`` at every node."""
    if A is None:
        A, b = _sample(field, grid)
    w = _nondiv_weights(A, b, grid.spacing, drift_scale, mixed)
    offd = np.stack([np.broadcast_to(v, grid.shape) for v in w.values()])
    scale = max(np.max(np.abs(offd)), 1.0)
    worst = offd.min(axis=0)
    bad = worst < -1e-12 * scale
    if not bad.any():
        return PositivityReport(True, float(worst.min()), None, 0, None)
    flat = int(np.argmin(worst))
    node = np.unravel_index(flat, grid.shape)
    y = grid.coords()[(slice(None), *node)]
    # largest admissible uniform h over violating nodes
    suggested = math.inf
    d = grid.d
    for i in range(d):
        margin = A[i, i] - sum(np.abs(A[i, j]) for j in range(d) if j != i)
        drift = np.abs(drift_scale * b[i])
        need = np.where(drift > 0, 2.0 * margin / np.where(drift > 0, drift, 1.0), math.inf)
        need = np.where(margin <= 0, 0.0, need)
        suggested = min(suggested, float(need[bad].min()))
    sugg = 0.5 * suggested if 0 < suggested < math.inf else None
    return PositivityReport(False, float(worst.min()), tuple(float(v) for v in y), int(bad.sum()), sugg)


def assemble_nondiv(field, grid: StructuredGrid, drift_scale: float = 1.0, boundary: str = "identity", check=True, mixed="adaptive"):
    """Sparse matrix of ``L_h u = a_ij d_ij u + s b_i d_i u``.

    ``boundary="identity"`` turns Dirichlet-node rows into identity rows;
    ``boundary="stencil"`` keeps the stencil on those rows (columns outside the
    grid are dropped), which is what the transpose needs on a slab.
    """
    A, b = _sample(field, grid)
    w = _nondiv_weights(A, b, grid.spacing, drift_scale, mixed)
    if check:
        report = stencil_positivity(field, grid, drift_scale, A, b, mixed)
        if not report.ok:
            warnings.warn(StencilPositivityWarning(report), stacklevel=2)
    N = grid.size
    rows_all = np.arange(N)
    bmask = grid.boundary_mask().ravel()
    rows, cols, vals = [], [], []
    diag = np.zeros(N)
    for off, wt in w.items():
        wt = np.broadcast_to(wt, grid.shape).ravel()
        col, valid = grid.shifted_index(off)
        col, valid = col.ravel(), valid.ravel()
        if not np.all(valid | bmask):
            raise AssertionError("stencil leaves the grid at an interior node")
        diag -= wt  # zero row sums, counting dropped outside neighbours too
        rows.append(rows_all[valid])
        cols.append(col[valid])
        vals.append(wt[valid])
    rows.append(rows_all)
    cols.append(rows_all)
    vals.append(diag)
    L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
    if boundary == "identity" and bmask.any():
        L = _identity_rows(L, bmask)
    elif boundary != "stencil" and bmask.any():
        raise ValueError(f"unknown boundary mode {boundary!r}")
    L.sum_duplicates()
    L.sort_indices()
    return L


def _identity_rows(M, mask):
    keep = sp.diags((~mask).astype(float))
    out = (keep @ M + sp.diags(mask.astype(float))).tocsr()
    out.eliminate_zeros()
    return out


def adjoint(Lh):
    """Exact transpose, in CSR form."""
    out = Lh.T.tocsr()
    out.sort_indices()
    return out


# ---------------------------------------------------------------------------
# divergence-form stencil


def nodal_to_faces(B: np.ndarray, grid: StructuredGrid) -> list[np.ndarray]:
    """Arithmetic face averages: ``faces[i][:, k] = (B[i, :, k] + B[i, :, k+e_i]) / 2``.

    Returns, for every direction ``i``, row ``i`` of ``B`` at the faces
    ``k + e_i/2`` (shape ``(d, *shape)``).  On bounded axes the last face lies
    outside the grid and is left equal to the node value.
    """
    faces = []
    for i in range(grid.d):
        row = B[i]
        nxt = np.roll(row, -1, axis=1 + i)
        if not grid.periodic[i]:
            idx = [slice(None)] * (grid.d + 1)
            idx[1 + i] = -1
            nxt[tuple(idx)] = row[tuple(idx)]
        faces.append(0.5 * (row + nxt))
    return faces


def assemble_divergence(faces: list[np.ndarray], grid: StructuredGrid):
    """Sparse matrix of ``div(B grad u)`` with fluxes on half-step faces.

    ``faces[i][j]`` is ``B_ij`` on the face ``k + e_i/2``.  The normal
    derivative on a face is the two-point difference; tangential derivatives
    are averages of the centred differences at the two adjacent nodes.
    Dirichlet rows (bounded axes) are identity rows.
    """
    d, N, h = grid.d, grid.size, grid.spacing
    bmask = grid.boundary_mask().ravel()
    rows_all = np.arange(N)
    rows, cols, vals = [], [], []
    for i in range(d):
        up, up_valid = grid.shifted_index(_unit(d, i, 1))
        up, up_valid = up.ravel(), up_valid.ravel()
        terms = [(np.zeros(d, int), -faces[i][i] / h[i]), (_unit(d, i, 1), faces[i][i] / h[i])]
        for j in range(d):
            if j == i:
                continue
            c = faces[i][j] / (4.0 * h[j])
            for base in (np.zeros(d, int), _unit(d, i, 1)):
                terms.append((base + _unit(d, j, 1), c))
                terms.append((base - _unit(d, j, 1), -c))
        for off, coef in terms:
            coef = np.broadcast_to(coef, grid.shape).ravel()
            col, valid = grid.shifted_index(tuple(off))
            col, valid = col.ravel(), valid.ravel()
            ok = valid & up_valid
            # flux leaves node k and enters node k + e_i
            rows.append(rows_all[ok])
            cols.append(col[ok])
            vals.append(coef[ok] / h[i])
            rows.append(up[ok])
            cols.append(col[ok])
            vals.append(-coef[ok] / h[i])
            dropped = up_valid & ~valid
            if np.any(dropped & ~(bmask | bmask[up])):
                raise AssertionError("flux stencil leaves the grid next to an interior node")
    L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
    if bmask.any():
        L = _identity_rows(L, bmask)
    L.sum_duplicates()
    L.sort_indices()
    return L


def _unit(d, i, s):
    e = np.zeros(d, int)
    e[i] = s
    return e


def centered_gradient(values: np.ndarray, grid: StructuredGrid, axis: int) -> np.ndarray:
    """Centred difference along ``axis``; one-sided second order on bounded ends."""
    h = grid.spacing[axis]
    if grid.periodic[axis]:
        return (np.roll(values, -1, axis) - np.roll(values, 1, axis)) / (2.0 * h)
    return np.gradient(values, h, axis=axis, edge_order=2)


# ---------------------------------------------------------------------------
# slices


def slice_integral(values: np.ndarray, grid: StructuredGrid, y1_index: int) -> float:
    """Rectangle-rule integral over the transverse torus at the slice ``y1_index``."""
    if not -grid.shape[0] <= y1_index < grid.shape[0]:
        raise IndexError(f"slice index {y1_index} out of range for {grid.shape[0]} slices")
    return float(np.sum(values[y1_index]) * math.prod(grid.spacing[1:]))


def slice_integrals(values: np.ndarray, grid: StructuredGrid) -> np.ndarray:
    return np.sum(values.reshape(grid.shape[0], -1), axis=1) * math.prod(grid.spacing[1:])


# ---------------------------------------------------------------------------
# I/O

_MAGIC = b"IVHF"


def write_csv(path, field: ScalarField):
    coords = field.grid.coords().reshape(field.grid.d, -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"y{k + 1}" for k in range(field.grid.d)] + ["value"])
        for row in zip(*coords, field.values.ravel()):
            w.writerow([repr(float(v)) for v in row])


def read_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :-1].T, data[:, -1]


def write_binary(path, field: ScalarField):
    """Header: magic, d (uint32), then per axis shape/origin/spacing/periodic; payload float64 node-major."""
    g = field.grid
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", g.d))
        for k in range(g.d):
            fh.write(struct.pack("<Iddi", g.shape[k], g.origin[k], g.spacing[k], int(g.periodic[k])))
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def read_binary(path) -> ScalarField:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a field file")
        (d,) = struct.unpack("<I", fh.read(4))
        shape, origin, spacing, periodic = [], [], [], []
        for _ in range(d):
            n, o, h, p = struct.unpack("<Iddi", fh.read(struct.calcsize("<Iddi")))
            shape.append(n)
            origin.append(o)
            spacing.append(h)
            periodic.append(bool(p))
        grid = StructuredGrid(tuple(origin), tuple(spacing), tuple(shape), tuple(periodic))
        vals = np.frombuffer(fh.read(), dtype="<f8")
    return ScalarField(grid, vals.reshape(grid.shape))
