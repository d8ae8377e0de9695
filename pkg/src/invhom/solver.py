"""Iterative sparse solves: linear systems, normalised kernels, periodic Poisson.

Krylov iterations come from :mod:`scipy.sparse.linalg` (BiCGStab first,
restarted GMRES as fallback), preconditioned by Jacobi or, for the badly
conditioned long-slab and fine-grid systems, by an incomplete LU factor.
Every reported residual is recomputed from the returned vector.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, asdict

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

__all__ = [
    "SolveReport",
    "ConvergenceError",
    "KernelError",
    "PositivityError",
    "PoissonCompatibilityError",
    "check_csr",
    "solve_linear",
    "solve_nullspace",
    "solve_poisson_torus",
    "poisson_symbol",
]


@dataclass
class SolveReport:
    iterations: int
    residual: float
    seconds: float
    method: str

    def to_dict(self):
        return asdict(self)


class ConvergenceError(RuntimeError):
    """Krylov solve did not reach the tolerance; carries the best iterate."""

    def __init__(self, msg, x, residual):
        super().__init__(msg)
        self.x = x
        self.residual = residual


class KernelError(RuntimeError):
    pass


class PositivityError(RuntimeError):
    pass


class PoissonCompatibilityError(ValueError):
    pass


def check_csr(M) -> sp.csr_matrix:
    """Return ``M`` as canonical CSR (sorted, no duplicates), validating its shape."""
    M = sp.csr_matrix(M)
    M.sum_duplicates()
    M.sort_indices()
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"matrix must be square, got {M.shape}")
    return M


def _jacobi(M):
    diag = M.diagonal()
    bad = diag == 0
    if bad.any():
        warnings.warn(f"{int(bad.sum())} zero diagonal entries: identity used there in the Jacobi preconditioner", stacklevel=3)
        diag = np.where(bad, 1.0, diag)
    inv = 1.0 / diag
    return spla.LinearOperator(M.shape, matvec=lambda v: inv * v, dtype=float)


def _ilu(M, drop_tol, fill_factor):
    ilu = spla.spilu(M.tocsc(), drop_tol=drop_tol, fill_factor=fill_factor)
    return spla.LinearOperator(M.shape, matvec=ilu.solve, dtype=float)


def _rel_residual(M, x, rhs):
    nb = np.linalg.norm(rhs)
    r = np.linalg.norm(M @ x - rhs)
    return r / nb if nb > 0 else r


def solve_linear(M, rhs, tol=1e-10, max_iter=20000, x0=None, precond="jacobi", drop_tol=1e-5, fill_factor=20, restarts=8):
    """Solve ``M x = rhs`` to relative residual ``tol``.

    ``precond`` is ``"jacobi"`` or ``"ilu"``.  Returns ``(x, SolveReport)``;
    raises :class:`ConvergenceError` (with the best iterate) on failure.
    """
    M = check_csr(M)
    rhs = np.asarray(rhs, dtype=float).ravel()
    if rhs.shape[0] != M.shape[0]:
        raise ValueError(f"rhs length {rhs.shape[0]} does not match matrix size {M.shape[0]}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    t0 = time.perf_counter()
    if not np.any(rhs) and x0 is None:
        return np.zeros_like(rhs), SolveReport(0, 0.0, 0.0, "trivial")
    x0 = np.zeros_like(rhs) if x0 is None else np.asarray(x0, dtype=float).ravel().copy()
    if _rel_residual(M, x0, rhs) <= tol:
        return x0, SolveReport(0, _rel_residual(M, x0, rhs), time.perf_counter() - t0, "initial-guess")

    P, tag = None, "jacobi"
    if precond == "ilu":
        # dropping can leave an exactly zero pivot; retry with less dropping
        for dt in (drop_tol, drop_tol * 1e-2, 0.0):
            try:
                P, tag = _ilu(M, dt, fill_factor), "ilu"
                break
            except RuntimeError as exc:
                logger.info("incomplete LU failed with drop_tol=%g: %s", dt, exc)
    elif precond != "jacobi":
        raise ValueError(f"unknown preconditioner {precond!r}")
    if P is None:
        P = _jacobi(M)
    best_x, best_r = x0, _rel_residual(M, x0, rhs)
    nb = np.linalg.norm(rhs)
    total = 0
    # restarts: the recursive residual of BiCGStab drifts from the true one,
    # so each cycle solves for the correction against the recomputed residual
    for name in ("bicgstab", "gmres"):
        for _ in range(restarts):
            r = rhs - M @ best_x
            count = [0]

            def cb(_):
                count[0] += 1

            target = 0.5 * tol * nb / max(np.linalg.norm(r), 1e-300)
            target = min(max(target, 1e-14), 0.5)
            if name == "bicgstab":
                dx, info = spla.bicgstab(M, r, rtol=target, atol=0.0, maxiter=max_iter, M=P, callback=cb)
            else:
                dx, info = spla.gmres(M, r, rtol=target, atol=0.0, restart=60, maxiter=max(1, max_iter // 60), M=P, callback=cb, callback_type="pr_norm")
            total += count[0]
            if not np.all(np.isfinite(dx)):
                break
            x = best_x + dx
            res = _rel_residual(M, x, rhs)
            improved = res < 0.9 * best_r
            if res < best_r:
                best_x, best_r = x, res
            if best_r <= tol:
                return best_x, SolveReport(total, float(best_r), time.perf_counter() - t0, f"{name}+{tag}")
            if not improved:
                break
        logger.info("%s+%s stalled at residual %.3e", name, tag, best_r)
    raise ConvergenceError(f"no convergence: best relative residual {best_r:.3e} > tol {tol:.1e}", best_x, best_r)


def solve_nullspace(M, normalization="mean-one", tol=1e-10, weights=None, precond="jacobi", x0=None):
    """Positive kernel vector of ``M`` with unit mass, via the bordered system.

    Solves ``[[D^-1 M, e], [w^T, 0]] [m; lam] = [0; 1]`` with ``e`` constant,
    ``w`` the quadrature weights (``mean-one``: ``1/N``; ``sum-one``: ones) and
    ``D = |diag M|``.  The row scaling leaves the kernel unchanged and makes the
    reported residual ``||D^-1 M m|| / ||m||`` independent of the grid spacing.
    """
    M = check_csr(M)
    N = M.shape[0]
    if normalization not in ("mean-one", "sum-one"):
        raise ValueError(f"unknown normalization {normalization!r}")
    if weights is None:
        weights = np.full(N, 1.0 / N) if normalization == "mean-one" else np.ones(N)
    diag = np.abs(M.diagonal())
    diag[diag == 0] = 1.0
    Ms = sp.diags(1.0 / diag) @ M
    K = sp.bmat([[Ms, sp.csr_matrix(np.ones((N, 1)))], [sp.csr_matrix(weights.reshape(1, -1)), None]], format="csr")
    rhs = np.zeros(N + 1)
    rhs[-1] = 1.0
    guess = np.ones(N) / np.sum(weights) if x0 is None else np.asarray(x0, float).ravel()
    start = np.append(guess, 0.0)
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # the bordering row has no diagonal by design
        try:
            sol, rep = solve_linear(K, rhs, tol=tol, x0=start, precond=precond)
        except ConvergenceError as exc:
            raise KernelError(
                f"bordered kernel system did not converge (residual {exc.residual:.2e}); the kernel may not be "
                "one-dimensional - refine the grid"
            ) from exc
    m = sol[:N]
    mass = float(weights @ m)
    if not np.isfinite(mass) or mass == 0:
        raise KernelError("kernel vector has zero mass")
    m = m / mass
    if normalization == "mean-one":
        m = m / np.mean(m)  # exact unit mean after round-off
    scale = np.max(np.abs(m))
    if m.min() <= -tol * scale:
        node = int(np.argmin(m))
        raise PositivityError(f"kernel vector not positive: min {m.min():.3e} at node {node}")
    res = float(np.linalg.norm(Ms @ m) / np.linalg.norm(m))
    return m, SolveReport(rep.iterations, res, time.perf_counter() - t0, "bordered-" + rep.method)


def poisson_symbol(shape, spacing):
    """Eigenvalues of the periodic (2d+1)-point Laplacian on the FFT grid."""
    lam = 0.0
    for k, (n, h) in enumerate(zip(shape, spacing)):
        freq = np.fft.fftfreq(n) * n
        ev = (2.0 / h**2) * (np.cos(2.0 * np.pi * freq / n) - 1.0)
        sh = [1] * len(shape)
        sh[k] = n
        lam = lam + ev.reshape(sh)
    return lam


def solve_poisson_torus(rhs, spacing, tol=1e-10):
    """Mean-zero periodic solution of ``Lap_h u = rhs`` (Lap_h the compact Laplacian).

    The periodic Laplacian is diagonal in the discrete Fourier basis, so the
    solve is a division by the symbol.  A mean defect up to ``tol`` (relative
    to ``max|rhs|``) is removed; larger defects raise.
    """
    rhs = np.asarray(rhs, dtype=float)
    mean = float(rhs.mean())
    scale = max(float(np.max(np.abs(rhs))), 1.0)
    if abs(mean) > tol * scale:
        raise PoissonCompatibilityError(f"right-hand side has mean {mean:.3e}; periodic Poisson problem is incompatible")
    if not np.any(rhs):
        return np.zeros_like(rhs)
    lam = poisson_symbol(rhs.shape, spacing)
    lam.flat[0] = 1.0
    uh = np.fft.fftn(rhs - mean) / lam
    uh.flat[0] = 0.0
    return np.real(np.fft.ifftn(uh))
