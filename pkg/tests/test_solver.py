import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from invhom.solver import (
    ConvergenceError,
    KernelError,
    PoissonCompatibilityError,
    PositivityError,
    solve_linear,
    solve_nullspace,
    solve_poisson_torus,
)


def _lap1d(n):
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")


@pytest.mark.parametrize("precond", ["jacobi", "ilu"])
def test_solve_linear_against_direct(precond):
    rng = np.random.default_rng(0)
    M = _lap1d(200) + sp.diags(rng.random(200) * 0.1)
    M = M.tocsr()
    b = rng.standard_normal(200)
    x, rep = solve_linear(M, b, tol=1e-12, precond=precond)
    np.testing.assert_allclose(x, sp.linalg.spsolve(M.tocsc(), b), rtol=1e-8)
    assert rep.residual <= 1e-12


def test_solve_linear_zero_rhs_and_errors():
    M = _lap1d(5)
    x, rep = solve_linear(M, np.zeros(5))
    assert not x.any() and rep.method == "trivial"
    with pytest.raises(ValueError):
        solve_linear(M, np.ones(4))
    with pytest.raises(ValueError):
        solve_linear(M, np.ones(5), precond="amg")


def test_singular_system_reports_non_convergence():
    M = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(ConvergenceError) as exc:
        solve_linear(M, np.array([1.0, 0.0]), max_iter=50, restarts=2)
    assert exc.value.residual > 0


def test_nullspace_of_random_walk_generator():
    """Stationary law of a birth-death chain matches detailed balance."""
    n = 30
    up = np.linspace(1.0, 2.0, n)
    down = np.linspace(2.0, 1.0, n)
    Q = np.zeros((n, n))
    for i in range(n):
        Q[i, (i + 1) % n] = up[i]
        Q[i, (i - 1) % n] = down[i]
        Q[i, i] = -up[i] - down[i]
    m, rep = solve_nullspace(sp.csr_matrix(Q.T), tol=1e-12)
    # oracle: dense eigenvector for eigenvalue 0
    w, V = np.linalg.eig(Q.T)
    ref = np.real(V[:, np.argmin(np.abs(w))])
    ref = ref / ref.mean()
    np.testing.assert_allclose(m, ref, rtol=1e-8)
    assert m.mean() == pytest.approx(1.0, abs=1e-14)


def test_nullspace_negative_vector_raises():
    # kernel is (1, -1): not a probability vector
    M = sp.csr_matrix(np.array([[1.0, 1.0], [-1.0, -1.0]]))
    with pytest.raises(PositivityError):
        solve_nullspace(M, normalization="sum-one", weights=np.array([1.0, 0.0]))


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4))
def test_poisson_torus_inverts_eigenfunctions(k1, k2):
    n = 32
    h = 1.0 / n
    y = np.meshgrid(np.arange(n) * h, np.arange(n) * h, indexing="ij")
    u = np.cos(2 * np.pi * (k1 * y[0] + k2 * y[1]))
    lam = 2 / h**2 * (np.cos(2 * np.pi * k1 / n) - 1) + 2 / h**2 * (np.cos(2 * np.pi * k2 / n) - 1)
    np.testing.assert_allclose(solve_poisson_torus(lam * u, (h, h)), u, atol=1e-10)


def test_poisson_torus_incompatible_rhs():
    with pytest.raises(PoissonCompatibilityError):
        solve_poisson_torus(np.ones((8, 8)), (0.125, 0.125))
