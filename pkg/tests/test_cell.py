import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from invhom import cell
from invhom.fields import PeriodicCoefficients, exact_measure, preset
from invhom.grid import TorusGrid, assemble_nondiv
from invhom.solver import PoissonCompatibilityError

from conftest import loglog_slope


def test_identity_measure_is_one():
    m = cell.invariant_measure(preset("identity"), TorusGrid(2, 16))
    np.testing.assert_allclose(m.values, 1.0, atol=1e-12)
    assert m.mean == pytest.approx(1.0, abs=1e-14)


def test_layered_measure_matches_closed_form():
    g = TorusGrid(2, 32)
    m = cell.invariant_measure(preset("layered"), g, tol=1e-13)
    exact = exact_measure("layered")(g.coords())
    exact = exact / exact.mean()
    assert np.max(np.abs(m.values - exact)) < 1e-10


@pytest.mark.parametrize("name", ["trig_plus", "trig_minus"])
def test_manufactured_measure_second_order(name):
    errs = []
    ns = (16, 32, 64)
    for n in ns:
        g = TorusGrid(2, n)
        m = cell.invariant_measure(preset(name), g, tol=1e-13)
        errs.append(np.max(np.abs(m.values - exact_measure(name)(g.coords()))))
    assert 1.7 <= loglog_slope([1 / n for n in ns], errs) <= 2.3


@settings(max_examples=8, deadline=None)
@given(st.floats(0.05, 0.4), st.floats(0.0, 0.3))
def test_measure_annihilates_generator(amp, shear):
    """Duality <L u, m> = 0 for random coefficients and random u."""
    c = PeriodicCoefficients.from_expressions(
        [[f"1 + {amp}*sin(2*pi*y2)", f"{shear}"], [f"{shear}", "1"]],
        ["0", f"{amp}*cos(2*pi*y1)"],
    )
    g = TorusGrid(2, 12)
    m = cell.invariant_measure(c, g, tol=1e-13)
    L = assemble_nondiv(c, g)
    u = np.random.default_rng(0).standard_normal(g.size)
    assert abs((L @ u) @ m.values.ravel()) <= 1e-9 * np.linalg.norm(u) * np.linalg.norm(m.values)
    assert m.min > 0


def test_flux_corrector_is_antisymmetric_and_inverts_divergence():
    c = preset("trig_plus")
    g = TorusGrid(2, 32)
    m = cell.invariant_measure(c, g, tol=1e-13)
    tc = cell.transformed(c, m)
    for method in ("poisson", "stream"):
        phi = cell.flux_corrector(tc, method)
        P = phi.matrix()
        np.testing.assert_array_equal(P, -np.swapaxes(P, 0, 1))
        assert phi.div_residual < 0.02


def test_stream_function_of_shear_flow():
    """b~ = (sin 2pi y2, 0) has Psi = -cos(2 pi y2)/(2 pi) (d2 Psi = b~_1)."""
    g = TorusGrid(2, 128)
    y = g.coords()
    bt = np.stack([np.sin(2 * np.pi * y[1]), 0 * y[0]])
    psi, _ = cell.stream_function_torus(bt, g)
    assert np.max(np.abs(psi + np.cos(2 * np.pi * y[1]) / (2 * np.pi))) < 1e-4


def test_flux_corrector_rejects_uncentred_drift():
    g = TorusGrid(2, 16)
    bad = cell.TransformedCoefficients(g, np.zeros((2, 2, 16, 16)), np.zeros((2, 16, 16)), np.ones((2, 16, 16)), np.ones((16, 16)))
    with pytest.raises(PoissonCompatibilityError):
        cell.flux_corrector(bad)
    with pytest.raises(ValueError):
        cell.flux_corrector(cell.transformed(preset("identity"), np.ones((16, 16)), g), method="fourier")


def test_effective_tensor_identity():
    g = TorusGrid(2, 16)
    eff = cell.effective_tensor(None, None, B=np.broadcast_to(np.eye(2)[:, :, None, None], (2, 2, 16, 16)).copy(), grid=g)
    np.testing.assert_allclose(eff.A, np.eye(2), atol=1e-10)


def test_effective_tensor_layered_oracle():
    """Laminate: harmonic mean across the layers, arithmetic mean along them."""
    errs = []
    ns = (16, 32, 64)
    for n in ns:
        g = TorusGrid(2, n)
        beta = 2 + np.sin(2 * np.pi * g.coords()[0])
        B = np.eye(2)[:, :, None, None] * beta
        eff = cell.effective_tensor(None, None, B=B, grid=g, tol=1e-12)
        errs.append(abs(eff.A[0, 0] - np.sqrt(3.0)))
        assert eff.A[1, 1] == pytest.approx(2.0, abs=1e-12)
        assert abs(eff.A[0, 1]) < 1e-10
    assert 1.7 <= loglog_slope([1 / n for n in ns], errs) <= 2.3


def test_effective_tensor_is_elliptic_for_trig():
    for name in ("trig_plus", "trig_minus"):
        s, _ = cell.cell_summary(preset(name), TorusGrid(2, 32))
        assert s["effective"]["min_sym_eigenvalue"] > 0
