import numpy as np
import pytest

from invhom import interface as itf
from invhom.fields import field_preset, preset
from invhom.grid import slab_grid_per_unit


def test_cutoffs_partition_outside_zero():
    y1 = np.linspace(-2, 2, 41)
    pp, pm = itf.cutoffs(y1)
    np.testing.assert_allclose(pp[y1 >= 1], 1.0)
    np.testing.assert_allclose(pm[y1 <= -1], 1.0)
    assert np.all(pp[y1 <= 0] == 0) and np.all(pm[y1 >= 0] == 0)


def test_q_minus_equalises_slice_flux(coarse_trig_pipeline):
    p = coarse_trig_pipeline
    assert p.cfg.q_minus * p.minus.flux == pytest.approx(p.cfg.q_plus * p.plus.flux, rel=1e-12)


def test_q_minus_of_identity_pair_is_q_plus():
    f = field_preset("identity")
    a = itf.cell_side(f.plus, 16)
    assert itf.compute_q_minus(a, a, 2.5) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        itf.compute_q_minus(a, a, 0.0)


def test_identity_slab_measure_is_constant():
    pipe = itf.build_interface(field_preset("identity"), 8, 4)
    np.testing.assert_allclose(pipe.slab.values, 1.0, atol=1e-10)


def test_layered_two_sided_slab_measure_closed_form():
    """(a11 m)'' = 0 in y1 with a11 m = const at both ends gives m = K / a11."""
    f = field_preset("layered")
    pipe = itf.build_interface(f, 16, 4, with_corrector=False)
    g = pipe.grid
    a11 = f.a(g.coords())[0, 0]
    K = pipe.cfg.q_plus * pipe.plus.flux
    np.testing.assert_allclose(pipe.slab.values * a11, K, rtol=1e-9)


def test_slab_flux_constant(coarse_trig_pipeline):
    p = coarse_trig_pipeline
    flux = itf.slab_flux(p.slab.values, p.field, p.grid)
    np.testing.assert_allclose(flux, p.cfg.q_plus * p.plus.flux, rtol=1e-9)


def test_deviation_source_supported_near_interface(coarse_trig_pipeline):
    p = coarse_trig_pipeline
    dv = itf.deviation_field(p.slab, p.cfg, p.plus, p.minus)
    assert dv.support_leak < 1e-8
    assert dv.equation_residual < 1e-8
    # boundary rows carry the one-sided data exactly
    assert np.max(np.abs(dv.v[0])) < 1e-12 and np.max(np.abs(dv.v[-1])) < 1e-12


def test_fit_exponential_recovers_injected_rate():
    t = np.linspace(2, 6, 60)
    f = itf.fit_exponential(t, 0.7 * np.exp(-3.0 * t))
    assert f.rate == pytest.approx(3.0, rel=1e-10) and f.amplitude == pytest.approx(0.7, rel=1e-9)
    assert f.r2 == pytest.approx(1.0)


def test_fit_exponential_degenerate_at_floor():
    f = itf.fit_exponential(np.arange(5.0), np.full(5, 1e-18))
    assert f.degenerate and not f.accepted()


def test_decay_fit_window_validation():
    g = slab_grid_per_unit(2, 6, 8)
    v = np.zeros(g.shape)
    with pytest.raises(ValueError):
        itf.decay_fit(v, g, "plus", window=(1.0, 4.0))
    with pytest.raises(ValueError):
        itf.decay_fit(v, g, "up")


def test_max_principle_excess_reports_layered_overshoot():
    pipe = itf.build_interface(field_preset("layered"), 16, 4, with_corrector=False)
    assert pipe.slab.max_principle_excess() > 0.1
    assert pipe.slab.measure_bounds_ok()


def test_strict_mode_raises_on_excursion():
    f = field_preset("layered")
    pipe = itf.build_interface(f, 8, 4, with_corrector=False)
    with pytest.raises(itf.MaximumPrincipleError):
        itf.solve_slab_measure(f, pipe.cfg, pipe.grid, pipe.plus, pipe.minus, strict=True)


def test_interface_flux_corrector_matches_sides(coarse_trig_pipeline):
    ifc = coarse_trig_pipeline.corrector
    assert ifc.compat_defect < 1e-7
    P = ifc.matrix()
    np.testing.assert_array_equal(P, -np.swapaxes(P, 0, 1))
    for M in (ifc.M_plus, ifc.M_minus):
        np.testing.assert_array_equal(M, -M.T)
    assert ifc.match_plus[-1] < ifc.match_plus[len(ifc.match_plus) // 2 + 1]


def test_interface_config_validation():
    with pytest.raises(ValueError):
        itf.InterfaceConfig(1.0, -1.0, 8)
    with pytest.raises(ValueError):
        itf.InterfaceConfig(1.0, 1.0, 2)


def test_decay_fit_of_vanishing_profile():
    """m_R = K / a11 exactly for a layered/constant pair: v is solver noise, the fit says so."""
    from invhom.fields import CoefficientField

    f = CoefficientField(preset("layered"), preset("double"))
    pipe = itf.build_interface(f, 16, 6, with_corrector=False)
    dv = itf.deviation_field(pipe.slab, pipe.cfg, pipe.plus, pipe.minus)
    for side in ("plus", "minus"):
        fit = itf.decay_fit(dv.v, pipe.grid, side)
        assert fit.vanishes and not fit.accepted()
