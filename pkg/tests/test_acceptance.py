"""Acceptance suite: one PASS/FAIL line per criterion.

Each criterion is split into its parts; a criterion passes when all of its
parts pass.  The lines are printed at the end of the pytest run (see
``conftest.pytest_terminal_summary``) and by each test when run with ``-s``.

Rate fits are only meaningful while the errors are above round-off.  When a
quantity is already at solver precision on every grid (the discrete scheme
conserves it exactly), the rate is reported as undefined and the part fails:
the literal "rate close to h^2" statement is not observable.
"""

from __future__ import annotations

import warnings
from collections import defaultdict

import numpy as np
import pytest

from invhom import cell, interface as itf
from invhom.fields import PRESETS, exact_measure, field_preset, preset
from invhom.grid import StencilPositivityWarning, TorusGrid, assemble_nondiv, slab_grid_per_unit, stencil_positivity
from invhom.homogen import convergence_study, piecewise_tensor
from invhom.interface import build_interface

from conftest import loglog_slope

RESULTS: dict[int, list[tuple[str, bool, str]]] = defaultdict(list)

# relative size below which an error is solver noise, not discretisation error
ROUNDOFF = 1e-10
ORDER_BAND = (1.7, 2.3)


def record(criterion: int, part: str, passed: bool, detail: str):
    RESULTS[criterion].append((part, bool(passed), detail))
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion} / {part}: {detail}")
    assert passed, detail


def order_fit(hs, errs, scale=1.0):
    """Slope of log err vs log h, or None when the errors are at round-off."""
    errs = np.asarray(errs, float)
    if np.min(errs) <= ROUNDOFF * scale:
        return None
    return loglog_slope(hs, errs)


def rate_detail(slope, errs):
    e = ", ".join(f"{x:.3e}" for x in errs)
    if slope is None:
        return f"errors [{e}] are at round-off on every grid; rate undefined (quantity conserved exactly by the scheme)"
    return f"errors [{e}], slope {slope:.3f} (band {ORDER_BAND})"


def in_band(slope):
    return slope is not None and ORDER_BAND[0] <= slope <= ORDER_BAND[1]


# ---------------------------------------------------------------------------
# 1. invariant-measure exactness


def test_c1_identity_measure():
    m = cell.invariant_measure(preset("identity"), TorusGrid(2, 32), tol=1e-13)
    err = float(np.max(np.abs(m.values - 1.0)))
    record(1, "identity m == 1", err <= 1e-12, f"max |m - 1| = {err:.2e} (tol 1e-12)")


def test_c1_layered_order():
    ns = (32, 64, 128)
    errs = []
    for n in ns:
        g = TorusGrid(2, n)
        m = cell.invariant_measure(preset("layered"), g, tol=1e-13)
        ex = exact_measure("layered")(g.coords())
        errs.append(float(np.max(np.abs(m.values - ex / ex.mean()))))
    slope = order_fit([1 / n for n in ns], errs)
    record(1, "layered closed form, order fit", in_band(slope), rate_detail(slope, errs))


# ---------------------------------------------------------------------------
# 2. duality and positivity on every bundled preset


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_c2_duality_positivity(name):
    c = preset(name)
    g = TorusGrid(2, 32)
    m = cell.invariant_measure(c, g, tol=1e-13)
    L = assemble_nondiv(c, g, check=False)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        u = rng.standard_normal(g.size)
        worst = max(worst, abs(float((L @ u) @ m.values.ravel())) / (np.linalg.norm(u) * np.linalg.norm(m.values)))
    ok = worst <= 1e-9 and m.min > 0 and abs(m.mean - 1.0) <= 1e-12
    record(2, name, ok, f"duality {worst:.2e} (<= 1e-9), min m {m.min:.4f} (> 0), |mean - 1| {abs(m.mean - 1):.1e} (<= 1e-12)")


# ---------------------------------------------------------------------------
# 3. centering and slice-flux identities

NS3 = (32, 64, 128)


@pytest.fixture(scope="module")
def cell_sequences():
    out = {}
    for name in ("trig_plus", "trig_minus"):
        rows = []
        for n in NS3:
            g = TorusGrid(2, n)
            c = preset(name)
            m = cell.invariant_measure(c, g, tol=1e-13)
            tc = cell.transformed(c, m)
            rows.append((g, c, m, tc))
        out[name] = rows
    return out


@pytest.mark.parametrize("name", ["trig_plus", "trig_minus"])
def test_c3_centering_rate(cell_sequences, name):
    errs = [float(np.max(np.abs(cell.centering_defect(c, m)))) for g, c, m, tc in cell_sequences[name]]
    slope = order_fit([1 / n for n in NS3], errs)
    record(3, f"centering defect rate ({name})", in_band(slope), rate_detail(slope, errs))


@pytest.mark.parametrize("name", ["trig_plus", "trig_minus"])
def test_c3_slice_variation_rate(cell_sequences, name):
    from invhom.grid import slice_integrals

    errs = []
    for g, c, m, tc in cell_sequences[name]:
        S = slice_integrals(c.a(g.coords())[0, 0] * m.values, g)
        errs.append(float(np.ptp(S) / abs(S.mean())))
    slope = order_fit([1 / n for n in NS3], errs)
    record(3, f"slice variation of a11 m, rate ({name})", in_band(slope), rate_detail(slope, errs))


# ---------------------------------------------------------------------------
# 4. weak maximum principle


@pytest.mark.parametrize("name", ["trig", "layered"])
def test_c4_slab_within_boundary_data(name):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pipe = build_interface(field_preset(name), 32, 8, with_corrector=False)
    sm = pipe.slab
    lo, hi = sm.data_range
    record(
        4,
        f"slab solve within boundary data ({name})",
        sm.max_principle_ok(1e-8),
        f"data range [{lo:.5f}, {hi:.5f}], m_R range [{sm.min:.5f}, {sm.max:.5f}], relative excess {sm.max_principle_excess():.3e} (tol 1e-8)",
    )


def test_c4_positivity_violation_detected():
    from invhom.fields import PeriodicCoefficients

    strong = PeriodicCoefficients.from_expressions([["1", "0"], ["0", "1"]], ["0", "40*sin(2*pi*y1)"])
    g = TorusGrid(2, 8)
    rep = stencil_positivity(strong, g)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assemble_nondiv(strong, g)
    warned = any(issubclass(w.category, StencilPositivityWarning) for w in caught)
    record(4, "coarse non-positive stencil reported", (not rep.ok) and warned, f"{rep.n_violations} violating nodes, min off-diagonal {rep.min_offdiag:.2f}, suggested h {rep.suggested_h}")


# ---------------------------------------------------------------------------
# 5. two-sided bounds of the interface measure


def test_c5_measure_bounds(trig_pipeline):
    sm = trig_pipeline.slab
    lo, hi = sm.torus_range
    record(5, "1/2 min(q m) <= m_R <= 3/2 max(q m)", sm.measure_bounds_ok(), f"m_R in [{sm.min:.5f}, {sm.max:.5f}] vs [{0.5 * lo:.5f}, {1.5 * hi:.5f}]")


# ---------------------------------------------------------------------------
# 6. exponential decay


@pytest.fixture(scope="module")
def deviations(trig_pipeline, trig_pipeline_r12):
    out = {}
    for p in (trig_pipeline, trig_pipeline_r12):
        out[p.cfg.R] = (p, itf.deviation_field(p.slab, p.cfg, p.plus, p.minus))
    return out


@pytest.mark.parametrize("side", ["plus", "minus"])
def test_c6_decay_fits(deviations, side):
    p, dv = deviations[8]
    f = itf.decay_fit(dv.v, p.grid, side)
    ok = f.accepted(0.98)
    record(6, f"decay fit R=8 ({side})", ok, f"|v|: c={f.value.rate:.4f} R2={f.value.r2:.5f}; |grad v|: c={f.gradient.rate:.4f} R2={f.gradient.r2:.5f}")


@pytest.mark.parametrize("side", ["plus", "minus"])
def test_c6_rate_stable_in_R(deviations, side):
    (p8, d8), (p12, d12) = deviations[8], deviations[12]
    f8, f12 = itf.decay_fit(d8.v, p8.grid, side), itf.decay_fit(d12.v, p12.grid, side)
    ch = abs(f12.value.rate - f8.value.rate) / f8.value.rate
    chg = abs(f12.gradient.rate - f8.gradient.rate) / f8.gradient.rate
    ok = f12.accepted(0.98) and ch < 0.10 and chg < 0.10
    record(6, f"rate change R=8 -> 12 ({side})", ok, f"c {f8.value.rate:.4f} -> {f12.value.rate:.4f} ({100 * ch:.2f}%), grad {100 * chg:.2f}% (< 10%)")


def test_c6_injected_exponential():
    g = slab_grid_per_unit(2, 8, 64)
    y = g.coords()
    v = np.exp(-3.0 * np.abs(y[0])) * np.cos(2 * np.pi * y[1])
    errs = []
    for side in ("plus", "minus"):
        f = itf.decay_fit(v, g, side)
        errs += [abs(f.value.rate - 3.0) / 3.0, abs(f.gradient.rate - 3.0) / 3.0]
    worst = max(errs)
    record(6, "self-test: injected e^{-3|y1|} cos(2 pi y2)", worst <= 0.005, f"worst relative rate error {worst:.2e} (<= 0.5%)")


# ---------------------------------------------------------------------------
# 7. flux-zero identity and interface flux constancy


@pytest.fixture(scope="module")
def flux_sequence():
    rows = []
    for n in (16, 32, 64):
        p = build_interface(field_preset("trig"), n, 8, with_corrector=False)
        rows.append((p, itf.deviation_field(p.slab, p.cfg, p.plus, p.minus)))
    return rows


def test_c7_flux_zero_rate(flux_sequence):
    errs = []
    for p, dv in flux_sequence:
        _, fz = itf.flux_zero_check(dv.v, p.field, p.grid)
        errs.append(float(np.max(np.abs(fz)) / (p.cfg.q_plus * p.plus.flux)))
    slope = order_fit([1 / 16, 1 / 32, 1 / 64], errs)
    record(7, "max |int a11 v| decreases like h^2", in_band(slope), rate_detail(slope, errs))


def test_c7_flux_constancy(flux_sequence):
    worst = []
    ok = True
    for p, _ in flux_sequence:
        h = p.grid.spacing[0]
        flux = itf.slab_flux(p.slab.values, p.field, p.grid)
        dev = float(np.max(np.abs(flux - p.cfg.q_plus * p.plus.flux)) / (p.cfg.q_plus * p.plus.flux))
        worst.append(dev)
        ok &= dev <= 10 * h**2
    record(7, "slice flux of m_R equals q+ S+", ok, "relative deviations " + ", ".join(f"{d:.2e}" for d in worst) + " (<= 10 h^2)")


# ---------------------------------------------------------------------------
# 8. flux correctors


def test_c8_antisymmetric(cell_sequences, trig_pipeline):
    worst = 0.0
    for name in cell_sequences:
        g, c, m, tc = cell_sequences[name][0]
        for method in ("poisson", "stream"):
            P = cell.flux_corrector(tc, method).matrix()
            worst = max(worst, float(np.max(np.abs(P + np.swapaxes(P, 0, 1)))))
    P = trig_pipeline.corrector.matrix()
    worst = max(worst, float(np.max(np.abs(P + np.swapaxes(P, 0, 1)))))
    record(8, "phi antisymmetric exactly", worst == 0.0, f"max |phi + phi^T| = {worst}")


@pytest.mark.parametrize("name", ["trig_plus", "trig_minus"])
def test_c8_divergence_residual_rate(cell_sequences, name):
    errs = [cell.flux_corrector(tc, "poisson").div_residual for g, c, m, tc in cell_sequences[name]]
    slope = order_fit([1 / n for n in NS3], errs)
    record(8, f"div phi - b~ residual rate ({name})", in_band(slope), rate_detail(slope, errs))


@pytest.mark.parametrize("name", ["trig_plus", "trig_minus"])
def test_c8_stream_function_oracle(cell_sequences, name):
    errs = []
    for g, c, m, tc in cell_sequences[name]:
        p = cell.flux_corrector(tc, "poisson").matrix()[1, 0]
        psi = cell.flux_corrector(tc, "stream").matrix()[1, 0]
        errs.append(float(np.max(np.abs(p - psi))))
    slope = order_fit([1 / n for n in NS3], errs)
    record(8, f"phi_21 = Psi ({name})", in_band(slope), rate_detail(slope, errs))


@pytest.mark.parametrize("side", ["plus", "minus"])
def test_c8_interface_corrector_decay(trig_pipeline, side):
    ifc = trig_pipeline.corrector
    f = ifc.fit_plus if side == "plus" else ifc.fit_minus
    M = ifc.M_plus if side == "plus" else ifc.M_minus
    record(8, f"|phi_b - q phi + M| decay ({side})", f.accepted(0.95), f"c={f.rate:.4f}, R2={f.r2:.5f} (>= 0.95), M_21={M[1, 0]:.4e}")


# ---------------------------------------------------------------------------
# 9. effective tensors


def test_c9_identity():
    g = TorusGrid(2, 32)
    tc = cell.transformed(preset("identity"), np.ones(g.shape), g)
    eff = cell.effective_tensor(tc, cell.flux_corrector(tc), tol=1e-12)
    err = float(np.max(np.abs(eff.A - np.eye(2))))
    record(9, "identity -> A = I", err <= 1e-10, f"max |A - I| = {err:.2e} (<= 1e-10)")


def test_c9_layered_oracle():
    ns = (16, 32, 64)
    errs = []
    along = 0.0
    for n in ns:
        g = TorusGrid(2, n)
        B = np.eye(2)[:, :, None, None] * (2 + np.sin(2 * np.pi * g.coords()[0]))
        A = cell.effective_tensor(None, None, B=B, grid=g, tol=1e-12).A
        errs.append(float(abs(A[0, 0] - np.sqrt(3.0))))  # harmonic mean across layers
        along = max(along, float(abs(A[1, 1] - 2.0)), float(abs(A[0, 1])))  # arithmetic mean along
    slope = order_fit([1 / n for n in ns], errs)
    ok = in_band(slope) and along <= 1e-10
    record(9, "layered -> harmonic/arithmetic means", ok, rate_detail(slope, errs) + f"; along-layer error {along:.1e}")


# ---------------------------------------------------------------------------
# 10. convergence of the oscillating problem

EPS = (1 / 8, 1 / 16, 1 / 32)


@pytest.mark.parametrize("name", ["trig", "trig_one_sided"])
def test_c10_convergence(name):
    pipe = build_interface(field_preset(name), 16, 8)
    exp = convergence_study(pipe, EPS, tol=1e-10, max_seconds=600, pt=piecewise_tensor(pipe))
    errs = [r["interior_Linf"] for r in exp.rows]
    rate = exp.rates.get("interior_Linf")
    ok = (not exp.truncated) and exp.monotone() and rate is not None and rate.in_band(0.7, 1.3)
    detail = "interior Linf " + ", ".join(f"{e:.3e}" for e in errs)
    detail += f"; slope {rate.slope:.3f} (band [0.7, 1.3])" if rate else f"; truncated: {exp.reason}"
    record(10, f"O(eps) rate ({name})", ok, detail)
