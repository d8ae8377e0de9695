"""Shared, session-cached numerical fixtures (the slab solves take seconds)."""

import numpy as np
import pytest

from invhom.fields import field_preset
from invhom.interface import build_interface


def loglog_slope(h, err):
    """Least-squares slope of log(err) against log(h)."""
    return float(np.polyfit(np.log(np.asarray(h, float)), np.log(np.asarray(err, float)), 1)[0])


@pytest.fixture(scope="session")
def trig_pipeline():
    """Two-sided trigonometric preset, h = 1/64, R = 8."""
    return build_interface(field_preset("trig"), 64, 8, 1.0, tol=1e-13)


@pytest.fixture(scope="session")
def trig_pipeline_r12():
    return build_interface(field_preset("trig"), 64, 12, 1.0, tol=1e-13, with_corrector=False)


@pytest.fixture(scope="session")
def coarse_trig_pipeline():
    """Cheap version for unit tests: h = 1/16, R = 6."""
    return build_interface(field_preset("trig"), 16, 6, 1.0, tol=1e-13)


def pytest_terminal_summary(terminalreporter):
    """Print one PASS/FAIL line per acceptance criterion."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(RESULTS):
        parts = RESULTS[crit]
        ok = all(p for _, p, _ in parts)
        failed = [name for name, p, _ in parts if not p]
        tail = "" if ok else "  (failing: " + "; ".join(failed) + ")"
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {crit:2d}: {len(parts) - len(failed)}/{len(parts)} parts{tail}")
    for crit in sorted(RESULTS):
        for name, p, detail in RESULTS[crit]:
            tr.write_line(f"    [{'PASS' if p else 'FAIL'}] {crit}/{name}: {detail}")
