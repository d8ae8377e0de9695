"""Command-line entry point.

    invhom <cell|interface|decay|convergence|all> --config run.yaml [--out DIR] [--verbose]

Writes ``summary.json`` (plus ``slices.csv``, ``convergence.csv`` and
optional field dumps) to the output directory.  Exit status: 0 when every
gating check passes, 2 when a check fails or the budget truncated the run,
1 on configuration or execution errors.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import platform
import sys
import time
import warnings
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import cell as cellmod
from .config import COMMANDS, ConfigError, RunConfig, load_config
from .fields import CoefficientField, PeriodicCoefficients, field_preset, preset, validate
from .grid import ScalarField, StencilPositivityWarning, TorusGrid, assemble_nondiv, slab_grid_per_unit, write_binary, write_csv
from .homogen import ConvergenceExperiment, convergence_study, piecewise_tensor
from .interface import (
    build_interface,
    decay_fit,
    deviation_field,
    flux_zero_check,
    slab_flux,
    slice_profiles,
    solve_slab_measure,
    InterfaceConfig,
)

logger = logging.getLogger("invhom")

SCHEMA_VERSION = 1

__all__ = ["main", "run", "ValidationError"]


class ValidationError(RuntimeError):
    """The coefficients violate a standing assumption."""


_MESSAGES = {
    "b1_zero": "the first drift component must vanish identically (b1 = 0 is required)",
    "symmetric": "the diffusion matrix must be symmetric",
    "elliptic": "the diffusion matrix must be uniformly elliptic",
    "periodic": "the coefficients must be 1-periodic",
    "c1_seam": "the interface blend must be continuously differentiable",
    "pieces_exact": "outside |y1| <= 1 the field must equal its periodic pieces",
}


# ---------------------------------------------------------------------------
# helpers


def _side(side_cfg: dict, d: int) -> PeriodicCoefficients:
    if "preset" in side_cfg:
        return preset(side_cfg["preset"], d)
    return PeriodicCoefficients.from_expressions(side_cfg["a"], side_cfg["b"])


def build_field(cfg: RunConfig) -> CoefficientField:
    d = cfg["dimension"]
    f = cfg["field"]
    if "preset" in f:
        return field_preset(f["preset"], d)
    return CoefficientField(_side(f["plus"], d), _side(f["minus"], d))


class Checks:
    def __init__(self):
        self.items = []

    def add(self, name, passed, value=None, threshold=None, gating=True, note=None):
        item = {"name": name, "passed": bool(passed), "value": _jsonable(value), "threshold": threshold, "gating": gating}
        if note:
            item["note"] = note
        self.items.append(item)
        logger.info("%s %s: %s", "PASS" if passed else ("FAIL" if gating else "info"), name, value)
        return passed

    @property
    def ok(self):
        return all(c["passed"] for c in self.items if c["gating"])


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _split_timing(obj, path, timing):
    """Move every ``seconds`` entry into ``timing`` so the rest is deterministic."""
    if isinstance(obj, dict):
        out = {}
        for k, v in obj.items():
            if k == "seconds":
                timing[".".join(path)] = v
            else:
                out[k] = _split_timing(v, path + [str(k)], timing)
        return out
    if isinstance(obj, list):
        return [_split_timing(v, path + [str(i)], timing) for i, v in enumerate(obj)]
    return obj


def _validate_field(field, checks):
    rep = validate(field)
    for name, ok in rep.checks.items():
        checks.add(f"validate.{name}", ok)
    if not rep.ok:
        msgs = "; ".join(_MESSAGES.get(k, k) for k in rep.failures())
        raise ValidationError(f"coefficient validation failed: {msgs} (max|b1| = {rep.max_abs_b1:.3g})")
    return rep


def _dump(outdir: Path, name: str, grid, values, fmt):
    (outdir / "fields").mkdir(parents=True, exist_ok=True)
    fld = ScalarField(grid, values)
    if fmt == "binary":
        write_binary(outdir / "fields" / f"{name}.bin", fld)
    else:
        write_csv(outdir / "fields" / f"{name}.csv", fld)


# ---------------------------------------------------------------------------
# stages


def stage_cell(cfg, field, checks, outdir, summary):
    n = cfg["cell"]["n"]
    tol = cfg["tolerances"]["cell"]
    rng = np.random.default_rng(cfg["seed"])
    out = {}
    for side, coeffs in (("plus", field.plus), ("minus", field.minus)):
        g = TorusGrid(field.dimension, n)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", StencilPositivityWarning)
            L = assemble_nondiv(coeffs, g)
        pos = [w for w in caught if issubclass(w.category, StencilPositivityWarning)]
        checks.add(f"cell.{side}.stencil_positivity", not pos, None if not pos else str(pos[0].message))
        m = cellmod.invariant_measure(coeffs, g, tol=tol)
        checks.add(f"cell.{side}.measure_positive", m.min > 0, m.min, 0.0)
        checks.add(f"cell.{side}.measure_mean", abs(m.mean - 1.0) <= 1e-12, abs(m.mean - 1.0), 1e-12)
        duality = 0.0
        for _ in range(cfg["cell"]["duality_samples"]):
            u = rng.standard_normal(g.size)
            duality = max(duality, abs(float((L @ u) @ m.values.ravel())) / (np.linalg.norm(u) * np.linalg.norm(m.values)))
        checks.add(f"cell.{side}.duality", duality <= 1e-9, duality, 1e-9)
        defect = cellmod.centering_defect(coeffs, m)
        bmax = max(1.0, float(np.max(np.abs(coeffs.b(g.coords())))))
        ctol = 10.0 * g.spacing[0] ** 2 * bmax
        checks.add(f"cell.{side}.centering", float(np.max(np.abs(defect))) <= ctol, defect, ctol)
        tc = cellmod.transformed(coeffs, m)
        phi = cellmod.flux_corrector(tc, method=cfg["cell"]["phi_method"])
        eff = cellmod.effective_tensor(tc, phi, tol=cfg["tolerances"]["linear"])
        mu = validate(coeffs).mu
        bound = m.min * mu - 1e-8
        checks.add(f"cell.{side}.effective_elliptic", eff.min_sym_eig >= bound, eff.min_sym_eig, bound)
        out[side] = {
            "n": n,
            "measure": m.to_dict(),
            "centering_defect": defect.tolist(),
            "transformed": tc.to_dict(),
            "flux_corrector": phi.to_dict(),
            "effective": eff.to_dict(),
            "solve": m.report.to_dict(),
        }
        if cfg["output"]["fields"]:
            _dump(outdir, f"m_{side}", g, m.values, cfg["output"]["format"])
    summary["cell"] = out


def stage_interface(cfg, field, checks, outdir, summary, cache):
    icfg = cfg["interface"]
    pipe = build_interface(field, icfg["n"], icfg["R"], icfg["q_plus"], tol=cfg["tolerances"]["slab"])
    cache["pipe"] = pipe
    sm = pipe.slab
    h = pipe.grid.spacing[0]
    checks.add("interface.q_minus_positive", pipe.cfg.q_minus > 0, pipe.cfg.q_minus)
    checks.add(
        "interface.max_principle_boundary_data", sm.max_principle_ok(), sm.max_principle_excess(), 1e-8,
        gating=icfg["strict_max_principle"],
        note="range of the Dirichlet data; not implied for the transposed operator in general",
    )
    checks.add("interface.max_principle_torus_range", sm.torus_range_ok(), [sm.min, sm.max], list(sm.torus_range), gating=False)
    checks.add("interface.measure_bounds", sm.measure_bounds_ok(), [sm.min, sm.max], [0.5 * sm.torus_range[0], 1.5 * sm.torus_range[1]])
    flux = slab_flux(sm.values, field, pipe.grid)
    target = pipe.cfg.q_plus * pipe.plus.flux
    dev = float(np.max(np.abs(flux - target)) / abs(target))
    checks.add("interface.flux_constancy", dev <= 10 * h**2, dev, 10 * h**2)
    summary["interface"] = {
        "n": icfg["n"],
        "R": icfg["R"],
        "q_plus": pipe.cfg.q_plus,
        "q_minus": pipe.cfg.q_minus,
        "slice_flux_plus": pipe.plus.flux,
        "slice_flux_minus": pipe.minus.flux,
        "slab": sm.to_dict(),
        "flux_relative_deviation": dev,
    }
    if cfg["output"]["fields"]:
        _dump(outdir, "m_slab", pipe.grid, sm.values, cfg["output"]["format"])


def stage_decay(cfg, field, checks, outdir, summary, cache):
    if "pipe" not in cache:
        stage_interface(cfg, field, checks, outdir, summary, cache)
    pipe = cache["pipe"]
    g, sm = pipe.grid, pipe.slab
    h = g.spacing[0]
    dv = deviation_field(sm, pipe.cfg, pipe.plus, pipe.minus)
    checks.add("decay.v_equation_residual", dv.equation_residual <= 1e-8, dv.equation_residual, 1e-8)
    t, fz = flux_zero_check(dv.v, field, g)
    fscale = abs(pipe.cfg.q_plus * pipe.plus.flux)
    fz_max = float(np.max(np.abs(fz)) / fscale)
    checks.add("decay.flux_zero", fz_max <= 10 * h**2, fz_max, 10 * h**2)
    fits = {s: decay_fit(dv.v, g, s) for s in ("plus", "minus")}
    for s, fit in fits.items():
        checks.add(f"decay.fit_{s}", fit.accepted(0.98) or fit.vanishes, {"rate_v": fit.value.rate, "r2_v": fit.value.r2, "rate_grad": fit.gradient.rate, "r2_grad": fit.gradient.r2}, 0.98)
    out = {"deviation": dv.to_dict(), "flux_zero_max": fz_max, "fits": {s: f.to_dict() for s, f in fits.items()}}
    # R-stability of the fitted rates
    R2 = cfg["interface"]["R_check"]
    if R2 and R2 != pipe.cfg.R:
        c2 = InterfaceConfig(pipe.cfg.q_plus, pipe.cfg.q_minus, R2)
        g2 = slab_grid_per_unit(field.dimension, R2, pipe.plus.grid.shape[0])
        sm2 = solve_slab_measure(field, c2, g2, pipe.plus, pipe.minus, tol=cfg["tolerances"]["slab"])
        dv2 = deviation_field(sm2, c2, pipe.plus, pipe.minus)
        fits2 = {s: decay_fit(dv2.v, g2, s) for s in ("plus", "minus")}
        change = {s: abs(fits2[s].value.rate - fits[s].value.rate) / abs(fits[s].value.rate) for s in fits}
        for s in fits:
            ok = (fits2[s].accepted(0.98) and change[s] < 0.10) or (fits[s].vanishes and fits2[s].vanishes)
            checks.add(f"decay.rate_stability_{s}", ok, {"rate_R": fits[s].value.rate, "rate_R_check": fits2[s].value.rate, "relative_change": change[s]}, 0.10)
        out["R_check"] = {"R": R2, "fits": {s: f.to_dict() for s, f in fits2.items()}, "relative_change": change}
    ifc = pipe.corrector
    if ifc is not None:
        for s, fit in (("plus", ifc.fit_plus), ("minus", ifc.fit_minus)):
            checks.add(f"decay.corrector_matching_{s}", fit.accepted(0.95) or fit.vanishes, {"rate": fit.rate, "r2": fit.r2}, 0.95)
        out["interface_flux_corrector"] = ifc.to_dict()
    summary["decay"] = out
    sup_v, sup_g = slice_profiles(dv.v, g)
    flux_v = slab_flux(dv.v, field, g)
    flux_m = slab_flux(sm.values, field, g)
    with open(outdir / "slices.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y1", "sup_v", "sup_grad_v", "flux", "flux_m"])
        for row in zip(g.axis(0), sup_v, sup_g, flux_v, flux_m):
            w.writerow([repr(float(x)) for x in row])
    if cfg["output"]["fields"]:
        _dump(outdir, "v", g, dv.v, cfg["output"]["format"])
        if ifc is not None:
            _dump(outdir, "psi", g, ifc.psi, cfg["output"]["format"])


def stage_convergence(cfg, field, checks, outdir, summary, cache, t_start):
    c = cfg["convergence"]
    eps = sorted(c["eps"], reverse=True)
    pipe = build_interface(field, c["n_cell"], c["R"], cfg["interface"]["q_plus"], tol=cfg["tolerances"]["slab"])
    if c["n_cell"] < c["min_cells"]:
        raise ConfigError(f"'convergence.n_cell' = {c['n_cell']} violates the resolution rule h <= eps/{c['min_cells']}")
    pt = piecewise_tensor(pipe)
    budget = cfg["budget"]
    remaining = budget["max_seconds"] - (time.perf_counter() - t_start)
    exp: ConvergenceExperiment = convergence_study(
        pipe, eps, tol=cfg["tolerances"]["linear"], max_seconds=max(remaining, 0.0),
        max_unknowns=budget["max_unknowns"], pt=pt, compare_gauge=True, collar=c["collar"],
    )
    checks.add("convergence.complete", not exp.truncated, exp.reason or "complete")
    if exp.rates:
        rate = exp.rates["interior_Linf"]
        checks.add("convergence.monotone", exp.monotone(), [r["interior_Linf"] for r in exp.rows])
        checks.add("convergence.rate_band", rate.in_band(0.7, 1.3), rate.slope, [0.7, 1.3], note=f"bounded-domain interior norm (collar {c['collar']})")
    summary["convergence"] = {"n_cell": c["n_cell"], "R": c["R"], "effective": pt.to_dict(), **exp.to_dict()}
    with open(outdir / "convergence.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ConvergenceExperiment.CSV_COLUMNS)
        for r in exp.rows:
            w.writerow([r[k] for k in ConvergenceExperiment.CSV_COLUMNS])


# ---------------------------------------------------------------------------


def run(command: str, config_path, out: str | None = None) -> int:
    """Run one command; returns the exit status."""
    t_start = time.perf_counter()
    try:
        cfg = load_config(config_path)
    except (OSError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if command not in COMMANDS:
        print(f"error: unknown command {command!r}; choose from {COMMANDS}", file=sys.stderr)
        return 1
    outdir = Path(out or cfg["output"]["dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    checks = Checks()
    results: dict = {}
    cache: dict = {}
    status = 0
    error = None
    try:
        field = build_field(cfg)
        results["validation"] = _validate_field(field, checks).to_dict()
        # decay needs the slab measure, so it reports the interface checks too
        stages = {"all": ["cell", "interface", "decay", "convergence"], "decay": ["interface", "decay"]}.get(command, [command])
        for st in stages:
            logger.info("stage %s", st)
            if st == "cell":
                stage_cell(cfg, field, checks, outdir, results)
            elif st == "interface":
                stage_interface(cfg, field, checks, outdir, results, cache)
            elif st == "decay":
                stage_decay(cfg, field, checks, outdir, results, cache)
            else:
                stage_convergence(cfg, field, checks, outdir, results, cache, t_start)
        status = 0 if checks.ok else 2
    except Exception as exc:  # reported in the summary and on stderr
        logger.debug("execution error", exc_info=True)
        error = f"{type(exc).__name__}: {exc}"
        print(f"error: {error}", file=sys.stderr)
        status = 1
    timing: dict = {}
    body = _split_timing(_jsonable(results), [], timing)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": cfg.to_dict(),
        "status": status,
        "error": error,
        "checks": checks.items,
        "results": body,
        "run": {
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "wall_seconds": time.perf_counter() - t_start,
            "timing": timing,
            "versions": _versions(),
        },
    }
    with open(outdir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return status


def _versions():
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"package": pkg, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="invhom", description="Invariant measures and homogenization across a periodic interface")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="YAML run configuration")
    ap.add_argument("--out", help="output directory (overrides output.dir)")
    ap.add_argument("--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return run(args.command, args.config, args.out)


if __name__ == "__main__":
    sys.exit(main())
