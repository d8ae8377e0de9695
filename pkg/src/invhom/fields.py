"""Coefficient model: periodic pieces on each side of a flat interface.

A :class:`PeriodicCoefficients` holds a symmetric matrix field ``a`` and a
drift ``b`` on the unit torus.  A :class:`CoefficientField` glues two of them
across the strip ``|y1| <= 1`` with a quintic smoothstep, so that the field is
exactly the ``plus`` piece for ``y1 > 1`` and exactly the ``minus`` piece for
``y1 < -1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expr import Expression

__all__ = [
    "PeriodicCoefficients",
    "CoefficientField",
    "ValidationReport",
    "PRESETS",
    "FIELD_PRESETS",
    "field_preset",
    "preset",
    "smoothstep",
    "blend_profile",
    "evaluate",
    "exact_measure",
    "validate",
]


@dataclass(frozen=True)
class PeriodicCoefficients:
    """1-periodic coefficients ``(a, b)`` given as expression strings in ``y1..yd``."""

    dimension: int
    a_src: tuple[tuple[str, ...], ...]
    b_src: tuple[str, ...]
    name: str = "custom"
    _a: tuple = field(init=False, repr=False, compare=False)
    _b: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        d = self.dimension
        if d < 2:
            raise ValueError(f"dimension must be >= 2, got {d}")
        if len(self.a_src) != d or any(len(row) != d for row in self.a_src):
            raise ValueError(f"a must be a {d}x{d} table of expressions")
        if len(self.b_src) != d:
            raise ValueError(f"b must have {d} entries")
        object.__setattr__(self, "_a", tuple(tuple(Expression(s, d) for s in row) for row in self.a_src))
        object.__setattr__(self, "_b", tuple(Expression(s, d) for s in self.b_src))

    @classmethod
    def from_expressions(cls, a: Sequence[Sequence[str]], b: Sequence[str], name="custom"):
        a_src = tuple(tuple(str(s) for s in row) for row in a)
        return cls(len(a_src), a_src, tuple(str(s) for s in b), name)

    def a(self, y: np.ndarray) -> np.ndarray:
        """Matrix field at points ``y`` of shape ``(d, ...)``; returns ``(d, d, ...)``."""
        y = np.asarray(y, dtype=float)
        return np.stack([np.stack([e(y) for e in row]) for row in self._a])

    def b(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.stack([e(y) for e in self._b])

    def to_dict(self) -> dict:
        return {"name": self.name, "a": [list(r) for r in self.a_src], "b": list(self.b_src)}


def smoothstep(t):
    """Quintic smoothstep ``6t^5 - 15t^4 + 10t^3`` clamped to ``[0, 1]``."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def blend_profile(y1):
    """Weight of the plus piece: 0 for ``y1 <= -1``, 1 for ``y1 >= 1``, 1/2 at 0."""
    return smoothstep((np.asarray(y1, dtype=float) + 1.0) / 2.0)


@dataclass(frozen=True)
class CoefficientField:
    """Two periodic pieces joined across ``-1 <= y1 <= 1``."""

    plus: PeriodicCoefficients
    minus: PeriodicCoefficients

    def __post_init__(self):
        if self.plus.dimension != self.minus.dimension:
            raise ValueError("plus and minus pieces have different dimensions")

    @property
    def dimension(self) -> int:
        return self.plus.dimension

    @classmethod
    def one_sided(cls, coeffs: PeriodicCoefficients) -> "CoefficientField":
        return cls(coeffs, coeffs)

    def _blend(self, fplus, fminus, y1):
        s = blend_profile(y1)
        mixed = s * fplus + (1.0 - s) * fminus
        # outside the strip the pieces are returned untouched (bit-identical)
        return np.where(y1 > 1.0, fplus, np.where(y1 < -1.0, fminus, mixed))

    def a(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return self._blend(self.plus.a(y), self.minus.a(y), y[0])

    def b(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return self._blend(self.plus.b(y), self.minus.b(y), y[0])


def evaluate(field, y):
    """Return ``(A(y), b(y))`` at a single point ``y`` (length-d sequence)."""
    y = np.asarray(y, dtype=float).reshape(-1, 1)
    return field.a(y)[..., 0], field.b(y)[..., 0]


@dataclass
class ValidationReport:
    checks: dict[str, bool]
    mu: float
    mu1: float
    symmetry_defect: float
    periodicity_defect: float
    max_abs_b1: float
    seam_gradient_jump: float | None = None

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def failures(self) -> list[str]:
        return [k for k, v in self.checks.items() if not v]

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "checks": dict(self.checks),
            "mu": self.mu,
            "mu1": self.mu1,
            "symmetry_defect": self.symmetry_defect,
            "periodicity_defect": self.periodicity_defect,
            "max_abs_b1": self.max_abs_b1,
            "seam_gradient_jump": self.seam_gradient_jump,
        }


def _sample_points(d, samples_per_axis, lo=0.0, hi=1.0, y1_range=None):
    axes = [np.linspace(lo, hi, samples_per_axis, endpoint=False) for _ in range(d)]
    if y1_range is not None:
        axes[0] = np.linspace(*y1_range, samples_per_axis)
    return np.stack(np.meshgrid(*axes, indexing="ij")).reshape(d, -1)


def validate(field, samples_per_axis: int = 16, tol: float = 1e-12, n_directions: int = 32, seed: int = 0):
    """Check the standing assumptions on a sample grid; failures are reported, not raised.

    Works for both :class:`PeriodicCoefficients` and :class:`CoefficientField`.
    For a field, the y1 samples cover ``[-3, 3]`` so that the interface strip and
    both pure pieces are seen, and the C^1 seam check is included.
    """
    if samples_per_axis < 4:
        raise ValueError("samples_per_axis must be >= 4")
    d = field.dimension
    is_field = isinstance(field, CoefficientField)
    y = _sample_points(d, samples_per_axis, y1_range=(-3.0, 3.0) if is_field else None)
    A = field.a(y)
    b = field.b(y)
    At = np.moveaxis(A, -1, 0)  # (N, d, d)

    sym = float(np.max(np.abs(At - np.swapaxes(At, 1, 2))))
    eig = np.linalg.eigvalsh(0.5 * (At + np.swapaxes(At, 1, 2)))
    mu, mu1 = float(eig.min()), float(eig.max())
    # Rayleigh quotients over random unit directions agree with the eigen bounds
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((n_directions, d))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    quad = np.einsum("ki,nij,kj->nk", xi, At, xi)
    mu = min(mu, float(quad.min()))
    mu1 = max(mu1, float(quad.max()))

    per = 0.0
    for k in range(d):
        if is_field and k == 0:
            continue  # the y1 direction is not periodic across the interface
        shifted = y.copy()
        shifted[k] += 1.0
        per = max(per, float(np.max(np.abs(field.a(shifted) - A))), float(np.max(np.abs(field.b(shifted) - b))))
    if is_field:
        # exact periodicity of each piece in y1 far from the interface
        for piece, lo in ((field.plus, 1.5), (field.minus, -3.5)):
            yy = _sample_points(d, samples_per_axis, y1_range=(lo, lo + 1.0))
            shifted = yy.copy()
            shifted[0] += 1.0
            per = max(per, float(np.max(np.abs(field.a(shifted) - field.a(yy)))))

    max_b1 = float(np.max(np.abs(b[0])))
    checks = {
        "symmetric": sym <= tol,
        "elliptic": mu > 0.0,
        "periodic": per <= 1e-10,
        "b1_zero": max_b1 <= tol,
    }

    seam = None
    if is_field:
        coarse = _seam_gradient_jump(field, samples_per_axis, dy=1e-3)
        seam = _seam_gradient_jump(field, samples_per_axis, dy=1e-4)
        # C^1: the jump shrinks linearly with dy; a kink keeps it O(1)
        checks["c1_seam"] = seam <= 0.2 * coarse + 1e-6
        checks["pieces_exact"] = _pieces_exact(field, samples_per_axis)
    return ValidationReport(checks, mu, mu1, sym, per, max_b1, seam)


def _seam_gradient_jump(field, samples_per_axis, dy=1e-4):
    """Jump of the one-sided y1-derivatives of A across ``y1 = +-1``.

    The blend weight has vanishing derivative at the seam, so with bounded
    second derivatives the jump is O(dy) = O(1e-4); a C^0-only seam gives O(1).
    """
    d = field.dimension
    worst = 0.0
    for seam in (-1.0, 1.0):
        y = _sample_points(d, samples_per_axis)
        y[0] = seam
        left, mid, right = y.copy(), y, y.copy()
        left[0] -= dy
        right[0] += dy
        g_left = (field.a(mid) - field.a(left)) / dy
        g_right = (field.a(right) - field.a(mid)) / dy
        worst = max(worst, float(np.max(np.abs(g_right - g_left))))
    return worst


def _pieces_exact(field, samples_per_axis):
    d = field.dimension
    for piece, lo in ((field.plus, 1.0 + 1e-9), (field.minus, -4.0)):
        y = _sample_points(d, samples_per_axis, y1_range=(lo, lo + 3.0 - 1e-9))
        if not (np.array_equal(field.a(y), piece.a(y)) and np.array_equal(field.b(y), piece.b(y))):
            return False
    return True


# ---------------------------------------------------------------------------
# presets

def _identity(d):
    a = [["1" if i == j else "0" for j in range(d)] for i in range(d)]
    return a, ["0"] * d


def _scaled_identity(d, s):
    a = [[s if i == j else "0" for j in range(d)] for i in range(d)]
    return a, ["0"] * d


def _layered(d):
    return _scaled_identity(d, "2 + sin(2*pi*y1)")


def _manufactured(m, dm1, dm2, a11_flux, a22, da22_2, a12, da12_1, k):
    """Coefficients whose invariant measure is the given ``m`` (d = 2).

    With ``a11 = a11_flux / m`` the product ``a11 m`` is constant, and choosing
    ``b2 m = d2(a22 m) + 2 d1(a12 m) + k(y1)`` makes
    ``d_ij(a_ij m) - d_2(b2 m) = 0``.  A mean-zero ``k`` gives the centering
    condition ``int b2 m = 0``.
    """
    a11 = f"{a11_flux}/({m})"
    b2 = (
        f"(({a22})*({dm2}) + ({da22_2})*({m}) + 2*(({da12_1})*({m}) + ({a12})*({dm1})) + {k})/({m})"
    )
    return [[a11, a12], [a12, a22]], ["0", b2]


# a12 is positive in both sets (so also in any blend of them): the
# sign-adapted mixed stencil depends on |a12|, and a sign change would cost an
# order of accuracy near its zero set.
_TRIG = {
    "trig_plus": dict(
        m="1 + 0.3*sin(2*pi*y1)*cos(2*pi*y2)",
        dm1="0.6*pi*cos(2*pi*y1)*cos(2*pi*y2)",
        dm2="-0.6*pi*sin(2*pi*y1)*sin(2*pi*y2)",
        a11_flux="4",
        a22="0.5 + 0.1*cos(2*pi*(y1 + y2))",
        da22_2="-0.2*pi*sin(2*pi*(y1 + y2))",
        a12="0.1 + 0.05*sin(2*pi*(y1 + y2))",
        da12_1="0.1*pi*cos(2*pi*(y1 + y2))",
        k="0.5*sin(2*pi*y1)",
    ),
    "trig_minus": dict(
        m="1 + 0.25*cos(2*pi*y1)*sin(2*pi*y2)",
        dm1="-0.5*pi*sin(2*pi*y1)*sin(2*pi*y2)",
        dm2="0.5*pi*cos(2*pi*y1)*cos(2*pi*y2)",
        a11_flux="6",
        a22="0.6 + 0.1*sin(2*pi*y2)",
        da22_2="0.2*pi*cos(2*pi*y2)",
        a12="0.08 + 0.04*cos(2*pi*(y1 - y2))",
        da12_1="-0.08*pi*sin(2*pi*(y1 - y2))",
        k="0.4*cos(2*pi*y1)",
    ),
}


def _trig(name):
    def build(d):
        if d != 2:
            raise ValueError(f"preset {name!r} is two-dimensional")
        return _manufactured(**_TRIG[name])

    return build


def _bad_drift(d):
    a, b = _identity(d)
    b = ["1"] + ["0"] * (d - 1)
    return a, b


PRESETS = {
    "identity": _identity,
    "double": lambda d: _scaled_identity(d, "2"),
    "layered": _layered,
    "trig_plus": _trig("trig_plus"),
    "trig_minus": _trig("trig_minus"),
    "bad_drift": _bad_drift,
}


def exact_measure(name: str, dimension: int = 2):
    """Closed-form unit-mean invariant measure of a preset, as a callable, or None."""
    if name in ("identity", "double", "bad_drift"):
        return Expression("1", dimension)
    if name in _TRIG:
        return Expression(_TRIG[name]["m"], dimension)
    if name == "layered":
        # a11 m constant; the mean of 1/(2 + sin) is 1/sqrt(3)
        return Expression("sqrt3/(2 + sin(2*pi*y1))".replace("sqrt3", repr(3**0.5)), dimension)
    return None


def preset(name: str, dimension: int = 2) -> PeriodicCoefficients:
    """Built-in coefficient set by name (see ``PRESETS``)."""
    try:
        a, b = PRESETS[name](dimension)
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None
    return PeriodicCoefficients.from_expressions(a, b, name=name)


# two-sided presets: (plus piece, minus piece)
FIELD_PRESETS = {
    "identity": ("identity", "identity"),
    "layered": ("layered", "double"),
    "trig": ("trig_plus", "trig_minus"),
    "trig_one_sided": ("trig_plus", "trig_plus"),
}


def field_preset(name: str, dimension: int = 2) -> CoefficientField:
    """Built-in two-sided coefficient field by name (see ``FIELD_PRESETS``)."""
    try:
        p, m = FIELD_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown field preset {name!r}; available: {sorted(FIELD_PRESETS)}") from None
    return CoefficientField(preset(p, dimension), preset(m, dimension))
