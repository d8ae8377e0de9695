"""Small arithmetic expression grammar for coefficient definitions.

Expressions are parsed once with :mod:`ast` and evaluated vectorised over
numpy arrays.  Allowed: numbers, ``pi``, ``e``, variables ``y1..yd``,
``+ - * / **``, unary minus and the functions ``sin cos exp``.
"""

from __future__ import annotations

import ast
import math

import numpy as np

_FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_CONSTANTS = {"pi": math.pi, "e": math.e}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


class ExpressionError(ValueError):
    """Raised for malformed expressions or non-finite evaluations."""


class Expression:
    """A parsed expression in the variables ``y1, ..., yd``."""

    def __init__(self, source: str | float | int, dimension: int):
        self.source = str(source)
        self.dimension = dimension
        try:
            tree = ast.parse(self.source.strip(), mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse expression {self.source!r}: {exc.msg}") from None
        self._check(tree.body)
        self._tree = tree.body

    def _check(self, node):
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                raise ExpressionError(f"unsupported constant {node.value!r} in {self.source!r}")
        elif isinstance(node, ast.Name):
            if node.id not in _CONSTANTS and self._var_index(node.id) is None:
                raise ExpressionError(f"unknown name {node.id!r} in {self.source!r}")
        elif isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise ExpressionError(f"unsupported operator in {self.source!r}")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.USub, ast.UAdd)):
                raise ExpressionError(f"unsupported unary operator in {self.source!r}")
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
                raise ExpressionError(f"unsupported function call in {self.source!r}")
            if len(node.args) != 1 or node.keywords:
                raise ExpressionError(f"{node.func.id} takes exactly one argument in {self.source!r}")
            self._check(node.args[0])
        else:
            raise ExpressionError(f"unsupported syntax {type(node).__name__} in {self.source!r}")

    def _var_index(self, name):
        if name.startswith("y") and name[1:].isdigit():
            k = int(name[1:])
            if 1 <= k <= self.dimension:
                return k - 1
        return None

    def _eval(self, node, y):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id in _CONSTANTS:
                return _CONSTANTS[node.id]
            return y[self._var_index(node.id)]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, y), self._eval(node.right, y))
        if isinstance(node, ast.UnaryOp):
            val = self._eval(node.operand, y)
            return -val if isinstance(node.op, ast.USub) else val
        return _FUNCTIONS[node.func.id](self._eval(node.args[0], y))

    def __call__(self, y: np.ndarray) -> np.ndarray:
        """Evaluate at points ``y`` of shape ``(d, ...)``; returns shape ``y.shape[1:]``."""
        y = np.asarray(y, dtype=float)
        with np.errstate(all="ignore"):
            out = np.broadcast_to(np.asarray(self._eval(self._tree, y), dtype=float), y.shape[1:])
        if not np.all(np.isfinite(out)):
            bad = np.argwhere(~np.isfinite(out))[0]
            point = tuple(float(y[(k, *bad)]) for k in range(y.shape[0]))
            raise ExpressionError(f"expression {self.source!r} is not finite at y={point}")
        return np.array(out)

    def __repr__(self):
        return f"Expression({self.source!r})"
