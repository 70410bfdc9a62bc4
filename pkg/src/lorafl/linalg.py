"""Dense float64 matrices, named random streams, and a finite-difference checker.

Everything downstream moves data as plain 2-D numpy float64 arrays. This module
adds the contracts the simulator relies on: strict shape validation, finiteness
guarantees after every public operation, reproducible per-purpose random
streams, and a residual-checked linear solve with an optional ridge term.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

Matrix = np.ndarray

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Relative residual accepted from solve(); anything worse is treated as a
# (numerically) singular system.
SOLVE_RESIDUAL_RTOL = 1e-10


class LinalgError(Exception):
    """Base class for numeric-layer failures."""


class ShapeError(LinalgError):
    """Operands do not have compatible dimensions."""


class ParameterError(LinalgError):
    """A numeric argument is outside its documented range."""


class EvaluationError(LinalgError):
    """A computation produced or consumed non-finite values."""


class SingularMatrixError(LinalgError):
    """Linear system could not be solved to the required residual.

    Carries a condition-number estimate of the (ridge-augmented) system.
    """

    def __init__(self, message: str, condition: float | None = None):
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        super().__init__(message)
        self.condition = condition


def as_matrix(values, rows: int | None = None, cols: int | None = None,
              name: str = "matrix") -> Matrix:
    """Coerce to a 2-D float64 array and validate shape and finiteness."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if rows is not None and arr.shape[0] != rows:
        raise ShapeError(f"{name} must have {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise ShapeError(f"{name} must have {cols} cols, got {arr.shape[1]}")
    check_finite(arr, name)
    return np.ascontiguousarray(arr)


def check_finite(values: np.ndarray, name: str = "result") -> None:
    if not np.all(np.isfinite(values)):
        raise EvaluationError(f"{name} contains non-finite entries")


def frobenius(m: np.ndarray) -> float:
    return float(np.linalg.norm(m))


def matmul(a, b) -> Matrix:
    """Matrix product with explicit conformability and finiteness checks."""
    a = as_matrix(a, name="a")
    b = as_matrix(b, name="b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    check_finite(out, "matmul result")
    return out


def solve(a, b, ridge: float = 0.0) -> Matrix:
    """Solve (a + ridge*I) X = b by pivoted LU elimination.

    The solution is accepted only if the residual stays below
    SOLVE_RESIDUAL_RTOL * ||b||_F; otherwise the system is reported as
    singular together with a condition estimate.
    """
    a = as_matrix(a, name="a")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError(f"a must be square, got {a.shape}")
    b = as_matrix(b, rows=n, name="b")
    if ridge < 0:
        raise ParameterError(f"ridge must be >= 0, got {ridge}")
    system = a if ridge == 0.0 else a + ridge * np.eye(n)
    try:
        x = np.linalg.solve(system, b)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("exactly singular system",
                                  condition=_condition_estimate(system)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError("solve produced non-finite entries",
                                  condition=_condition_estimate(system))
    residual = frobenius(system @ x - b)
    if residual > SOLVE_RESIDUAL_RTOL * frobenius(b):
        raise SingularMatrixError(
            f"residual {residual:.3e} exceeds tolerance for ||b||={frobenius(b):.3e}",
            condition=_condition_estimate(system))
    return x


def _condition_estimate(m: np.ndarray) -> float:
    try:
        return float(np.linalg.cond(m))
    except np.linalg.LinAlgError:
        return float("inf")


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngStream:
    """Reproducible named random stream.

    Streams are keyed by (seed, stream_id) on a counter-based Philox
    generator, so the values drawn from one stream never depend on how many
    draws other streams have made or on the order streams are created.
    Identical keys always reproduce the identical sequence.
    """

    __slots__ = ("seed", "stream_id", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, tag: int) -> "RngStream":
        """Derive an independent stream; same (stream, tag) -> same child."""
        derived = _splitmix64(self.stream_id ^ _splitmix64(int(tag) & _MASK64))
        return RngStream(self.seed, derived)

    def normal(self, rows: int, cols: int, std: float = 1.0) -> Matrix:
        return self._gen.normal(0.0, std, size=(rows, cols))

    def normal_vector(self, n: int, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=n)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def dirichlet(self, alpha: np.ndarray) -> np.ndarray:
        return self._gen.dirichlet(alpha)

    def multinomial(self, n: int, pvals: np.ndarray) -> np.ndarray:
        return self._gen.multinomial(n, pvals)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def gaussian_matrix(rng: RngStream, rows: int, cols: int, std: float) -> Matrix:
    """i.i.d. N(0, std^2) matrix drawn from the given stream."""
    if std <= 0:
        raise ParameterError(f"std must be > 0, got {std}")
    if rows < 1 or cols < 1:
        raise ParameterError(f"rows and cols must be >= 1, got {rows}x{cols}")
    return rng.normal(rows, cols, std)


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient (f(x+h*e) - f(x-h*e)) / 2h per entry.

    Works for matrices and vectors alike; f must return a finite scalar at
    every perturbed point.
    """
    if h <= 0:
        raise ParameterError(f"h must be > 0, got {h}")
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    grad = np.empty_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = float(f(x))
        flat_x[i] = orig - h
        f_minus = float(f(x))
        flat_x[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise EvaluationError(f"objective returned non-finite value at entry {i}")
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
