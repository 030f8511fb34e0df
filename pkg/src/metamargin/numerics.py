"""Deterministic numeric kernels shared across the package.

All arrays are float64 unless a caller deliberately passes a wider dtype
(the finite-difference oracles in the test-suite run some kernels in
``np.longdouble``). Random streams come from numpy's PCG64 bit generator,
which produces the same sequence for a given seed on every platform.
"""

from __future__ import annotations

import json
from typing import Callable, Sequence

import numpy as np

ARCCOS_EPS = 1e-12


class NonFiniteError(ValueError):
    """Raised when a computation produces NaN or infinity."""


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64-backed generator for ``seed``."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def clamp_cosine(x):
    """Clip cosine values to ``[-1 + eps, 1 - eps]``."""
    return np.clip(x, -1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS)


def safe_arccos(x):
    """arccos with the argument clamped away from +-1.

    Works elementwise on arrays and returns a Python float for scalar input.
    The derivative stays finite because ``|x| < 1`` after clamping.
    """
    out = np.arccos(clamp_cosine(x))
    if np.ndim(out) == 0:
        return float(out)
    return out


def safe_arccos_grad(x):
    """Derivative of :func:`safe_arccos`; zero where the clamp is active."""
    x = np.asarray(x)
    inside = (x > -1.0 + ARCCOS_EPS) & (x < 1.0 - ARCCOS_EPS)
    xc = clamp_cosine(x)
    return np.where(inside, -1.0 / np.sqrt(1.0 - xc * xc), 0.0)


def log_sum_exp(values: Sequence[float]) -> float:
    """Stable ``log(sum(exp(values)))`` using the max-shift trick."""
    v = np.asarray(values)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty list")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("log_sum_exp received a non-finite value")
    m = v.max()
    return float(m + np.log(np.sum(np.exp(v - m))))


def log_sum_exp_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise stable log-sum-exp of a 2-D array."""
    m = a.max(axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=-1, keepdims=True)))[..., 0]


def log_softmax_rows(a: np.ndarray) -> np.ndarray:
    return a - log_sum_exp_rows(a)[..., None]


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x, h: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Parameters
    ----------
    f : callable
        Maps a 1-D array to a real number.
    x : array-like
        Evaluation point; copied, never mutated.
    h : float
        Step size, must be positive.

    Returns
    -------
    np.ndarray
        ``(f(x + h e_i) - f(x - h e_i)) / (2h)`` for every coordinate, in the
        dtype of ``x`` (float64 unless a wider float was supplied).
    """
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    x = np.array(x, copy=True)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    x = np.atleast_1d(x)
    grad = np.zeros_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2 * h)
    return grad


def check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values in {name}")


def matrix_to_json(a: np.ndarray) -> dict:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if a.ndim != 2:
        raise ValueError("only 2-D matrices serialize")
    check_finite("matrix", a)
    return {"rows": int(a.shape[0]), "cols": int(a.shape[1]), "data": a.ravel().tolist()}


def matrix_from_json(obj) -> np.ndarray:
    if isinstance(obj, str):
        obj = json.loads(obj)
    rows, cols, data = int(obj["rows"]), int(obj["cols"]), obj["data"]
    if len(data) != rows * cols:
        raise ValueError(f"matrix data has {len(data)} entries, expected {rows}x{cols}")
    a = np.asarray(data, dtype=np.float64).reshape(rows, cols)
    check_finite("matrix", a)
    return a


def sq_dist_matrix(x: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, summed left to right over features.

    The fixed accumulation order keeps results bit-identical to a plain
    nested-loop evaluation.
    """
    n, d = x.shape
    out = np.zeros((n, n), dtype=x.dtype)
    for k in range(d):
        diff = x[:, None, k] - x[None, :, k]
        out += diff * diff
    return out

