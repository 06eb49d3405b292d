"""Dense float64 helpers: products, singular values, finite differences, RNG."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import kernels
from .errors import ConvergenceError, NonFiniteError, ShapeError

JACOBI_MAX_SWEEPS = 60


def as_matrix(a, name="matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be a nonempty 2-D array, got shape {m.shape}", m.shape)
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return m


def as_vector(v, name="vector") -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1 or a.shape[0] < 1:
        raise ShapeError(f"{name} must be a nonempty 1-D array, got shape {a.shape}", a.shape)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return a


def mat_mul(a, b) -> np.ndarray:
    """Matrix product with a fixed reduction order."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}", a.shape, b.shape)
    out = kernels.matmul(a, b)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("product overflowed")
    return out


def svd_values(m, tol: float = 1e-15, max_sweeps: int = JACOBI_MAX_SWEEPS) -> np.ndarray:
    """Singular values in non-increasing order via one-sided (Hestenes) Jacobi.

    Columns are orthogonalised by plane rotations until every pair satisfies
    ``|a_i . a_j| <= tol * |a_i| |a_j|``; the singular values are then the
    column norms.
    """
    a = as_matrix(m).copy()
    if a.shape[0] < a.shape[1]:
        a = np.ascontiguousarray(a.T)
    n = a.shape[1]
    # column-major working copy keeps the rotated columns contiguous
    cols = np.asfortranarray(a)
    converged = n == 1
    sweeps = 0
    while not converged:
        if sweeps >= max_sweeps:
            raise ConvergenceError(f"Jacobi SVD did not converge in {sweeps} sweeps", sweeps)
        sweeps += 1
        converged = True
        for i in range(n - 1):
            ci = cols[:, i]
            for j in range(i + 1, n):
                cj = cols[:, j]
                alpha = ci @ ci
                beta = cj @ cj
                gamma = ci @ cj
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                converged = False
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_i = c * ci - s * cj
                cols[:, j] = s * ci + c * cj
                cols[:, i] = new_i
    sv = np.sqrt(np.einsum("ij,ij->j", cols, cols))
    return np.sort(sv)[::-1].copy()


def numeric_rank(m, rel_tol: float = 1e-8) -> int:
    """Count singular values above ``rel_tol * sigma_1``."""
    sv = svd_values(m)
    if sv[0] == 0.0:
        return 0
    return int(np.count_nonzero(sv > rel_tol * sv[0]))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector."""
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}", x.shape)
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = float(f(x))
        x[i] = orig - h
        fm = float(f(x))
        x[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"function is not finite around coordinate {i}", where=i)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator; identical seeds give bit-identical streams."""
    return np.random.Generator(np.random.PCG64(seed))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    if state.get("bit_generator") != "PCG64":
        raise ValueError(f"unsupported bit generator {state.get('bit_generator')!r}")
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def gaussian(rng: np.random.Generator, shape, std: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * std
