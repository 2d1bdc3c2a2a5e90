"""
Vector / matrix primitives, random number generation and the little bit of linear algebra that
the rest of the package needs.

Randomness: every stream is a numpy `Generator` driven by the counter-based Philox-4x64 bit
generator. Streams are never shared between components, instead each component forks its own
stream from the command seed with `fork`:

    child = SeedSequence(entropy=seed, spawn_key=(component, index))

where `component` is one of the `STREAM_*` constants below and `index` is e.g. the trajectory
number. This makes the output of a batch independent of how it is split across workers.
"""

from typing import NamedTuple, Tuple

import numpy as np
import scipy.linalg

from nlc_lab.errors import DimMismatch, InvalidRange, RankDeficient

# Component ids used in the seed split rule.
STREAM_ROTATIONS = 1
STREAM_POINTS = 2
STREAM_BATCHES = 3
STREAM_NOISE = 4
STREAM_LAMBDA = 5
STREAM_SAMPLING = 6
STREAM_OPERATOR = 7
STREAM_INIT = 8

# Relative pivot threshold below which a matrix is treated as rank deficient.
RANK_TOLERANCE = 1e-10

# How many times `random_orthogonal` will redraw a numerically singular gaussian matrix.
MAX_ORTHOGONAL_DRAWS = 8


class Rng(NamedTuple):
    """
    A seeded random stream. `seed` is kept for reporting, `generator` carries the state.
    """

    seed: int
    spawn_key: Tuple[int, ...]
    generator: np.random.Generator


def make_rng(seed: int, spawn_key: Tuple[int, ...] = ()) -> Rng:
    """
    Create a Philox stream.
    :param seed: 64-bit unsigned seed.
    :param spawn_key: Position in the split tree, empty for a root stream.
    :return: Fresh `Rng`.
    """
    if not 0 <= seed < 2**64:
        raise InvalidRange(f"seed must be a 64-bit unsigned integer, got {seed}")
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=spawn_key)
    return Rng(
        seed=seed,
        spawn_key=tuple(spawn_key),
        generator=np.random.Generator(np.random.Philox(sequence)),
    )


def fork(seed: int, component: int, index: int = 0) -> Rng:
    """
    The documented split rule, see the module docstring.
    :param seed: Command level seed.
    :param component: One of the `STREAM_*` constants.
    :param index: Sub-stream number within the component.
    :return: Independent `Rng`.
    """
    return make_rng(seed, (component, index))


def gaussian_vec(rng: Rng, n: int) -> np.ndarray:
    """
    n i.i.d. standard normal draws.
    :param rng: Stream to advance.
    :param n: Length, at least 1.
    :return: float64 vector.
    """
    if n < 1:
        raise InvalidRange(f"n must be positive, got {n}")
    return rng.generator.standard_normal(n)


def gaussian_mat(rng: Rng, rows: int, cols: int) -> np.ndarray:
    """
    rows x cols i.i.d. standard normal draws, row-major.
    :param rng: Stream to advance.
    :param rows: Row count.
    :param cols: Column count.
    :return: float64 matrix.
    """
    if rows < 1 or cols < 1:
        raise InvalidRange(f"matrix dims must be positive, got {rows}x{cols}")
    return rng.generator.standard_normal((rows, cols))


def uniform(rng: Rng, low: float, high: float, count: int) -> np.ndarray:
    """
    `count` draws from U(low, high).
    :param rng: Stream to advance.
    :param low: Lower bound.
    :param high: Upper bound.
    :param count: Number of draws.
    :return: float64 vector.
    """
    return rng.generator.uniform(low, high, count)


def integers(rng: Rng, high: int, count: int) -> np.ndarray:
    """
    `count` draws from U{0..high-1}.
    :param rng: Stream to advance.
    :param high: Exclusive upper bound.
    :param count: Number of draws.
    :return: int64 vector.
    """
    if high < 1:
        raise InvalidRange(f"high must be positive, got {high}")
    return rng.generator.integers(0, high, count)


def orthogonality_error(matrix: np.ndarray) -> float:
    """
    :param matrix: Square matrix R.
    :return: max |R^T R - I|.
    """
    return float(np.max(np.abs(matrix.T @ matrix - np.eye(matrix.shape[0]))))


def random_orthogonal(rng: Rng, n: int) -> np.ndarray:
    """
    Haar-ish random orthogonal matrix: QR of a gaussian matrix, with the signs of Q's columns
    flipped so that the diagonal of R is nonnegative.
    :param rng: Stream to advance.
    :param n: Size.
    :return: n x n orthogonal matrix.
    """
    if n < 1:
        raise InvalidRange(f"n must be positive, got {n}")

    for _ in range(MAX_ORTHOGONAL_DRAWS):
        q, r = np.linalg.qr(gaussian_mat(rng, n, n))
        diagonal = np.diag(r)
        if np.min(np.abs(diagonal)) < RANK_TOLERANCE * max(float(np.max(np.abs(diagonal))), 1.0):
            continue
        signs = np.where(diagonal < 0, -1.0, 1.0)
        return np.ascontiguousarray(q * signs[np.newaxis, :])

    raise RankDeficient(f"could not draw a full rank {n}x{n} gaussian matrix")


def _solve_gram(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """
    Solve `gram @ x = rhs` by LU with partial pivoting, refusing near-singular systems.
    :param gram: Square, symmetric positive (semi)definite matrix.
    :param rhs: Right hand side(s).
    :return: Solution.
    """
    lu, pivots = scipy.linalg.lu_factor(gram, check_finite=True)
    pivot_magnitudes = np.abs(np.diag(lu))
    largest = float(np.max(pivot_magnitudes))
    if largest == 0.0 or float(np.min(pivot_magnitudes)) < RANK_TOLERANCE * largest:
        raise RankDeficient("matrix is not of full rank within tolerance")
    solution: np.ndarray = scipy.linalg.lu_solve((lu, pivots), rhs)
    return solution


def pseudo_inverse(matrix: np.ndarray) -> np.ndarray:
    """
    Moore-Penrose inverse of a full row rank or full column rank matrix via the normal equations:
    A^T (A A^T)^-1 for wide / square matrices and (A^T A)^-1 A^T for tall ones.
    :param matrix: rows x cols matrix.
    :return: cols x rows pseudo-inverse.
    """
    if matrix.ndim != 2:
        raise DimMismatch(f"expected a matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise InvalidRange("matrix has non-finite entries")

    rows, cols = matrix.shape
    if rows <= cols:
        pinv: np.ndarray = _solve_gram(matrix @ matrix.T, matrix).T
    else:
        pinv = _solve_gram(matrix.T @ matrix, matrix.T)
    return np.ascontiguousarray(pinv)


def moore_penrose_residuals(
    matrix: np.ndarray, pinv: np.ndarray
) -> Tuple[float, float, float, float]:
    """
    How far a candidate pseudo-inverse is from satisfying the four Penrose conditions.
    :param matrix: A.
    :param pinv: Candidate A^+.
    :return: max abs residual of (A A+ A = A, A+ A A+ = A+, (A A+)^T = A A+, (A+ A)^T = A+ A).
    """
    left = matrix @ pinv
    right = pinv @ matrix
    return (
        float(np.max(np.abs(left @ matrix - matrix))),
        float(np.max(np.abs(pinv @ left - pinv))),
        float(np.max(np.abs(left - left.T))),
        float(np.max(np.abs(right - right.T))),
    )
