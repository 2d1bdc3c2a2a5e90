"""
The toy data manifold: a union of `m` rotated unit d-spheres living in R^n, plus its exact
distance / projection oracle.

Branch k of the manifold is {R_k s : ||s|| = 1, s_{d+2} = ... = s_n = 0}. For a point x write
R_k^T x = (p, q) with p the first d+1 coordinates and q the rest. The closest point of the branch
is R_k (p / ||p||, 0): the sphere lives in the p-subspace so q has to be zeroed, and inside that
subspace the closest point of a unit sphere is the radial projection of p. The branch distance is
therefore sqrt((||p|| - 1)^2 + ||q||^2), and dist_K is the minimum over branches.

Ties between branches go to the lowest k; p = 0 projects onto the fixed direction e_1.
"""

import logging
import struct
from pathlib import Path
from typing import NamedTuple, Tuple, Union

import numpy as np

from nlc_lab import artifacts
from nlc_lab.errors import CorruptPayload, DimMismatch, InvalidRange, VersionMismatch
from nlc_lab.numeric_core import (
    Rng,
    gaussian_mat,
    integers,
    orthogonality_error,
    random_orthogonal,
)

LOGGER = logging.getLogger(__name__)

# Per the toy setup, jitter is N(0, 1e-6 I).
DEFAULT_NOISE_STD = 1e-3

ORTHOGONALITY_TOLERANCE = 1e-10

DATASET_MAGIC = b"NLCD"
DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sIIIII")


class ManifoldSpec(NamedTuple):
    """
    Shape of the union-of-spheres manifold.
    """

    # Ambient dimension.
    n: int
    # Intrinsic sphere dimension, the sphere sits in the first d + 1 rotated coordinates.
    d: int
    # Number of rotated copies.
    m: int
    # m x n x n stack of orthogonal matrices.
    rotations: np.ndarray
    # Std of the gaussian jitter added to training points.
    noise_std: float


class Dataset(NamedTuple):
    """
    Training points drawn near the manifold.
    """

    points: np.ndarray
    spec: ManifoldSpec
    seed: int


def validate_spec(spec: ManifoldSpec) -> ManifoldSpec:
    """
    Check the invariants of a spec.
    :param spec: Spec to check.
    :return: The same spec.
    """
    if spec.n < 1 or spec.d < 0 or spec.m < 1:
        raise InvalidRange(f"bad manifold dims n={spec.n} d={spec.d} m={spec.m}")
    if spec.d + 1 > spec.n:
        raise InvalidRange(f"need d + 1 <= n, got d={spec.d} n={spec.n}")
    if spec.noise_std < 0:
        raise InvalidRange(f"noise_std must be >= 0, got {spec.noise_std}")
    if spec.rotations.shape != (spec.m, spec.n, spec.n):
        raise DimMismatch(
            f"rotations should be {(spec.m, spec.n, spec.n)}, got {spec.rotations.shape}"
        )
    for k in range(spec.m):
        error = orthogonality_error(spec.rotations[k])
        if error > ORTHOGONALITY_TOLERANCE:
            raise InvalidRange(f"rotation {k} is not orthogonal (error {error})")
    return spec


def make_manifold_spec(
    n: int,
    d: int,
    m: int,
    rng: Rng,
    noise_std: float = DEFAULT_NOISE_STD,
    identity: bool = False,
) -> ManifoldSpec:
    """
    Draw a manifold.
    :param n: Ambient dimension.
    :param d: Sphere dimension.
    :param m: Number of rotated copies.
    :param rng: Source of the rotations.
    :param noise_std: Training jitter.
    :param identity: If True every rotation is I, handy for the hand-checkable n=3 cases.
    :return: Validated spec.
    """
    if n < 1 or m < 1:
        raise InvalidRange(f"bad manifold dims n={n} m={m}")
    if identity:
        rotations = np.stack([np.eye(n) for _ in range(m)])
    else:
        rotations = np.stack([random_orthogonal(rng, n) for _ in range(m)])
    return validate_spec(
        ManifoldSpec(n=n, d=d, m=m, rotations=rotations, noise_std=float(noise_std))
    )


def generate_dataset(spec: ManifoldSpec, count: int, rng: Rng, seed: int = 0) -> Dataset:
    """
    Sample x = R_k s + noise with k ~ U{1..m} and s uniform on S^d (normalized gaussian in the
    first d + 1 coordinates, zero padded).
    :param spec: Manifold to sample.
    :param count: Number of points.
    :param rng: Stream to draw from.
    :param seed: Recorded on the dataset, not used for drawing.
    :return: The dataset.
    """
    if count < 1:
        raise InvalidRange(f"count must be positive, got {count}")

    branches = integers(rng, spec.m, count)
    directions = gaussian_mat(rng, count, spec.d + 1)
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    # A zero gaussian draw has probability zero, fall back to e_1 anyway.
    directions = directions / np.where(norms > 0, norms, 1.0)
    directions[norms[:, 0] == 0, 0] = 1.0

    on_sphere = np.zeros((count, spec.n))
    on_sphere[:, : spec.d + 1] = directions
    signal = np.einsum("kij,kj->ki", spec.rotations[branches], on_sphere)

    if spec.noise_std > 0:
        signal = signal + spec.noise_std * gaussian_mat(rng, count, spec.n)

    LOGGER.debug("Generated %d points on %d branches", count, spec.m)
    return Dataset(points=np.ascontiguousarray(signal), spec=spec, seed=seed)


def _as_points(spec: ManifoldSpec, x: np.ndarray) -> np.ndarray:
    """
    :param spec: Manifold.
    :param x: A point (n,) or a batch (batch, n).
    :return: Batch view of `x`.
    """
    points = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if points.shape[-1] != spec.n:
        raise DimMismatch(f"expected points of length {spec.n}, got {points.shape[-1]}")
    return points


def branch_distances(spec: ManifoldSpec, x: np.ndarray) -> np.ndarray:
    """
    Distance from each point to each branch.
    :param spec: Manifold.
    :param x: A point (n,) or a batch (batch, n).
    :return: (batch, m) distances.
    """
    points = _as_points(spec, x)
    # local[b, k] = R_k^T x_b
    local = np.einsum("kji,bj->bki", spec.rotations, points)
    p_norm = np.linalg.norm(local[:, :, : spec.d + 1], axis=2)
    q_norm_sq = np.sum(local[:, :, spec.d + 1 :] ** 2, axis=2)
    result: np.ndarray = np.sqrt((p_norm - 1.0) ** 2 + q_norm_sq)
    return result


def exact_distance(spec: ManifoldSpec, x: np.ndarray) -> float:
    """
    dist_K(x) for a single point.
    :param spec: Manifold.
    :param x: Point (n,).
    :return: Distance to the closest branch.
    """
    if np.ndim(x) != 1:
        raise DimMismatch("exact_distance works on a single point, see `exact_distances`")
    return float(np.min(branch_distances(spec, x)[0]))


def exact_distances(spec: ManifoldSpec, points: np.ndarray) -> np.ndarray:
    """
    dist_K for every row of `points`.
    :param spec: Manifold.
    :param points: (batch, n).
    :return: (batch,) distances.
    """
    distances: np.ndarray = np.min(branch_distances(spec, points), axis=1)
    return distances


def project_to_branch(spec: ManifoldSpec, x: np.ndarray, k: int) -> np.ndarray:
    """
    Closest point of branch `k` to the single point `x`.
    :param spec: Manifold.
    :param x: Point (n,).
    :param k: Branch index.
    :return: Point on branch k.
    """
    local = spec.rotations[k].T @ np.asarray(x, dtype=np.float64)
    p = local[: spec.d + 1]
    p_norm = float(np.linalg.norm(p))
    on_sphere = np.zeros(spec.n)
    if p_norm > 0:
        on_sphere[: spec.d + 1] = p / p_norm
    else:
        on_sphere[0] = 1.0
    result: np.ndarray = spec.rotations[k] @ on_sphere
    return result


def exact_projection(spec: ManifoldSpec, x: np.ndarray) -> np.ndarray:
    """
    proj_K(x), ties broken by lowest branch.
    :param spec: Manifold.
    :param x: Point (n,).
    :return: Closest manifold point.
    """
    point = np.asarray(x, dtype=np.float64)
    if point.ndim != 1:
        raise DimMismatch("exact_projection works on a single point")
    distances = branch_distances(spec, point)[0]
    # argmin returns the first minimum, i.e. the lowest branch index.
    return project_to_branch(spec, point, int(np.argmin(distances)))


def sidecar_path(path: Union[str, Path]) -> Path:
    """
    :param path: Dataset path.
    :return: Where the JSON mirror of the header lives.
    """
    return Path(str(path) + ".json")


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> None:
    """
    Write the binary dataset plus its JSON sidecar.
    Layout: magic "NLCD", version, n, d, m, count (u32 little endian), then the rotations and the
    points as little endian float64.
    :param dataset: What to write.
    :param path: Destination of the binary file.
    :return: None
    """
    spec = dataset.spec
    count = dataset.points.shape[0]
    header = _DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, spec.n, spec.d, spec.m, count)
    payload = (
        header
        + np.ascontiguousarray(spec.rotations, dtype="<f8").tobytes()
        + np.ascontiguousarray(dataset.points, dtype="<f8").tobytes()
    )
    artifacts.atomic_write_bytes(path, payload)
    artifacts.write_json(
        sidecar_path(path),
        {
            "magic": DATASET_MAGIC.decode("ascii"),
            "version": DATASET_VERSION,
            "n": spec.n,
            "d": spec.d,
            "m": spec.m,
            "count": count,
            "noise_std": spec.noise_std,
            "seed": dataset.seed,
        },
    )


def load_dataset(path: Union[str, Path]) -> Dataset:
    """
    Read a dataset written by `save_dataset`. noise_std and seed come from the sidecar when it
    exists.
    :param path: Binary dataset path.
    :return: The dataset.
    """
    raw = artifacts.read_bytes(path)
    if len(raw) < _DATASET_HEADER.size:
        raise CorruptPayload(f"{path} is too short to be a dataset")

    magic, version, n, d, m, count = _DATASET_HEADER.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise CorruptPayload(f"{path} has bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise VersionMismatch(f"{path} is dataset version {version}, expected {DATASET_VERSION}")

    rotation_values = m * n * n
    point_values = count * n
    expected = _DATASET_HEADER.size + 8 * (rotation_values + point_values)
    if len(raw) != expected:
        raise CorruptPayload(f"{path} should be {expected} bytes, is {len(raw)}")

    body = np.frombuffer(raw, dtype="<f8", offset=_DATASET_HEADER.size).astype(np.float64)
    rotations = body[:rotation_values].reshape(m, n, n)
    points = body[rotation_values:].reshape(count, n)

    noise_std, seed = _read_sidecar(path)
    spec = validate_spec(ManifoldSpec(n=n, d=d, m=m, rotations=rotations, noise_std=noise_std))
    return Dataset(points=points, spec=spec, seed=seed)


def _read_sidecar(path: Union[str, Path]) -> Tuple[float, int]:
    """
    :param path: Binary dataset path.
    :return: (noise_std, seed), defaults if there is no sidecar.
    """
    sidecar = sidecar_path(path)
    if not sidecar.exists():
        return DEFAULT_NOISE_STD, 0
    document = artifacts.json_mapping(artifacts.read_json(sidecar), str(sidecar))
    noise_std = document.get("noise_std", DEFAULT_NOISE_STD)
    seed = document.get("seed", 0)
    if not isinstance(noise_std, (int, float)) or not isinstance(seed, int):
        raise CorruptPayload(f"{sidecar} has malformed noise_std / seed")
    return float(noise_std), seed
