"""
Linear constraints Ax = y and the two constrained samplers: DDNM and iterative projection, both
with noise level correction.

The constraint projection is proj_C(x) = A^+ y + (I - A^+ A) x. Iterative projection alternates it
with the denoiser's manifold projection x - sigma_hat eps_hat, decaying sigma geometrically by
`alpha` and restarting from `sigma_restart` whenever it drops below `sigma_min`. `eta` only mixes
fresh noise into the re-noising direction (some write-ups also call the decay factor eta, here the
two are kept apart).
"""

import logging
import struct
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from nlc_lab import artifacts
from nlc_lab.errors import CorruptPayload, DimMismatch, InvalidRange, VersionMismatch
from nlc_lab.neural import DenoiserFn
from nlc_lab.numeric_core import (
    Rng,
    gaussian_mat,
    gaussian_vec,
    moore_penrose_residuals,
    pseudo_inverse,
)
from nlc_lab.sampler import (
    NoiseLevelCorrection,
    Trajectory,
    TrajectoryRecorder,
    check_schedule,
    csv_cell,
    ddpm_noise_split,
    direction_and_norm,
    one_step_estimate,
    residual_value,
    vp_init,
)
from nlc_lab.schedule import NoiseSchedule

LOGGER = logging.getLogger(__name__)

KIND_RANDOM_ROW = "random-row"
KIND_COORDINATE_MASK = "coordinate-mask"
KIND_CUSTOM = "custom"
OPERATOR_KINDS = (KIND_RANDOM_ROW, KIND_COORDINATE_MASK, KIND_CUSTOM)

PENROSE_TOLERANCE = 1e-8

DEFAULT_SIGMA_MAX = 1.0
DEFAULT_SIGMA_MIN = 0.01
DEFAULT_ALPHA = 0.95
DEFAULT_ETA = 0.2
DEFAULT_K_MAX = 200
# Default stop_tol, per sqrt(n).
STOP_TOL_PER_ROOT_N = 1e-4

OPERATOR_MAGIC = b"NLCM"
OPERATOR_VERSION = 1
_OPERATOR_HEADER = struct.Struct("<4sIII")

RESTORATION_CSV_HEADER = (
    "seed",
    "iteration",
    "sigma_k",
    "sigma_hat",
    "dist",
    "consistency",
    "delta_x",
)


class LinearOperator(NamedTuple):
    """
    Full row rank degradation operator and its pseudo-inverse.
    """

    matrix: np.ndarray
    pinv: np.ndarray
    kind: str


class IterProjConfig(NamedTuple):
    """
    Settings of the iterative projection sampler.
    """

    sigma_max: float
    sigma_min: float
    sigma_restart: float
    # Geometric decay of sigma per iteration.
    alpha: float
    # Weight of fresh noise in the re-noising direction.
    eta: float
    k_max: int
    # None resolves to STOP_TOL_PER_ROOT_N sqrt(n), see `stop_tolerance`.
    stop_tol: Optional[float]
    normalize_direction: bool


class IterProjResult(NamedTuple):
    """
    `converged` is False when the iteration cap was hit before the estimates settled.
    """

    sample: np.ndarray
    trajectory: Trajectory
    converged: bool


def make_operator(matrix: np.ndarray, kind: str = KIND_CUSTOM) -> LinearOperator:
    """
    :param matrix: r x n operator of full row rank.
    :param kind: One of `OPERATOR_KINDS`.
    :return: Operator with a verified pseudo-inverse.
    """
    if kind not in OPERATOR_KINDS:
        raise InvalidRange(f"unknown operator kind {kind!r}")
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] > a.shape[1]:
        raise DimMismatch(f"operator must be r x n with r <= n, got shape {a.shape}")
    pinv = pseudo_inverse(a)
    scale = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(pinv))))
    worst = max(moore_penrose_residuals(a, pinv))
    if worst > PENROSE_TOLERANCE * scale:
        raise InvalidRange(f"pseudo-inverse misses the Penrose conditions by {worst}")
    return LinearOperator(matrix=a, pinv=pinv, kind=kind)


def random_row_operator(rng: Rng, rows: int, n: int) -> LinearOperator:
    """
    :param rng: Draws the entries.
    :param rows: r.
    :param n: Data dimension.
    :return: Operator with i.i.d. standard normal entries.
    """
    return make_operator(gaussian_mat(rng, rows, n), KIND_RANDOM_ROW)


def coordinate_mask_operator(indices: Sequence[int], n: int) -> LinearOperator:
    """
    :param indices: Observed coordinates, distinct.
    :param n: Data dimension.
    :return: Operator selecting those coordinates.
    """
    if len(set(indices)) != len(indices) or not indices:
        raise InvalidRange("coordinate mask needs distinct indices")
    if min(indices) < 0 or max(indices) >= n:
        raise InvalidRange(f"coordinate indices must be in [0, {n})")
    matrix = np.zeros((len(indices), n))
    matrix[np.arange(len(indices)), list(indices)] = 1.0
    return make_operator(matrix, KIND_COORDINATE_MASK)


def custom_operator(matrix: np.ndarray) -> LinearOperator:
    """
    :param matrix: Any full row rank matrix.
    :return: Operator.
    """
    return make_operator(matrix, KIND_CUSTOM)


def project_constraint(op: LinearOperator, y: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    """
    A^+ y + (I - A^+ A) x_hat.
    :param op: Operator.
    :param y: Observation (r,).
    :param x_hat: Point to project (n,).
    :return: Closest point of {x : A x = y}.
    """
    rows, cols = op.matrix.shape
    if y.shape != (rows,) or x_hat.shape != (cols,):
        raise DimMismatch(f"operator is {rows}x{cols}, got y {y.shape} and x {x_hat.shape}")
    result: np.ndarray = x_hat + op.pinv @ (y - op.matrix @ x_hat)
    return result


def consistency(op: LinearOperator, x: np.ndarray, y: np.ndarray) -> float:
    """
    :return: ||A x - y||.
    """
    return float(np.linalg.norm(op.matrix @ x - y))


def sample_ddnm_nlc(  # pylint: disable=too-many-arguments,too-many-locals
    denoiser: DenoiserFn,
    nlc: NoiseLevelCorrection,
    schedule: NoiseSchedule,
    op: LinearOperator,
    y: np.ndarray,
    eta: float,
    rng: Rng,
    normalize_direction: bool = True,
    seed: int = 0,
) -> Tuple[np.ndarray, Trajectory]:
    """
    DDNM with noise level correction. Each clean estimate is projected onto the constraint before
    the DDPM style noise split.
    :param denoiser: eps_theta.
    :param nlc: Correction source.
    :param schedule: Noise levels to visit.
    :param op: Constraint operator.
    :param y: Observation.
    :param eta: Randomness scale in [0, 1].
    :param rng: Draws x_T and the injected noise.
    :param normalize_direction: Rescale eps_theta to norm sqrt(n).
    :param seed: Recorded on the trajectory.
    :return: (sample, trajectory with per-step consistency of the projected estimate).
    """
    if not 0.0 <= eta <= 1.0:
        raise InvalidRange(f"eta must be in [0, 1], got {eta}")
    check_schedule(schedule)
    n = op.matrix.shape[1]
    x = vp_init(schedule, n, rng)
    recorder = TrajectoryRecorder(seed)

    for index in range(schedule.steps):
        sigma = float(schedule.sigmas[index])
        sigma_next = float(schedule.sigmas[index + 1])

        r = residual_value(nlc, x, sigma)
        sigma_hat = sigma * (1.0 + r)
        sigma_hat_next = sigma_hat * sigma_next / sigma
        eps_hat, norm = direction_and_norm(denoiser, x, sigma_hat, normalize_direction)
        projected = project_constraint(op, y, one_step_estimate(x, sigma_hat, eps_hat))
        recorder.step(x, sigma, sigma_hat, r, norm, projected, consistency(op, projected, y))

        sigma_signal, sigma_noise = ddpm_noise_split(sigma_hat, sigma_hat_next, eta)
        x = projected + sigma_signal * eps_hat
        if eta > 0:
            x = x + sigma_noise * gaussian_vec(rng, n)

    return x, recorder.finish(x, consistency(op, x, y))


def make_iterproj_config(  # pylint: disable=too-many-arguments
    sigma_max: float = DEFAULT_SIGMA_MAX,
    sigma_min: float = DEFAULT_SIGMA_MIN,
    sigma_restart: Optional[float] = None,
    alpha: float = DEFAULT_ALPHA,
    eta: float = DEFAULT_ETA,
    k_max: int = DEFAULT_K_MAX,
    stop_tol: Optional[float] = None,
    normalize_direction: bool = True,
) -> IterProjConfig:
    """
    Validated config. sigma_restart defaults to 0.1 sigma_max.
    :param sigma_max: Starting level.
    :param sigma_min: Restart threshold.
    :param sigma_restart: Level to restart from.
    :param alpha: Decay factor in (0, 1).
    :param eta: Fresh noise weight in [0, 1].
    :param k_max: Iteration cap.
    :param stop_tol: Stop once consecutive projected estimates move less than this, None for
        1e-4 sqrt(n).
    :param normalize_direction: Rescale eps_theta to norm sqrt(n).
    :return: The config.
    """
    if sigma_restart is None:
        sigma_restart = 0.1 * sigma_max
    if not 0 < sigma_min < sigma_restart <= sigma_max:
        raise InvalidRange(
            f"need 0 < sigma_min < sigma_restart <= sigma_max, "
            f"got {sigma_min}, {sigma_restart}, {sigma_max}"
        )
    if not 0 < alpha < 1:
        raise InvalidRange(f"alpha must be in (0, 1), got {alpha}")
    if not 0 <= eta <= 1:
        raise InvalidRange(f"eta must be in [0, 1], got {eta}")
    if k_max < 1 or (stop_tol is not None and stop_tol < 0):
        raise InvalidRange(f"need k_max >= 1 and stop_tol >= 0, got {k_max}, {stop_tol}")
    return IterProjConfig(
        sigma_max=float(sigma_max),
        sigma_min=float(sigma_min),
        sigma_restart=float(sigma_restart),
        alpha=float(alpha),
        eta=float(eta),
        k_max=int(k_max),
        stop_tol=None if stop_tol is None else float(stop_tol),
        normalize_direction=normalize_direction,
    )


def stop_tolerance(config: IterProjConfig, n: int) -> float:
    """
    :param config: Stopping settings.
    :param n: Data dimension.
    :return: The configured stop_tol, or 1e-4 sqrt(n) when none was given.
    """
    if config.stop_tol is None:
        return float(STOP_TOL_PER_ROOT_N * np.sqrt(n))
    return config.stop_tol


def next_sigma(config: IterProjConfig, sigma: float) -> float:
    """
    :param config: Decay settings.
    :param sigma: Current level.
    :return: alpha sigma, or sigma_restart if that falls below sigma_min.
    """
    decayed = config.alpha * sigma
    return config.sigma_restart if decayed < config.sigma_min else decayed


def iterproj_sigma_sequence(config: IterProjConfig, count: int) -> np.ndarray:
    """
    :param config: Decay settings.
    :param count: How many levels.
    :return: sigma_(0) .. sigma_(count - 1).
    """
    sigmas = [config.sigma_max]
    while len(sigmas) < count:
        sigmas.append(next_sigma(config, sigmas[-1]))
    return np.asarray(sigmas[:count])


def iterproj_nlc(  # pylint: disable=too-many-arguments,too-many-locals
    denoiser: DenoiserFn,
    nlc: NoiseLevelCorrection,
    op: LinearOperator,
    y: np.ndarray,
    config: IterProjConfig,
    rng: Rng,
    seed: int = 0,
) -> IterProjResult:
    """
    Alternate the manifold projection x - sigma_hat eps_hat with the constraint projection,
    re-noising with sqrt(1 - eta^2) eps_hat + eta eps at the decayed level. Runs at most `k_max`
    iterations, stopping early when consecutive projected estimates move less than `stop_tol`.
    :param denoiser: eps_theta.
    :param nlc: Correction source.
    :param op: Constraint operator.
    :param y: Observation.
    :param config: Schedule, mixing and stopping settings.
    :param rng: Draws x_(0) and the fresh noise.
    :param seed: Recorded on the trajectory.
    :return: The last projected estimate with its trajectory.
    """
    n = op.matrix.shape[1]
    tolerance = stop_tolerance(config, n)
    x = config.sigma_max * gaussian_vec(rng, n)
    sigma = config.sigma_max
    recorder = TrajectoryRecorder(seed)
    previous: Optional[np.ndarray] = None
    projected = x
    converged = False
    keep = np.sqrt(1.0 - config.eta**2)

    for iteration in range(config.k_max):
        r = residual_value(nlc, x, sigma)
        sigma_hat = sigma * (1.0 + r)
        eps_hat, norm = direction_and_norm(denoiser, x, sigma_hat, config.normalize_direction)
        projected = project_constraint(op, y, one_step_estimate(x, sigma_hat, eps_hat))
        recorder.step(x, sigma, sigma_hat, r, norm, projected, consistency(op, projected, y))

        if previous is not None and np.linalg.norm(projected - previous) < tolerance:
            converged = True
            LOGGER.debug("Iterative projection settled after %d iterations", iteration + 1)
            break
        previous = projected

        sigma = next_sigma(config, sigma)
        mixed = keep * eps_hat + config.eta * gaussian_vec(rng, n)
        x = projected + sigma * mixed

    return IterProjResult(
        sample=projected,
        trajectory=recorder.finish(projected, consistency(op, projected, y)),
        converged=converged,
    )


def restoration_rows(trajectory: Trajectory) -> List[Tuple[artifacts.CsvCell, ...]]:
    """
    :param trajectory: Constrained trajectory, ideally with distances.
    :return: Rows in `RESTORATION_CSV_HEADER` order, the sentinel row dropped.
    """
    estimates = trajectory.estimates
    deltas = np.full(estimates.shape[0], np.nan)
    deltas[1:] = np.linalg.norm(np.diff(estimates, axis=0), axis=1)
    rows: List[Tuple[artifacts.CsvCell, ...]] = []
    for iteration in range(trajectory.sigmas.shape[0] - 1):
        rows.append(
            (
                trajectory.seed,
                iteration,
                float(trajectory.sigmas[iteration]),
                float(trajectory.sigma_hats[iteration]),
                csv_cell(trajectory.distances[iteration]),
                csv_cell(trajectory.consistency[iteration]),
                csv_cell(deltas[iteration]),
            )
        )
    return rows


def write_restoration_csv(trajectories: Sequence[Trajectory], path: Union[str, Path]) -> None:
    """
    :param trajectories: Constrained trajectories, in output order.
    :param path: Destination.
    :return: None
    """
    rows: List[Tuple[artifacts.CsvCell, ...]] = []
    for trajectory in trajectories:
        rows.extend(restoration_rows(trajectory))
    artifacts.write_csv(path, RESTORATION_CSV_HEADER, rows)


def operator_manifest_path(path: Union[str, Path]) -> Path:
    """
    :param path: Operator path.
    :return: Where its JSON manifest lives.
    """
    return Path(str(path) + ".json")


def save_operator(op: LinearOperator, path: Union[str, Path], seed: int = 0) -> None:
    """
    Layout: magic "NLCM", version, rows, cols (u32 little endian), then A as little endian float64.
    The pseudo-inverse is recomputed on load.
    :param op: Operator.
    :param path: Destination.
    :param seed: Recorded in the manifest.
    :return: None
    """
    rows, cols = op.matrix.shape
    artifacts.atomic_write_bytes(
        path,
        _OPERATOR_HEADER.pack(OPERATOR_MAGIC, OPERATOR_VERSION, rows, cols)
        + np.ascontiguousarray(op.matrix, dtype="<f8").tobytes(),
    )
    artifacts.write_json(
        operator_manifest_path(path),
        {"kind": op.kind, "rows": rows, "cols": cols, "seed": seed, "version": OPERATOR_VERSION},
    )


def load_operator(path: Union[str, Path]) -> LinearOperator:
    """
    :param path: File written by `save_operator`.
    :return: The operator.
    """
    raw = artifacts.read_bytes(path)
    if len(raw) < _OPERATOR_HEADER.size:
        raise CorruptPayload(f"{path} is too short to be an operator")
    magic, version, rows, cols = _OPERATOR_HEADER.unpack_from(raw, 0)
    if magic != OPERATOR_MAGIC:
        raise CorruptPayload(f"{path} has bad magic {magic!r}")
    if version != OPERATOR_VERSION:
        raise VersionMismatch(f"{path} is operator version {version}, expected {OPERATOR_VERSION}")
    if len(raw) != _OPERATOR_HEADER.size + 8 * rows * cols:
        raise CorruptPayload(f"{path} has the wrong length for a {rows}x{cols} operator")
    matrix = np.frombuffer(raw, dtype="<f8", offset=_OPERATOR_HEADER.size).reshape(rows, cols)

    kind = KIND_CUSTOM
    manifest = operator_manifest_path(path)
    if manifest.exists():
        stored = artifacts.json_mapping(artifacts.read_json(manifest), str(manifest)).get("kind")
        if isinstance(stored, str) and stored in OPERATOR_KINDS:
            kind = stored
    return make_operator(matrix.astype(np.float64), kind)
