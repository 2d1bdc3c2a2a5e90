"""
Noise level schedules, the log-SNR view of a schedule used by the DPM sampler, and the lookup
table approximation of the noise level corrector.

A schedule is stored largest noise first: sigmas = (sigma_T, ..., sigma_1, 0). The trailing zero is
a sentinel, every sampler ends on it. alphas[i] = 1 / (1 + sigmas[i]^2), so alpha = 1 at the
sentinel.
"""

import logging
from pathlib import Path
from typing import List, NamedTuple, Sequence, Tuple, Union

import numpy as np

from nlc_lab import artifacts
from nlc_lab.errors import EmptyRecords, InvalidRange, IoFailure

LOGGER = logging.getLogger(__name__)

FAMILY_DDPM = "ddpm-linear"
FAMILY_EDM = "edm-rho"
FAMILY_CUSTOM = "custom"

DEFAULT_T = 1000
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02

DEFAULT_EDM_SIGMA_MIN = 0.002
DEFAULT_EDM_SIGMA_MAX = 80.0
DEFAULT_EDM_RHO = 7.0

DEFAULT_LUT_BINS = 64

CONSISTENCY_TOLERANCE = 1e-12

LUT_FORMAT = "nlc-lut"
LUT_VERSION = 1


class NoiseSchedule(NamedTuple):
    """
    Decreasing noise levels plus the matching alpha values.
    """

    sigmas: np.ndarray
    alphas: np.ndarray
    family: str

    @property
    def steps(self) -> int:
        """
        :return: Number of sampler steps, i.e. the number of positive sigmas.
        """
        return int(self.sigmas.shape[0]) - 1


class DpmSchedule(NamedTuple):
    """
    A schedule seen through lambda = log(alpha_vp / sigma_vp), alpha_vp = 1 / sqrt(1 + sigma^2)
    and sigma_vp = sigma / sqrt(1 + sigma^2). This simplifies to lambda = -log(sigma).

    `lambdas[i]` belongs to `base.sigmas[i]` and only covers the positive sigmas. Between grid
    points lambda is linear in the (continuous) step index.
    """

    base: NoiseSchedule
    lambdas: np.ndarray


class LookupTable(NamedTuple):
    """
    Mean corrector output per log-spaced sigma bin. Bins without samples have a NaN mean / std.
    """

    sigma_edges: np.ndarray
    mean_r: np.ndarray
    std_r: np.ndarray
    counts: np.ndarray


def _alphas(sigmas: np.ndarray) -> np.ndarray:
    result: np.ndarray = 1.0 / (1.0 + sigmas**2)
    return result


def validate_schedule(schedule: NoiseSchedule) -> NoiseSchedule:
    """
    Check ordering, the sentinel and sigma / alpha consistency.
    :param schedule: Schedule to check.
    :return: The same schedule.
    """
    sigmas = schedule.sigmas
    if sigmas.ndim != 1 or sigmas.shape[0] < 2:
        raise InvalidRange("a schedule needs at least one positive sigma plus the sentinel")
    if sigmas[-1] != 0.0:
        raise InvalidRange("a schedule must end with the sigma = 0 sentinel")
    positive = sigmas[:-1]
    if not np.all(np.isfinite(positive)) or np.any(positive <= 0):
        raise InvalidRange("schedule sigmas must be finite and positive")
    if np.any(np.diff(positive) >= 0):
        raise InvalidRange("schedule sigmas must be strictly decreasing")
    if schedule.alphas.shape != sigmas.shape:
        raise InvalidRange("sigmas and alphas differ in length")
    recovered = np.sqrt((1.0 - schedule.alphas) / schedule.alphas)
    if np.max(np.abs(recovered - sigmas)) > CONSISTENCY_TOLERANCE * max(1.0, float(sigmas[0])):
        raise InvalidRange("sigmas and alphas are inconsistent")
    return schedule


def schedule_from_sigmas(sigmas: Sequence[float], family: str = FAMILY_CUSTOM) -> NoiseSchedule:
    """
    Wrap a user supplied decreasing sequence. The sentinel is appended when missing.
    :param sigmas: sigma_T .. sigma_1, optionally followed by 0.
    :param family: Family tag to record.
    :return: Validated schedule.
    """
    values = np.asarray(list(sigmas), dtype=np.float64)
    if values.size == 0:
        raise InvalidRange("empty schedule")
    if values[-1] != 0.0:
        values = np.append(values, 0.0)
    return validate_schedule(NoiseSchedule(sigmas=values, alphas=_alphas(values), family=family))


def build_ddpm_schedule(
    T: int,  # pylint: disable=invalid-name
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
) -> NoiseSchedule:
    """
    Linear beta schedule: beta_i = linspace(beta_min, beta_max, T), alpha_bar_t = prod (1 - beta_i)
    and sigma_t = sqrt((1 - alpha_bar_t) / alpha_bar_t).
    :param T: Number of diffusion steps.
    :param beta_min: First beta.
    :param beta_max: Last beta, may equal `beta_min` for a constant schedule.
    :return: Schedule with T steps.
    """
    if T < 2:
        raise InvalidRange(f"T must be at least 2, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise InvalidRange(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")

    betas = np.linspace(beta_min, beta_max, T)
    alpha_bars = np.cumprod(1.0 - betas)
    ascending = np.sqrt((1.0 - alpha_bars) / alpha_bars)
    sigmas = np.append(ascending[::-1], 0.0)
    return validate_schedule(
        NoiseSchedule(sigmas=sigmas, alphas=_alphas(sigmas), family=FAMILY_DDPM)
    )


def build_edm_schedule(
    steps: int,
    sigma_min: float = DEFAULT_EDM_SIGMA_MIN,
    sigma_max: float = DEFAULT_EDM_SIGMA_MAX,
    rho: float = DEFAULT_EDM_RHO,
) -> NoiseSchedule:
    """
    sigma_i = (sigma_max^(1/rho) + i / (N - 1) * (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho.
    :param steps: N, at least 2.
    :param sigma_min: Smallest positive sigma.
    :param sigma_max: Largest sigma.
    :param rho: Curvature, 1 is a linear ramp.
    :return: Schedule with `steps` steps.
    """
    if steps < 2:
        raise InvalidRange(f"need at least 2 steps, got {steps}")
    if not 0 < sigma_min < sigma_max:
        raise InvalidRange(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if rho < 1:
        raise InvalidRange(f"rho must be >= 1, got {rho}")

    ramp = np.arange(steps) / (steps - 1)
    max_root = sigma_max ** (1.0 / rho)
    min_root = sigma_min ** (1.0 / rho)
    positive = (max_root + ramp * (min_root - max_root)) ** rho
    # Pin the ends, the power can be off by an ulp.
    positive[0] = sigma_max
    positive[-1] = sigma_min
    sigmas = np.append(positive, 0.0)
    return validate_schedule(
        NoiseSchedule(sigmas=sigmas, alphas=_alphas(sigmas), family=FAMILY_EDM)
    )


def subsample(schedule: NoiseSchedule, steps: int) -> NoiseSchedule:
    """
    Keep every c-th noise level starting from the largest, c = T // steps, i.e. the timesteps
    T, T - c, ..., T - (steps - 1) c of the usual strided sampler.
    :param schedule: Full schedule with T steps.
    :param steps: How many steps to keep.
    :return: Shorter schedule, same family.
    """
    total = schedule.steps
    if not 2 <= steps <= total:
        raise InvalidRange(f"need 2 <= steps <= {total}, got {steps}")
    stride = total // steps
    positions = np.arange(steps) * stride
    sigmas = np.append(schedule.sigmas[positions], 0.0)
    return validate_schedule(
        NoiseSchedule(sigmas=sigmas, alphas=_alphas(sigmas), family=schedule.family)
    )


def default_toy_schedule(steps: int) -> NoiseSchedule:
    """
    :param steps: Sampler steps.
    :return: The T=1000 linear beta (1e-4, 0.02) schedule subsampled to `steps`.
    """
    return subsample(build_ddpm_schedule(DEFAULT_T, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX), steps)


def build_dpm_schedule(schedule: NoiseSchedule) -> DpmSchedule:
    """
    :param schedule: Base schedule.
    :return: The schedule with its lambda grid.
    """
    validate_schedule(schedule)
    positive = schedule.sigmas[:-1]
    alpha_vp = 1.0 / np.sqrt(1.0 + positive**2)
    sigma_vp = positive * alpha_vp
    return DpmSchedule(base=schedule, lambdas=np.log(alpha_vp / sigma_vp))


def t_lambda(dpm: DpmSchedule, lam: float) -> float:
    """
    Inverse of the lambda grid.
    :param dpm: Schedule.
    :param lam: Log-SNR value, clamped to the grid's range.
    :return: Continuous step index, 0 is sigma_T.
    """
    indices = np.arange(dpm.lambdas.shape[0], dtype=np.float64)
    return float(np.interp(lam, dpm.lambdas, indices))


def lambda_at(dpm: DpmSchedule, index: float) -> float:
    """
    :param dpm: Schedule.
    :param index: Continuous step index.
    :return: Lambda, linear between grid points.
    """
    indices = np.arange(dpm.lambdas.shape[0], dtype=np.float64)
    return float(np.interp(index, indices, dpm.lambdas))


def sigma_at(dpm: DpmSchedule, index: float) -> float:
    """
    :param dpm: Schedule.
    :param index: Continuous step index.
    :return: exp(-lambda(index)), matches the grid sigmas at integer indices.
    """
    return float(np.exp(-lambda_at(dpm, index)))


def _log_edges(low: float, high: float, num_bins: int) -> np.ndarray:
    if low == high:
        # Every record shares one sigma, give its bin a nonzero width.
        low, high = low / 1.01, high * 1.01
    edges: np.ndarray = np.linspace(np.log(low), np.log(high), num_bins + 1)
    return edges


def record_and_build_lut(
    records: Union[np.ndarray, Sequence[Tuple[float, float]]],
    num_bins: int = DEFAULT_LUT_BINS,
) -> LookupTable:
    """
    Bin (sigma, r) records into `num_bins` log-spaced bins spanning the recorded sigmas.
    :param records: (count, 2) array or a sequence of (sigma, r) pairs.
    :param num_bins: Number of bins.
    :return: The table.
    """
    table = np.asarray(records, dtype=np.float64).reshape(-1, 2)
    if table.shape[0] == 0:
        raise EmptyRecords("cannot build a lookup table from zero records")
    if num_bins < 1:
        raise InvalidRange(f"num_bins must be positive, got {num_bins}")
    sigmas = table[:, 0]
    residuals = table[:, 1]
    if np.any(sigmas <= 0) or not np.all(np.isfinite(table)):
        raise InvalidRange("lookup table records need finite r and sigma > 0")

    log_edges = _log_edges(float(np.min(sigmas)), float(np.max(sigmas)), num_bins)
    bins = np.clip(np.searchsorted(log_edges, np.log(sigmas), side="right") - 1, 0, num_bins - 1)

    counts = np.bincount(bins, minlength=num_bins)
    populated = counts > 0
    sums = np.bincount(bins, weights=residuals, minlength=num_bins)
    means = np.full(num_bins, np.nan)
    means[populated] = sums[populated] / counts[populated]
    squared = np.bincount(bins, weights=(residuals - means[bins]) ** 2, minlength=num_bins)
    stds = np.full(num_bins, np.nan)
    stds[populated] = np.sqrt(squared[populated] / counts[populated])

    LOGGER.info(
        "Built a %d bin lookup table from %d records, %d bins populated",
        num_bins,
        table.shape[0],
        int(np.sum(populated)),
    )
    return LookupTable(sigma_edges=np.exp(log_edges), mean_r=means, std_r=stds, counts=counts)


def bin_centers(table: LookupTable) -> np.ndarray:
    """
    :param table: Lookup table.
    :return: Geometric center of every bin.
    """
    centers: np.ndarray = np.sqrt(table.sigma_edges[:-1] * table.sigma_edges[1:])
    return centers


def lut_query(table: LookupTable, sigma: float) -> float:
    """
    Piecewise linear in log sigma through the populated bin centers, clamped at the ends.
    :param table: Lookup table.
    :param sigma: Scheduled noise level.
    :return: Estimated residual r.
    """
    if sigma <= 0:
        raise InvalidRange(f"lookup table queries need sigma > 0, got {sigma}")
    populated = table.counts > 0
    if not np.any(populated):
        raise EmptyRecords("lookup table has no populated bins")
    log_centers = np.log(bin_centers(table)[populated])
    return float(np.interp(np.log(sigma), log_centers, table.mean_r[populated]))


def _nullable(values: np.ndarray) -> List[artifacts.JsonValue]:
    return [artifacts.finite_or_none(float(v)) for v in values]


def save_lut(table: LookupTable, path: Union[str, Path]) -> None:
    """
    JSON with the bin edges, means, stds and counts. Empty bins have null mean / std.
    :param table: Table to write.
    :param path: Destination.
    :return: None
    """
    artifacts.write_json(
        path,
        {
            "format": LUT_FORMAT,
            "version": LUT_VERSION,
            "sigma_edges": [float(v) for v in table.sigma_edges],
            "mean_r": _nullable(table.mean_r),
            "std_r": _nullable(table.std_r),
            "counts": [int(v) for v in table.counts],
        },
    )


def _float_column(document: artifacts.JsonValue, key: str, path: Union[str, Path]) -> np.ndarray:
    if not isinstance(document, dict):
        raise IoFailure(f"{path} must be a JSON object")
    column = document.get(key)
    if not isinstance(column, list):
        raise IoFailure(f"{path} is missing the {key} list")
    values: List[float] = []
    for value in column:
        if value is None:
            values.append(float("nan"))
        elif isinstance(value, (int, float)) and not isinstance(value, bool):
            values.append(float(value))
        else:
            raise IoFailure(f"{path} has a non-numeric entry in {key}")
    return np.asarray(values, dtype=np.float64)


def load_lut(path: Union[str, Path]) -> LookupTable:
    """
    :param path: File written by `save_lut`.
    :return: The table.
    """
    document = artifacts.read_json(path)
    mapping = artifacts.json_mapping(document, str(path))
    if mapping.get("format") != LUT_FORMAT or mapping.get("version") != LUT_VERSION:
        raise IoFailure(f"{path} is not a version {LUT_VERSION} lookup table")

    edges = _float_column(document, "sigma_edges", path)
    counts = _float_column(document, "counts", path).astype(np.int64)
    table = LookupTable(
        sigma_edges=edges,
        mean_r=_float_column(document, "mean_r", path),
        std_r=_float_column(document, "std_r", path),
        counts=counts,
    )
    bins = edges.shape[0] - 1
    if bins < 1 or any(column.shape[0] != bins for column in table[1:]):
        raise IoFailure(f"{path} has inconsistent column lengths")
    if np.any(np.diff(edges) <= 0):
        raise IoFailure(f"{path} has non-increasing bin edges")
    return table
