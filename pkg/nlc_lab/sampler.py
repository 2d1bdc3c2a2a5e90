"""
Unconstrained samplers (DDIM / DDPM, EDM Euler / Heun, second order DPM-Solver) with optional
noise level correction.

Everything runs in the x-space parameterization x_t = x_0 + sigma_t eps. At every step the
scheduled sigma_t is replaced by sigma_hat_t = sigma_t (1 + r(x_t, sigma_t)), and the next level is
moved by the same ratio: sigma_hat_{t-1} = sigma_hat_t sigma_{t-1} / sigma_t. With correction off
and no direction normalization each sampler is exactly its textbook recursion.
"""

import logging
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from nlc_lab import artifacts
from nlc_lab.errors import InvalidRange, ScheduleExhausted, ZeroDirection
from nlc_lab.manifold import ManifoldSpec, exact_distances
from nlc_lab.neural import RESIDUAL_FLOOR, DenoiserFn, ResidualFn
from nlc_lab.numeric_core import Rng, gaussian_vec
from nlc_lab.schedule import (
    DpmSchedule,
    LookupTable,
    NoiseSchedule,
    build_dpm_schedule,
    lut_query,
    sigma_at,
    t_lambda,
    validate_schedule,
)

LOGGER = logging.getLogger(__name__)

STEP_LOG_MSG = "step %d sigma=%.6g sigma_hat=%.6g r=%.6g |eps|=%.6g"

ALGO_DDIM = "ddim"
ALGO_DDPM = "ddpm"
ALGO_EDM_EULER = "edm-euler"
ALGO_EDM_HEUN = "edm-heun"
ALGO_DPM2 = "dpm2"
ALGORITHMS = (ALGO_DDIM, ALGO_DDPM, ALGO_EDM_EULER, ALGO_EDM_HEUN, ALGO_DPM2)

NLC_OFF = "off"
NLC_NETWORK = "network"
NLC_LUT = "lut"
NLC_MODES = (NLC_OFF, NLC_NETWORK, NLC_LUT)

# Below this ||eps_theta|| the direction cannot be normalized.
ZERO_DIRECTION_TOLERANCE = 1e-12

TRAJECTORY_CSV_HEADER = (
    "seed",
    "step",
    "sigma",
    "sigma_hat",
    "r",
    "dir_norm",
    "dist",
    "bias",
    "beta_t",
)


class NoiseLevelCorrection(NamedTuple):
    """
    Where the residual r comes from. Build with `nlc_off`, `nlc_network` or `nlc_lut`.
    """

    mode: str
    residual: Optional[ResidualFn]
    table: Optional[LookupTable]


class SamplerConfig(NamedTuple):
    """
    Settings shared by the unconstrained samplers.
    """

    algorithm: str
    nlc_mode: str
    # 0 is deterministic DDIM, 1 is DDPM.
    eta: float
    normalize_direction: bool
    seed: int


class Trajectory(NamedTuple):
    """
    One row per visited noise level, the last row is the sigma = 0 sentinel holding the sample.
    Columns that do not apply to a row (r at the sentinel, distances before
    `annotate_distances`, consistency for unconstrained runs) are NaN.
    """

    seed: int
    xs: np.ndarray
    sigmas: np.ndarray
    sigma_hats: np.ndarray
    residuals: np.ndarray
    dir_norms: np.ndarray
    # One-step (or constraint projected) clean estimate made at each row.
    estimates: np.ndarray
    distances: np.ndarray
    consistency: np.ndarray
    sample: np.ndarray


def nlc_off() -> NoiseLevelCorrection:
    """
    :return: No correction, sigma_hat = sigma.
    """
    return NoiseLevelCorrection(mode=NLC_OFF, residual=None, table=None)


def nlc_network(residual: ResidualFn) -> NoiseLevelCorrection:
    """
    :param residual: Trained corrector, see `neural.residual_fn`.
    :return: Correction by network.
    """
    return NoiseLevelCorrection(mode=NLC_NETWORK, residual=residual, table=None)


def nlc_lut(table: LookupTable) -> NoiseLevelCorrection:
    """
    :param table: Lookup table keyed on the scheduled sigma.
    :return: Correction by lookup table.
    """
    return NoiseLevelCorrection(mode=NLC_LUT, residual=None, table=table)


def make_sampler_config(
    algorithm: str,
    nlc_mode: str = NLC_OFF,
    eta: Optional[float] = None,
    normalize_direction: Optional[bool] = None,
    seed: int = 0,
) -> SamplerConfig:
    """
    Validated config. eta defaults to 1 for ddpm and 0 otherwise, direction normalization
    defaults to on for corrected DDIM / DDPM runs.
    :param algorithm: One of `ALGORITHMS`.
    :param nlc_mode: One of `NLC_MODES`.
    :param eta: Randomness scale in [0, 1].
    :param normalize_direction: Rescale eps_theta to norm sqrt(n).
    :param seed: Run seed.
    :return: The config.
    """
    if algorithm not in ALGORITHMS:
        raise InvalidRange(f"unknown algorithm {algorithm!r}, expected one of {ALGORITHMS}")
    if nlc_mode not in NLC_MODES:
        raise InvalidRange(f"unknown nlc mode {nlc_mode!r}, expected one of {NLC_MODES}")
    ode = algorithm not in (ALGO_DDIM, ALGO_DDPM)
    if eta is None:
        eta = 1.0 if algorithm == ALGO_DDPM else 0.0
    if normalize_direction is None:
        normalize_direction = not ode and nlc_mode != NLC_OFF
    if not 0.0 <= eta <= 1.0:
        raise InvalidRange(f"eta must be in [0, 1], got {eta}")
    if ode and normalize_direction:
        raise InvalidRange(f"{algorithm} does not normalize the denoiser direction")
    return SamplerConfig(
        algorithm=algorithm,
        nlc_mode=nlc_mode,
        eta=float(eta),
        normalize_direction=bool(normalize_direction),
        seed=seed,
    )


def residual_value(nlc: NoiseLevelCorrection, x: np.ndarray, sigma: float) -> float:
    """
    :param nlc: Correction source.
    :param x: Current point.
    :param sigma: Scheduled noise level.
    :return: r, floored so that 1 + r > 0.
    """
    if nlc.mode == NLC_OFF:
        return 0.0
    if nlc.mode == NLC_NETWORK and nlc.residual is not None:
        return max(float(nlc.residual(x, sigma)), RESIDUAL_FLOOR)
    if nlc.mode == NLC_LUT and nlc.table is not None:
        return max(lut_query(nlc.table, sigma), RESIDUAL_FLOOR)
    raise InvalidRange(f"noise level correction {nlc.mode!r} is missing its source")


def corrected_sigma(nlc: NoiseLevelCorrection, x: np.ndarray, sigma: float) -> float:
    """
    sigma_hat = sigma (1 + r(x, sigma)).
    :param nlc: Correction source.
    :param x: Current point.
    :param sigma: Scheduled noise level, > 0.
    :return: Corrected noise level, > 0.
    """
    if sigma <= 0:
        raise InvalidRange(f"sigma must be positive, got {sigma}")
    return sigma * (1.0 + residual_value(nlc, x, sigma))


def direction_and_norm(
    denoiser: DenoiserFn, x: np.ndarray, sigma_hat: float, normalize: bool
) -> Tuple[np.ndarray, float]:
    """
    :return: (direction, norm of the raw denoiser output).
    """
    raw = denoiser(x, sigma_hat)
    norm = float(np.linalg.norm(raw))
    if not normalize:
        return raw, norm
    if norm <= ZERO_DIRECTION_TOLERANCE:
        raise ZeroDirection(f"denoiser output norm {norm} cannot be normalized")
    result: np.ndarray = np.sqrt(x.shape[0]) * raw / norm
    return result, norm


def direction(denoiser: DenoiserFn, x: np.ndarray, sigma_hat: float, normalize: bool) -> np.ndarray:
    """
    :param denoiser: eps_theta.
    :param x: Current point.
    :param sigma_hat: Noise level the denoiser is evaluated at.
    :param normalize: If True rescale to norm sqrt(n).
    :return: The (possibly normalized) predicted noise.
    """
    vector, _ = direction_and_norm(denoiser, x, sigma_hat, normalize)
    return vector


def one_step_estimate(x: np.ndarray, sigma_hat: float, eps_hat: np.ndarray) -> np.ndarray:
    """
    :param x: Current point.
    :param sigma_hat: Noise level.
    :param eps_hat: Direction.
    :return: x - sigma_hat * eps_hat.
    """
    result: np.ndarray = x - sigma_hat * eps_hat
    return result


def ddpm_noise_split(sigma_hat: float, sigma_hat_next: float, eta: float) -> Tuple[float, float]:
    """
    :param sigma_hat: Current corrected level.
    :param sigma_hat_next: Next corrected level, <= sigma_hat.
    :param eta: Randomness scale.
    :return: (sigma_signal, sigma_noise) with sigma_signal^2 + sigma_noise^2 = sigma_hat_next^2.
    """
    sigma_noise = (
        eta
        * (sigma_hat_next / sigma_hat)
        * np.sqrt(max(sigma_hat**2 - sigma_hat_next**2, 0.0))
    )
    sigma_signal = np.sqrt(max(sigma_hat_next**2 - sigma_noise**2, 0.0))
    return float(sigma_signal), float(sigma_noise)


class TrajectoryRecorder:
    """
    Collects trajectory rows while a sampler runs.
    """

    def __init__(self, seed: int) -> None:
        self.seed = seed
        self.xs: List[np.ndarray] = []
        self.sigmas: List[float] = []
        self.sigma_hats: List[float] = []
        self.residuals: List[float] = []
        self.dir_norms: List[float] = []
        self.estimates: List[np.ndarray] = []
        self.consistency: List[float] = []

    def step(  # pylint: disable=too-many-arguments
        self,
        x: np.ndarray,
        sigma: float,
        sigma_hat: float,
        r: float,
        dir_norm: float,
        estimate: np.ndarray,
        consistency: float = float("nan"),
    ) -> None:
        """
        Record the state a step starts from and what it estimated.
        """
        LOGGER.debug(STEP_LOG_MSG, len(self.xs), sigma, sigma_hat, r, dir_norm)
        self.xs.append(x.copy())
        self.sigmas.append(sigma)
        self.sigma_hats.append(sigma_hat)
        self.residuals.append(r)
        self.dir_norms.append(dir_norm)
        self.estimates.append(estimate.copy())
        self.consistency.append(consistency)

    def finish(self, sample: np.ndarray, consistency: float = float("nan")) -> Trajectory:
        """
        Add the sentinel row.
        :param sample: Final point.
        :param consistency: Constraint violation of the sample, if any.
        :return: The trajectory.
        """
        self.step(sample, 0.0, 0.0, float("nan"), float("nan"), sample, consistency)
        rows = len(self.xs)
        return Trajectory(
            seed=self.seed,
            xs=np.stack(self.xs),
            sigmas=np.asarray(self.sigmas),
            sigma_hats=np.asarray(self.sigma_hats),
            residuals=np.asarray(self.residuals),
            dir_norms=np.asarray(self.dir_norms),
            estimates=np.stack(self.estimates),
            distances=np.full(rows, np.nan),
            consistency=np.asarray(self.consistency),
            sample=sample.copy(),
        )


def check_schedule(schedule: NoiseSchedule) -> None:
    validate_schedule(schedule)
    if schedule.steps < 1:
        raise ScheduleExhausted("schedule has no steps")


def vp_init(schedule: NoiseSchedule, n: int, rng: Rng) -> np.ndarray:
    """
    :return: x_T = sqrt(sigma_T^2 + 1) z.
    """
    result: np.ndarray = np.sqrt(schedule.sigmas[0] ** 2 + 1.0) * gaussian_vec(rng, n)
    return result


def ve_init(schedule: NoiseSchedule, n: int, rng: Rng) -> np.ndarray:
    """
    :return: x_T = sigma_T eps.
    """
    result: np.ndarray = schedule.sigmas[0] * gaussian_vec(rng, n)
    return result


def sample_ddim_ddpm(  # pylint: disable=too-many-arguments,too-many-locals
    denoiser: DenoiserFn,
    nlc: NoiseLevelCorrection,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    rng: Rng,
    n: int,
    x_init: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, Trajectory]:
    """
    DDIM (eta = 0) to DDPM (eta = 1) with noise level correction.
    :param denoiser: eps_theta.
    :param nlc: Correction source.
    :param schedule: Noise levels to visit.
    :param config: eta and direction normalization.
    :param rng: Draws x_T and the injected noise.
    :param n: Data dimension.
    :param x_init: Start point, x_T = sqrt(sigma_T^2 + 1) z when not given.
    :return: (sample, trajectory).
    """
    check_schedule(schedule)
    x = vp_init(schedule, n, rng) if x_init is None else np.array(x_init, dtype=np.float64)
    recorder = TrajectoryRecorder(config.seed)

    for index in range(schedule.steps):
        sigma = float(schedule.sigmas[index])
        sigma_next = float(schedule.sigmas[index + 1])

        r = residual_value(nlc, x, sigma)
        sigma_hat = sigma * (1.0 + r)
        sigma_hat_next = sigma_hat * sigma_next / sigma
        eps_hat, norm = direction_and_norm(denoiser, x, sigma_hat, config.normalize_direction)
        recorder.step(x, sigma, sigma_hat, r, norm, one_step_estimate(x, sigma_hat, eps_hat))

        sigma_signal, sigma_noise = ddpm_noise_split(sigma_hat, sigma_hat_next, config.eta)
        x = x + (sigma_signal - sigma_hat) * eps_hat
        if config.eta > 0:
            x = x + sigma_noise * gaussian_vec(rng, n)

    return x, recorder.finish(x)


def sample_edm(  # pylint: disable=too-many-arguments,too-many-locals
    denoiser: DenoiserFn,
    nlc: NoiseLevelCorrection,
    schedule: NoiseSchedule,
    order: str,
    rng: Rng,
    n: int,
    seed: int = 0,
    x_init: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, Trajectory]:
    """
    Deterministic EDM sampler, Euler or Heun, with noise level correction. The direction is never
    normalized.
    :param denoiser: eps_theta.
    :param nlc: Correction source.
    :param schedule: Noise levels to visit.
    :param order: `ALGO_EDM_EULER` or `ALGO_EDM_HEUN`.
    :param rng: Draws x_T.
    :param n: Data dimension.
    :param seed: Recorded on the trajectory.
    :param x_init: Start point, x_T = sigma_T eps when not given.
    :return: (sample, trajectory).
    """
    if order not in (ALGO_EDM_EULER, ALGO_EDM_HEUN):
        raise InvalidRange(f"unknown EDM order {order!r}")
    check_schedule(schedule)
    x = ve_init(schedule, n, rng) if x_init is None else np.array(x_init, dtype=np.float64)
    recorder = TrajectoryRecorder(seed)

    for index in range(schedule.steps):
        sigma = float(schedule.sigmas[index])
        sigma_next = float(schedule.sigmas[index + 1])

        r = residual_value(nlc, x, sigma)
        sigma_hat = sigma * (1.0 + r)
        sigma_hat_next = sigma_hat * sigma_next / sigma
        eps_hat, norm = direction_and_norm(denoiser, x, sigma_hat, False)
        recorder.step(x, sigma, sigma_hat, r, norm, one_step_estimate(x, sigma_hat, eps_hat))

        euler = x + (sigma_hat_next - sigma_hat) * eps_hat
        if order == ALGO_EDM_HEUN and sigma_next > 0:
            eps_next = denoiser(euler, sigma_hat_next)
            x = x + (sigma_hat_next - sigma_hat) * (0.5 * eps_hat + 0.5 * eps_next)
        else:
            x = euler

    return x, recorder.finish(x)


def sample_dpm(  # pylint: disable=too-many-arguments,too-many-locals
    denoiser: DenoiserFn,
    nlc: NoiseLevelCorrection,
    dpm: DpmSchedule,
    rng: Rng,
    n: int,
    seed: int = 0,
    x_init: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, Trajectory]:
    """
    Second order DPM-Solver (midpoint in lambda) with noise level correction.

    In x-space the alpha ratios of the variance preserving form cancel, leaving
        u       = x_t - sigma_hat_s (e^(h/2) - 1) eps_theta(x_t, sigma_hat_t)
        x_{t-1} = x_t - sigma_hat_{t-1} (e^h - 1) eps_theta(u, sigma_hat_s)
    with h = lambda_{t-1} - lambda_t and s halfway between the current and next lambda. The step
    onto the sigma = 0 sentinel returns the one-step estimate.
    :param denoiser: eps_theta.
    :param nlc: Correction source.
    :param dpm: Schedule with its lambda grid.
    :param rng: Draws x_T.
    :param n: Data dimension.
    :param seed: Recorded on the trajectory.
    :param x_init: Start point, x_T = sigma_T eps when not given.
    :return: (sample, trajectory).
    """
    schedule = dpm.base
    check_schedule(schedule)
    x = ve_init(schedule, n, rng) if x_init is None else np.array(x_init, dtype=np.float64)
    recorder = TrajectoryRecorder(seed)

    for index in range(schedule.steps):
        sigma = float(schedule.sigmas[index])
        sigma_next = float(schedule.sigmas[index + 1])

        r = residual_value(nlc, x, sigma)
        sigma_hat = sigma * (1.0 + r)
        eps_hat, norm = direction_and_norm(denoiser, x, sigma_hat, False)
        estimate = one_step_estimate(x, sigma_hat, eps_hat)
        recorder.step(x, sigma, sigma_hat, r, norm, estimate)

        if sigma_next == 0.0:
            x = estimate
            continue

        lam = float(dpm.lambdas[index])
        lam_next = float(dpm.lambdas[index + 1])
        h = lam_next - lam
        sigma_mid = sigma_at(dpm, t_lambda(dpm, 0.5 * (lam + lam_next)))
        sigma_hat_mid = sigma_hat * sigma_mid / sigma
        sigma_hat_next = sigma_hat * sigma_next / sigma

        u = x - sigma_hat_mid * np.expm1(0.5 * h) * eps_hat
        eps_mid = denoiser(u, sigma_hat_mid)
        x = x - sigma_hat_next * np.expm1(h) * eps_mid

    return x, recorder.finish(x)


def run_sampler(  # pylint: disable=too-many-arguments
    denoiser: DenoiserFn,
    nlc: NoiseLevelCorrection,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    rng: Rng,
    n: int,
) -> Tuple[np.ndarray, Trajectory]:
    """
    Dispatch on `config.algorithm`.
    :return: (sample, trajectory).
    """
    if nlc.mode != config.nlc_mode:
        raise InvalidRange(f"config asks for nlc {config.nlc_mode!r}, got {nlc.mode!r}")
    if config.algorithm in (ALGO_DDIM, ALGO_DDPM):
        return sample_ddim_ddpm(denoiser, nlc, schedule, config, rng, n)
    if config.algorithm in (ALGO_EDM_EULER, ALGO_EDM_HEUN):
        return sample_edm(denoiser, nlc, schedule, config.algorithm, rng, n, seed=config.seed)
    return sample_dpm(denoiser, nlc, build_dpm_schedule(schedule), rng, n, seed=config.seed)


def annotate_distances(trajectory: Trajectory, spec: ManifoldSpec) -> Trajectory:
    """
    :param trajectory: Trajectory to annotate.
    :param spec: Manifold with the exact oracle.
    :return: Copy with dist_K(x_t) filled in for every row.
    """
    return trajectory._replace(distances=exact_distances(spec, trajectory.xs))


def bias_values(trajectory: Trajectory) -> np.ndarray:
    """
    (dist_K(x_t) - sqrt(n) sigma_hat_t) / (sqrt(n) sigma_t) per row, NaN where sigma_t = 0.
    :param trajectory: Trajectory with distances.
    :return: One value per row.
    """
    root_n = np.sqrt(trajectory.xs.shape[1])
    sigmas = trajectory.sigmas
    positive = sigmas > 0
    bias = np.full(sigmas.shape[0], np.nan)
    bias[positive] = (trajectory.distances[positive] - root_n * trajectory.sigma_hats[positive]) / (
        root_n * sigmas[positive]
    )
    return bias


def beta_series(trajectory: Trajectory) -> np.ndarray:
    """
    Effective gradient descent step size beta_t = 1 - sigma_{t-1} / sigma_t.
    :param trajectory: Trajectory.
    :return: One value per step (rows with sigma_t > 0).
    """
    sigmas = trajectory.sigmas
    result: np.ndarray = 1.0 - sigmas[1:] / sigmas[:-1]
    return result


def csv_cell(value: float) -> artifacts.CsvCell:
    return "" if not np.isfinite(value) else float(value)


def trajectory_rows(trajectory: Trajectory) -> List[Tuple[artifacts.CsvCell, ...]]:
    """
    :param trajectory: Trajectory, ideally with distances.
    :return: CSV rows in `TRAJECTORY_CSV_HEADER` order, missing values empty.
    """
    bias = bias_values(trajectory)
    betas = np.append(beta_series(trajectory), np.nan)
    return [
        (
            trajectory.seed,
            step,
            float(trajectory.sigmas[step]),
            float(trajectory.sigma_hats[step]),
            csv_cell(trajectory.residuals[step]),
            csv_cell(trajectory.dir_norms[step]),
            csv_cell(trajectory.distances[step]),
            csv_cell(bias[step]),
            csv_cell(betas[step]),
        )
        for step in range(trajectory.sigmas.shape[0])
    ]


def write_trajectory_csv(trajectories: Sequence[Trajectory], path: Union[str, Path]) -> None:
    """
    All trajectories of a batch in one table, ordered by the input order.
    :param trajectories: Trajectories to write.
    :param path: Destination.
    :return: None
    """
    rows: List[Tuple[artifacts.CsvCell, ...]] = []
    for trajectory in trajectories:
        rows.extend(trajectory_rows(trajectory))
    artifacts.write_csv(path, TRAJECTORY_CSV_HEADER, rows)
