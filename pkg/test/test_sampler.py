"""
Unconstrained samplers: reduction to their textbook recursions, the corrected noise level and
trajectory export.
"""

import math
from pathlib import Path
from typing import List, Tuple

import numpy as np
import pytest

from nlc_lab import sampler
from nlc_lab.errors import InvalidRange, ScheduleExhausted, ZeroDirection
from nlc_lab.manifold import ManifoldSpec
from nlc_lab.numeric_core import STREAM_SAMPLING, Rng, fork, gaussian_vec
from nlc_lab.schedule import (
    NoiseSchedule,
    build_dpm_schedule,
    build_edm_schedule,
    default_toy_schedule,
    record_and_build_lut,
    schedule_from_sigmas,
)

N = 6


def gaussian_denoiser(x: np.ndarray, sigma: float) -> np.ndarray:
    """
    Exact noise prediction for N(0, I) data.
    :param x: Noisy point.
    :param sigma: Noise level.
    :return: sigma x / (1 + sigma^2).
    """
    result: np.ndarray = sigma * x / (1.0 + sigma**2)
    return result


def constant_denoiser(x: np.ndarray, sigma: float) -> np.ndarray:  # pylint: disable=unused-argument
    """
    :param x: Noisy point.
    :param sigma: Unused.
    :return: The same direction everywhere.
    """
    return np.linspace(-1.0, 1.0, x.shape[0])


def zero_residual(x: np.ndarray, sigma: float) -> float:  # pylint: disable=unused-argument
    """
    :param x: Unused.
    :param sigma: Unused.
    :return: 0.
    """
    return 0.0


def tenth_residual(x: np.ndarray, sigma: float) -> float:  # pylint: disable=unused-argument
    """
    :param x: Unused.
    :param sigma: Unused.
    :return: 0.1.
    """
    return 0.1


def _rng(seed: int, index: int = 0) -> Rng:
    return fork(seed, STREAM_SAMPLING, index)


def _start(seed: int = 0) -> np.ndarray:
    return 3.0 * gaussian_vec(_rng(seed, 99), N)


def test_corrected_sigma() -> None:
    """
    :return: None
    """
    x = np.ones(N)
    assert sampler.corrected_sigma(sampler.nlc_off(), x, 2.0) == 2.0
    assert sampler.corrected_sigma(sampler.nlc_network(zero_residual), x, 2.0) == 2.0
    assert sampler.corrected_sigma(sampler.nlc_network(tenth_residual), x, 2.0) == pytest.approx(
        2.2
    )
    with pytest.raises(InvalidRange):
        sampler.corrected_sigma(sampler.nlc_off(), x, 0.0)


def test_lut_correction() -> None:
    """
    The lookup table is queried with the scheduled sigma.
    :return: None
    """
    table = record_and_build_lut([(0.5, -0.25), (0.5, -0.25), (5.0, 0.5)], 2)
    nlc = sampler.nlc_lut(table)
    assert sampler.corrected_sigma(nlc, np.ones(N), 1e-3) == pytest.approx(1e-3 * 0.75)
    assert sampler.corrected_sigma(nlc, np.ones(N), 100.0) == pytest.approx(150.0)


def test_direction() -> None:
    """
    :return: None
    """
    x = np.ones(N)
    raw = sampler.direction(constant_denoiser, x, 1.0, False)
    normalized = sampler.direction(constant_denoiser, x, 1.0, True)
    assert np.linalg.norm(normalized) == pytest.approx(math.sqrt(N), rel=1e-12)
    np.testing.assert_allclose(normalized / np.linalg.norm(normalized), raw / np.linalg.norm(raw))
    already = np.full(N, 1.0)
    np.testing.assert_allclose(
        sampler.direction(lambda _x, _s: already, x, 1.0, True), already, rtol=1e-15
    )
    with pytest.raises(ZeroDirection):
        sampler.direction(lambda _x, _s: np.zeros(N), x, 1.0, True)


def test_one_step_estimate_oracle() -> None:
    """
    With the oracle direction and sigma_hat = sigma ||eps|| / sqrt(n) the estimate is exact.
    :return: None
    """
    x0 = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    eps = gaussian_vec(_rng(1), N)
    sigma = 0.7
    x = x0 + sigma * eps
    oracle = math.sqrt(N) * eps / np.linalg.norm(eps)
    sigma_hat = sigma * np.linalg.norm(eps) / math.sqrt(N)
    np.testing.assert_allclose(sampler.one_step_estimate(x, sigma_hat, oracle), x0, atol=1e-14)
    np.testing.assert_array_equal(sampler.one_step_estimate(x, 0.0, oracle), x)


@pytest.mark.parametrize(
    "sigma_hat,sigma_hat_next,eta,expected",
    [
        (2.0, 1.0, 1.0, (0.5, math.sqrt(3.0) / 2.0)),
        (2.0, 1.0, 0.0, (1.0, 0.0)),
        (3.0, 0.0, 1.0, (0.0, 0.0)),
    ],
)
def test_ddpm_noise_split(
    sigma_hat: float, sigma_hat_next: float, eta: float, expected: Tuple[float, float]
) -> None:
    """
    :param sigma_hat: Current level.
    :param sigma_hat_next: Next level.
    :param eta: Randomness.
    :param expected: (sigma_signal, sigma_noise).
    :return: None
    """
    signal, noise = sampler.ddpm_noise_split(sigma_hat, sigma_hat_next, eta)
    assert (signal, noise) == pytest.approx(expected, abs=1e-15)
    assert signal**2 + noise**2 == pytest.approx(sigma_hat_next**2, abs=1e-14)


def test_ddim_reduces_to_baseline() -> None:
    """
    No correction, no normalization, eta = 0: x_{t-1} = x_t + (sigma_{t-1} - sigma_t) eps.
    :return: None
    """
    schedule = default_toy_schedule(20)
    config = sampler.make_sampler_config(sampler.ALGO_DDIM, normalize_direction=False)
    start = _start()
    sample, trajectory = sampler.sample_ddim_ddpm(
        gaussian_denoiser, sampler.nlc_off(), schedule, config, _rng(0), N, start
    )
    x = start.copy()
    for index in range(schedule.steps):
        np.testing.assert_allclose(trajectory.xs[index], x, rtol=1e-12, atol=1e-12)
        sigma, sigma_next = schedule.sigmas[index], schedule.sigmas[index + 1]
        x = x + (sigma_next - sigma) * gaussian_denoiser(x, sigma)
    np.testing.assert_allclose(sample, x, atol=1e-12)
    np.testing.assert_array_equal(trajectory.sigma_hats[:-1], schedule.sigmas[:-1])
    assert trajectory.sigmas[-1] == 0.0
    assert trajectory.xs.shape == (21, N)


def test_ddpm_reduces_to_baseline() -> None:
    """
    eta = 1 without correction follows the DDPM posterior step, with the noise drawn from the
    same stream after x_T.
    :return: None
    """
    schedule = default_toy_schedule(10)
    config = sampler.make_sampler_config(sampler.ALGO_DDPM, normalize_direction=False, seed=4)
    sample, _ = sampler.sample_ddim_ddpm(
        gaussian_denoiser, sampler.nlc_off(), schedule, config, _rng(4), N
    )
    rng = _rng(4)
    x = math.sqrt(schedule.sigmas[0] ** 2 + 1.0) * gaussian_vec(rng, N)
    for index in range(schedule.steps):
        sigma, sigma_next = schedule.sigmas[index], schedule.sigmas[index + 1]
        noise = sigma_next / sigma * math.sqrt(sigma**2 - sigma_next**2)
        x = x + (sigma_next**2 / sigma - sigma) * gaussian_denoiser(x, sigma)
        x = x + noise * gaussian_vec(rng, N)
    np.testing.assert_allclose(sample, x, rtol=1e-12, atol=1e-12)


def test_ddim_ratio_preservation() -> None:
    """
    sigma_hat_{t-1} / sigma_hat_t = sigma_{t-1} / sigma_t: with a constant corrector the whole
    path is scaled.
    :return: None
    """
    schedule = default_toy_schedule(10)
    config = sampler.make_sampler_config(sampler.ALGO_DDIM, sampler.NLC_NETWORK, eta=0.0)
    _, trajectory = sampler.sample_ddim_ddpm(
        gaussian_denoiser,
        sampler.nlc_network(tenth_residual),
        schedule,
        config,
        _rng(0),
        N,
    )
    np.testing.assert_allclose(trajectory.sigma_hats[:-1], 1.1 * schedule.sigmas[:-1])
    np.testing.assert_allclose(trajectory.residuals[:-1], 0.1)
    assert np.isnan(trajectory.residuals[-1])


def test_zero_corrector_matches_off() -> None:
    """
    :return: None
    """
    schedule = default_toy_schedule(10)
    off = sampler.make_sampler_config(sampler.ALGO_DDIM, normalize_direction=False)
    zero = sampler.make_sampler_config(
        sampler.ALGO_DDIM, sampler.NLC_NETWORK, normalize_direction=False
    )
    first, _ = sampler.sample_ddim_ddpm(
        gaussian_denoiser, sampler.nlc_off(), schedule, off, _rng(0), N
    )
    second, trajectory = sampler.sample_ddim_ddpm(
        gaussian_denoiser,
        sampler.nlc_network(zero_residual),
        schedule,
        zero,
        _rng(0),
        N,
    )
    np.testing.assert_array_equal(first, second)
    np.testing.assert_array_equal(trajectory.sigma_hats, trajectory.sigmas)


def test_edm_euler_reduces_to_baseline() -> None:
    """
    :return: None
    """
    schedule = build_edm_schedule(12, 0.002, 80.0, 7.0)
    sample, _ = sampler.sample_edm(
        gaussian_denoiser, sampler.nlc_off(), schedule, sampler.ALGO_EDM_EULER, _rng(1), N
    )
    x = schedule.sigmas[0] * gaussian_vec(_rng(1), N)
    for index in range(schedule.steps):
        sigma, sigma_next = schedule.sigmas[index], schedule.sigmas[index + 1]
        x = x + (sigma_next - sigma) * gaussian_denoiser(x, sigma)
    np.testing.assert_allclose(sample, x, rtol=1e-12, atol=1e-12)


def test_edm_heun_equals_euler_for_constant_field() -> None:
    """
    :return: None
    """
    schedule = build_edm_schedule(8, 0.01, 10.0, 7.0)
    start = _start()
    runs = [
        sampler.sample_edm(
            constant_denoiser, sampler.nlc_off(), schedule, order, _rng(0), N, x_init=start
        )[0]
        for order in (sampler.ALGO_EDM_EULER, sampler.ALGO_EDM_HEUN)
    ]
    np.testing.assert_allclose(runs[0], runs[1], atol=1e-12)


def test_edm_heun_improves_on_euler() -> None:
    """
    For Gaussian data the probability flow ODE is solved by x(sigma) proportional to
    sqrt(1 + sigma^2), Heun lands closer to it than Euler.
    :return: None
    """
    schedule = build_edm_schedule(10, 0.5, 10.0, 7.0)
    start = _start()
    exact = start * math.sqrt(1.0 + schedule.sigmas[-2] ** 2) / math.sqrt(1.0 + 100.0)
    errors: List[float] = []
    for order in (sampler.ALGO_EDM_EULER, sampler.ALGO_EDM_HEUN):
        _, trajectory = sampler.sample_edm(
            gaussian_denoiser, sampler.nlc_off(), schedule, order, _rng(0), N, x_init=start
        )
        errors.append(float(np.linalg.norm(trajectory.xs[-2] - exact)))
    assert errors[1] < errors[0]


def _reference_dpm(schedule: NoiseSchedule, start: np.ndarray) -> np.ndarray:
    """
    DPM-Solver-2 written in the variance preserving variables.
    :param schedule: Noise levels.
    :param start: x_T in x-space.
    :return: Final sample in x-space.
    """

    def alpha(sigma: float) -> float:
        return 1.0 / math.sqrt(1.0 + sigma**2)

    def eps_vp(z: np.ndarray, sigma: float) -> np.ndarray:
        return gaussian_denoiser(z / alpha(sigma), sigma)

    sigmas = schedule.sigmas
    z = alpha(sigmas[0]) * start
    for index in range(schedule.steps):
        sigma, sigma_next = float(sigmas[index]), float(sigmas[index + 1])
        if sigma_next == 0.0:
            return (z - sigma * alpha(sigma) * eps_vp(z, sigma)) / alpha(sigma)
        h = math.log(sigma / sigma_next)
        sigma_mid = math.sqrt(sigma * sigma_next)
        u = (alpha(sigma_mid) / alpha(sigma)) * z - sigma_mid * alpha(sigma_mid) * math.expm1(
            h / 2
        ) * eps_vp(z, sigma)
        z = (alpha(sigma_next) / alpha(sigma)) * z - sigma_next * alpha(sigma_next) * math.expm1(
            h
        ) * eps_vp(u, sigma_mid)
    return z / alpha(float(sigmas[-1]))


def test_dpm_reduces_to_baseline() -> None:
    """
    :return: None
    """
    schedule = default_toy_schedule(10)
    start = _start()
    sample, trajectory = sampler.sample_dpm(
        gaussian_denoiser,
        sampler.nlc_off(),
        build_dpm_schedule(schedule),
        _rng(0),
        N,
        x_init=start,
    )
    expected = _reference_dpm(schedule, start)
    np.testing.assert_allclose(sample, expected, rtol=1e-10, atol=1e-10)
    np.testing.assert_array_equal(trajectory.sigma_hats, trajectory.sigmas)


def test_dpm_tiny_step() -> None:
    """
    A step of size h moves x by O(h).
    :return: None
    """
    start = _start()
    moves = []
    for gap in (1e-3, 1e-4):
        schedule = schedule_from_sigmas([1.0, 1.0 - gap, 0.5])
        _, trajectory = sampler.sample_dpm(
            gaussian_denoiser,
            sampler.nlc_off(),
            build_dpm_schedule(schedule),
            _rng(0),
            N,
            x_init=start,
        )
        moves.append(np.linalg.norm(trajectory.xs[1] - trajectory.xs[0]))
    assert moves[1] == pytest.approx(moves[0] / 10.0, rel=1e-2)


def test_run_sampler_dispatch_and_determinism() -> None:
    """
    Every algorithm runs through `run_sampler`, a fixed seed gives identical output.
    :return: None
    """
    schedule = default_toy_schedule(5)
    for algorithm in sampler.ALGORITHMS:
        config = sampler.make_sampler_config(algorithm, seed=3)
        first, _ = sampler.run_sampler(
            gaussian_denoiser, sampler.nlc_off(), schedule, config, _rng(3), N
        )
        second, _ = sampler.run_sampler(
            gaussian_denoiser, sampler.nlc_off(), schedule, config, _rng(3), N
        )
        np.testing.assert_array_equal(first, second)
    with pytest.raises(InvalidRange):
        sampler.run_sampler(
            gaussian_denoiser,
            sampler.nlc_off(),
            schedule,
            sampler.make_sampler_config(sampler.ALGO_DDIM, sampler.NLC_NETWORK),
            _rng(0),
            N,
        )


def test_sampler_config_defaults() -> None:
    """
    :return: None
    """
    assert sampler.make_sampler_config(sampler.ALGO_DDPM).eta == 1.0
    assert sampler.make_sampler_config(sampler.ALGO_DDIM).eta == 0.0
    assert sampler.make_sampler_config(sampler.ALGO_DDIM, sampler.NLC_LUT).normalize_direction
    assert not sampler.make_sampler_config(sampler.ALGO_DDIM).normalize_direction
    assert not sampler.make_sampler_config(
        sampler.ALGO_EDM_HEUN, sampler.NLC_NETWORK
    ).normalize_direction
    with pytest.raises(InvalidRange):
        sampler.make_sampler_config(sampler.ALGO_DPM2, normalize_direction=True)
    with pytest.raises(InvalidRange):
        sampler.make_sampler_config(sampler.ALGO_DDIM, eta=1.5)
    with pytest.raises(InvalidRange):
        sampler.make_sampler_config("euler-maruyama")


def test_empty_schedule_rejected() -> None:
    """
    :return: None
    """
    bare = NoiseSchedule(sigmas=np.array([0.0]), alphas=np.array([1.0]), family="custom")
    with pytest.raises((ScheduleExhausted, InvalidRange)):
        sampler.check_schedule(bare)


def test_bias_values(circle_spec: ManifoldSpec) -> None:
    """
    On-manifold points with sigma_hat = sigma have bias -1, a perfect estimate has bias 0.
    :param circle_spec: Fixture.
    :return: None
    """
    on_circle = np.array([1.0, 0.0, 0.0])
    off_circle = np.array([3.0, 0.0, 0.0])
    recorder = sampler.TrajectoryRecorder(seed=0)
    recorder.step(on_circle, 0.5, 0.5, 0.0, 1.0, on_circle)
    recorder.step(off_circle, 0.5, 2.0 / math.sqrt(3.0), 0.0, 1.0, on_circle)
    trajectory = sampler.annotate_distances(recorder.finish(on_circle), circle_spec)
    bias = sampler.bias_values(trajectory)
    assert bias[0] == pytest.approx(-1.0)
    assert bias[1] == pytest.approx(0.0, abs=1e-12)
    assert np.isnan(bias[2])


def test_beta_series() -> None:
    """
    :return: None
    """
    recorder = sampler.TrajectoryRecorder(seed=0)
    for sigma in (4.0, 2.0, 1.0):
        recorder.step(np.zeros(2), sigma, sigma, 0.0, 0.0, np.zeros(2))
    np.testing.assert_allclose(
        sampler.beta_series(recorder.finish(np.zeros(2))), [0.5, 0.5, 1.0]
    )


def test_trajectory_csv(tmp_path: Path, circle_spec: ManifoldSpec) -> None:
    """
    One row per visited level, the sentinel row has empty r / bias / beta cells.
    :param tmp_path: Fixture.
    :param circle_spec: Fixture.
    :return: None
    """
    config = sampler.make_sampler_config(sampler.ALGO_DDIM)
    trajectories = []
    for seed in range(2):
        _, trajectory = sampler.run_sampler(
            gaussian_denoiser,
            sampler.nlc_off(),
            default_toy_schedule(4),
            config._replace(seed=seed),
            _rng(seed),
            3,
        )
        trajectories.append(sampler.annotate_distances(trajectory, circle_spec))
    path = tmp_path / "trajectories.csv"
    sampler.write_trajectory_csv(trajectories, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(sampler.TRAJECTORY_CSV_HEADER)
    assert len(lines) == 1 + 2 * 5
    sentinel = lines[5].split(",")
    assert sentinel[:3] == ["0", "4", "0.0"]
    assert sentinel[4] == "" and sentinel[7] == "" and sentinel[8] == ""
    assert lines[6].startswith("1,0,")

    again = tmp_path / "again.csv"
    sampler.write_trajectory_csv(trajectories, again)
    assert again.read_bytes() == path.read_bytes()
