"""
The two training objectives and the loop that minimizes them.

Denoiser: mean over the batch of ||eps_theta(x0 + sigma_t eps, sigma_t) - eps||^2.
Corrector: with lambda ~ U(1 - delta, 1 + delta) and x_hat = x0 + sigma_t lambda eps,
    mean over the batch of
    (sqrt(n) sigma_t (1 + r_theta(x_hat, sigma_t)) - sigma_t lambda ||eps||)^2.
The corrector is conditioned on the scheduled sigma_t and trained against the analytic noise, it
never calls the denoiser.
"""

import logging
import time
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from nlc_lab import artifacts
from nlc_lab.errors import DimMismatch, InvalidRange, NonFiniteGradient
from nlc_lab.log import progress_disabled
from nlc_lab.manifold import Dataset
from nlc_lab.neural import (
    DEFAULT_LEARNING_RATE,
    ROLE_CORRECTOR,
    ROLE_DENOISER,
    CheckpointMeta,
    Gradients,
    MlpNet,
    adam_step,
    backward,
    forward,
    init_adam,
    init_mlp,
    mlp_dims,
    network_input,
    save_checkpoint,
)
from nlc_lab.numeric_core import (
    STREAM_BATCHES,
    STREAM_INIT,
    STREAM_NOISE,
    Rng,
    fork,
    gaussian_mat,
    integers,
    uniform,
)
from nlc_lab.schedule import NoiseSchedule

LOGGER = logging.getLogger(__name__)

LOSS_LOG_MSG = "%s iteration %d/%d, mean loss over the last %d: %.6g"

# Per the toy setup: hidden width 128, 5 layer denoiser, 2 layer corrector.
DEFAULT_HIDDEN = 128
DEFAULT_DENOISER_LAYERS = 5
DEFAULT_CORRECTOR_LAYERS = 2
DEFAULT_BATCH_SIZE = 128
DEFAULT_DENOISER_ITERATIONS = 50_000
DEFAULT_CORRECTOR_ITERATIONS = 20_000
DEFAULT_DELTA = 0.5
DEFAULT_REPORT_INTERVAL = 100


class TrainConfig(NamedTuple):
    """
    Everything a training run needs besides the data and the schedule.
    """

    batch_size: int
    iterations: int
    lr: float
    # Half width of the lambda range, only used by the corrector.
    delta: float
    seed: int
    report_interval: int
    hidden: int
    layers: int


class TrainReport(NamedTuple):
    """
    Outcome of a training run. `losses[i]` is the mean loss of iterations
    i * report_interval + 1 .. (i + 1) * report_interval.
    """

    role: str
    losses: List[float]
    report_interval: int
    final_loss: float
    wall_time: float
    seed: int
    iterations: int
    checkpoint_path: str


def make_train_config(  # pylint: disable=too-many-arguments
    role: str,
    batch_size: int = DEFAULT_BATCH_SIZE,
    iterations: Optional[int] = None,
    lr: float = DEFAULT_LEARNING_RATE,
    delta: float = DEFAULT_DELTA,
    seed: int = 0,
    report_interval: int = DEFAULT_REPORT_INTERVAL,
    hidden: int = DEFAULT_HIDDEN,
    layers: Optional[int] = None,
) -> TrainConfig:
    """
    Build a validated config, with the role's default budget and depth when not given.
    :param role: Denoiser or corrector.
    :param batch_size: Points per iteration.
    :param iterations: Adam steps.
    :param lr: Learning rate.
    :param delta: Lambda range half width, in [0, 1).
    :param seed: Run seed.
    :param report_interval: Iterations per loss series entry, at most `iterations`.
    :param hidden: Hidden width.
    :param layers: Dense layer count.
    :return: The config.
    """
    if role not in (ROLE_DENOISER, ROLE_CORRECTOR):
        raise InvalidRange(f"cannot train a {role!r} network")
    denoiser = role == ROLE_DENOISER
    if iterations is None:
        iterations = DEFAULT_DENOISER_ITERATIONS if denoiser else DEFAULT_CORRECTOR_ITERATIONS
    if layers is None:
        layers = DEFAULT_DENOISER_LAYERS if denoiser else DEFAULT_CORRECTOR_LAYERS

    if batch_size < 1 or iterations < 1 or hidden < 1 or layers < 1:
        raise InvalidRange("batch size, iterations, hidden width and layers must be positive")
    if not 0.0 <= delta < 1.0:
        raise InvalidRange(f"delta must be in [0, 1), got {delta}")
    if lr <= 0:
        raise InvalidRange(f"lr must be positive, got {lr}")
    if not 1 <= report_interval <= iterations:
        raise InvalidRange(f"report interval must be in [1, {iterations}], got {report_interval}")

    return TrainConfig(
        batch_size=batch_size,
        iterations=iterations,
        lr=lr,
        delta=delta,
        seed=seed,
        report_interval=report_interval,
        hidden=hidden,
        layers=layers,
    )


def draw_lambdas(rng: Rng, delta: float, count: int) -> np.ndarray:
    """
    The only place lambda is drawn.
    :param rng: Stream to advance.
    :param delta: Half width, delta = 0 gives lambda = 1.
    :param count: Number of draws.
    :return: `count` draws from U(1 - delta, 1 + delta).
    """
    if not 0.0 <= delta < 1.0:
        raise InvalidRange(f"delta must be in [0, 1), got {delta}")
    return uniform(rng, 1.0 - delta, 1.0 + delta, count)


def denoiser_objective(pred: np.ndarray, eps: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    :param pred: (batch, n) predicted noise.
    :param eps: (batch, n) true noise.
    :return: (mean squared error summed over coordinates, d loss / d pred).
    """
    if pred.shape != eps.shape:
        raise DimMismatch(f"prediction {pred.shape} vs noise {eps.shape}")
    difference = pred - eps
    batch = pred.shape[0]
    loss = float(np.sum(difference**2) / batch)
    return loss, 2.0 * difference / batch


def nlc_objective(
    r: np.ndarray, sigma: np.ndarray, lam: np.ndarray, eps_norm: np.ndarray, n: int
) -> Tuple[float, np.ndarray]:
    """
    :param r: (batch,) corrector outputs.
    :param sigma: (batch,) scheduled noise levels.
    :param lam: (batch,) noise scale perturbations.
    :param eps_norm: (batch,) ||eps||.
    :param n: Data dimension.
    :return: (loss, d loss / d r).
    """
    root_n = np.sqrt(n)
    residual = root_n * sigma * (1.0 + r) - sigma * lam * eps_norm
    batch = r.shape[0]
    loss = float(np.sum(residual**2) / batch)
    return loss, 2.0 * residual * root_n * sigma / batch


def _require_role(net: MlpNet, role: str) -> None:
    if net.role != role:
        raise DimMismatch(f"expected a {role} network, got a {net.role}")


def _draw_sigmas(rng: Rng, schedule: NoiseSchedule, count: int) -> np.ndarray:
    """
    t uniform over the positive entries of the schedule.
    """
    result: np.ndarray = schedule.sigmas[integers(rng, schedule.steps, count)]
    return result


def denoiser_loss_and_grads(
    net: MlpNet, batch: np.ndarray, schedule: NoiseSchedule, rng: Rng
) -> Tuple[float, Gradients]:
    """
    One stochastic evaluation of the denoiser objective.
    :param net: Denoiser.
    :param batch: (batch, n) clean points.
    :param schedule: Where sigma_t is drawn from.
    :param rng: Draws t and eps.
    :return: (loss, exact gradients for this draw).
    """
    _require_role(net, ROLE_DENOISER)
    if batch.ndim != 2 or batch.shape[0] < 1 or batch.shape[1] + 1 != net.layer_dims[0]:
        raise DimMismatch(f"batch of shape {batch.shape} does not fit the denoiser")

    count, n = batch.shape
    sigmas = _draw_sigmas(rng, schedule, count)
    eps = gaussian_mat(rng, count, n)
    inputs = network_input(batch + sigmas[:, np.newaxis] * eps, sigmas)

    loss, upstream = denoiser_objective(forward(net, inputs), eps)
    return loss, backward(net, inputs, upstream)


def nlc_loss_and_grads(
    corrector: MlpNet, batch: np.ndarray, schedule: NoiseSchedule, delta: float, rng: Rng
) -> Tuple[float, Gradients]:
    """
    One stochastic evaluation of the corrector objective.
    :param corrector: Corrector.
    :param batch: (batch, n) clean points.
    :param schedule: Where sigma_t is drawn from.
    :param delta: Lambda half width.
    :param rng: Draws t, eps and lambda.
    :return: (loss, exact gradients for this draw).
    """
    _require_role(corrector, ROLE_CORRECTOR)
    if batch.ndim != 2 or batch.shape[0] < 1 or batch.shape[1] + 1 != corrector.layer_dims[0]:
        raise DimMismatch(f"batch of shape {batch.shape} does not fit the corrector")

    count, n = batch.shape
    sigmas = _draw_sigmas(rng, schedule, count)
    eps = gaussian_mat(rng, count, n)
    lambdas = draw_lambdas(rng, delta, count)
    noisy = batch + (sigmas * lambdas)[:, np.newaxis] * eps
    inputs = network_input(noisy, sigmas)

    r = forward(corrector, inputs)[:, 0]
    loss, upstream = nlc_objective(r, sigmas, lambdas, np.linalg.norm(eps, axis=1), n)
    return loss, backward(corrector, inputs, upstream[:, np.newaxis])


def train(
    role: str,
    config: TrainConfig,
    dataset: Dataset,
    schedule: NoiseSchedule,
    checkpoint_path: Optional[Union[str, Path]] = None,
) -> Tuple[MlpNet, TrainReport]:
    """
    Minimize the role's objective with Adam, batches drawn with replacement from the dataset.
    :param role: Denoiser or corrector.
    :param config: Run settings.
    :param dataset: Training points.
    :param schedule: Training noise levels.
    :param checkpoint_path: If given, the trained net and optimizer state are written here.
    :return: (trained net, report).
    """
    n = dataset.spec.n
    dims = mlp_dims(role, n, config.hidden, config.layers)
    net = init_mlp(role, dims, fork(config.seed, STREAM_INIT))
    state = init_adam(net, lr=config.lr)

    batch_rng = fork(config.seed, STREAM_BATCHES)
    noise_rng = fork(config.seed, STREAM_NOISE)

    LOGGER.info(
        "Training %s %s on %d points for %d iterations",
        role,
        "x".join(str(dim) for dim in dims),
        dataset.points.shape[0],
        config.iterations,
    )

    started = time.perf_counter()
    losses: List[float] = []
    interval_total = 0.0
    for iteration in tqdm(
        range(1, config.iterations + 1), desc=f"train {role}", disable=progress_disabled()
    ):
        batch = dataset.points[integers(batch_rng, dataset.points.shape[0], config.batch_size)]
        if role == ROLE_DENOISER:
            loss, grads = denoiser_loss_and_grads(net, batch, schedule, noise_rng)
        else:
            loss, grads = nlc_loss_and_grads(net, batch, schedule, config.delta, noise_rng)
        if not np.isfinite(loss):
            raise NonFiniteGradient(f"{role} loss went non-finite at iteration {iteration}")

        net, state = adam_step(state, net, grads)
        interval_total += loss

        if iteration % config.report_interval == 0:
            losses.append(interval_total / config.report_interval)
            interval_total = 0.0
            LOGGER.debug(
                LOSS_LOG_MSG, role, iteration, config.iterations, config.report_interval, losses[-1]
            )

    wall_time = time.perf_counter() - started
    final_loss = losses[-1]
    LOGGER.info("Finished training %s, final loss %.6g in %.1fs", role, final_loss, wall_time)

    if checkpoint_path is not None:
        save_checkpoint(
            net,
            state,
            checkpoint_path,
            CheckpointMeta(seed=config.seed, iterations=config.iterations, loss=final_loss),
        )

    return net, TrainReport(
        role=role,
        losses=losses,
        report_interval=config.report_interval,
        final_loss=final_loss,
        wall_time=wall_time,
        seed=config.seed,
        iterations=config.iterations,
        checkpoint_path="" if checkpoint_path is None else str(checkpoint_path),
    )


def report_document(report: TrainReport) -> artifacts.JsonValue:
    """
    JSON form of a report. Wall time is left out so reruns produce identical files.
    :param report: Report to render.
    :return: JSON document.
    """
    return {
        "role": report.role,
        "seed": report.seed,
        "iterations": report.iterations,
        "report_interval": report.report_interval,
        "final_loss": artifacts.finite_or_none(report.final_loss),
        "losses": [artifacts.finite_or_none(loss) for loss in report.losses],
        "checkpoint_path": report.checkpoint_path,
    }


def write_train_report(report: TrainReport, json_path: Union[str, Path]) -> None:
    """
    :param report: Report to write.
    :param json_path: JSON destination, the loss curve goes next to it with a .csv suffix.
    :return: None
    """
    artifacts.write_json(json_path, report_document(report))
    artifacts.write_csv(
        Path(json_path).with_suffix(".csv"),
        ("iteration", "loss"),
        [
            ((index + 1) * report.report_interval, loss)
            for index, loss in enumerate(report.losses)
        ],
    )
