"""
Diagnostics over batches of trajectories: distance to the manifold, distance estimation bias, the
noise level / distance misalignment, the initial distance check, and side by side comparisons.

Batches are produced by picklable job objects mapped over trajectory numbers. Trajectory i always
uses the stream fork(seed, STREAM_SAMPLING, i), so a batch comes out the same for any worker count.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from nlc_lab import artifacts
from nlc_lab.constrained import IterProjConfig, LinearOperator, iterproj_nlc, sample_ddnm_nlc
from nlc_lab.errors import InvalidRange, IoFailure, ShapeMismatch
from nlc_lab.log import progress_disabled
from nlc_lab.manifold import ManifoldSpec, exact_distances
from nlc_lab.neural import DenoiserFn
from nlc_lab.numeric_core import STREAM_SAMPLING, Rng, fork, gaussian_mat
from nlc_lab.sampler import (
    NoiseLevelCorrection,
    SamplerConfig,
    Trajectory,
    annotate_distances,
    bias_values,
    run_sampler,
)
from nlc_lab.schedule import NoiseSchedule

LOGGER = logging.getLogger(__name__)

DEFAULT_SEEDS = 256
MIN_INITIAL_SAMPLES = 100

# Per step series kept in a report.
METRIC_DIST = "dist"
METRIC_BIAS = "bias"
METRIC_ABS_BIAS = "abs_bias"
METRIC_SIGMA_HAT = "sigma_hat"
METRIC_CONSISTENCY = "consistency"
METRIC_SQRT_N_SIGMA = "sqrt_n_sigma"
METRIC_SQRT_N_SIGMA_HAT = "sqrt_n_sigma_hat"

# Scalar metrics compared between reports, lower is better for all of them.
COMPARE_FINAL_DIST = "final_dist"
COMPARE_FINAL_CONSISTENCY = "final_consistency"
COMPARE_MEAN_ABS_BIAS = "mean_abs_bias"

LONG_CSV_HEADER = ("method", "step", "metric", "mean", "std")

TrajectoryJob = Callable[[int], Trajectory]


class SeriesStat(NamedTuple):
    """
    Per step mean and std over seeds, NaN where no seed has a value.
    """

    mean: List[float]
    std: List[float]


class RunReport(NamedTuple):
    """
    Aggregate of one method over a batch of seeds.
    """

    label: str
    config: Dict[str, artifacts.JsonValue]
    seeds: List[int]
    steps: int
    series: Dict[str, SeriesStat]
    # Scalar statistics of the final samples, (mean, std).
    final: Dict[str, Tuple[float, float]]


class InitialDistanceStats(NamedTuple):
    """
    Empirical mean of dist_K(x_T)^2 against the n sigma_T^2 threshold.
    """

    sigma_t: float
    num_samples: int
    mean_dist_sq: float
    threshold: float
    holds: bool


class ComparisonRow(NamedTuple):
    """
    One metric across reports. `improvements[i]` is the relative improvement of report i over
    the first report, in percent.
    """

    metric: str
    values: List[float]
    winner: str
    improvements: List[float]


class ComparisonTable(NamedTuple):
    """
    Side by side comparison of reports.
    """

    labels: List[str]
    rows: List[ComparisonRow]


class MisalignmentSeries(NamedTuple):
    """
    Per step mean dist_K(x_t) next to the distance the schedule implies, sqrt(n) sigma_t.
    """

    sqrt_n_sigma: List[float]
    sqrt_n_sigma_hat: List[float]
    mean_dist: List[float]


class SamplingJob(NamedTuple):
    """
    Draw trajectory i of an unconstrained batch.
    """

    denoiser: DenoiserFn
    nlc: NoiseLevelCorrection
    schedule: NoiseSchedule
    config: SamplerConfig
    spec: ManifoldSpec

    def __call__(self, index: int) -> Trajectory:
        rng = fork(self.config.seed, STREAM_SAMPLING, index)
        _, trajectory = run_sampler(
            self.denoiser, self.nlc, self.schedule, self.config, rng, self.spec.n
        )
        return annotate_distances(trajectory._replace(seed=index), self.spec)


class DdnmJob(NamedTuple):
    """
    Draw restoration i with DDNM, observation `observations[i % count]`.
    """

    denoiser: DenoiserFn
    nlc: NoiseLevelCorrection
    schedule: NoiseSchedule
    op: LinearOperator
    observations: np.ndarray
    eta: float
    normalize_direction: bool
    spec: ManifoldSpec
    seed: int

    def __call__(self, index: int) -> Trajectory:
        rng = fork(self.seed, STREAM_SAMPLING, index)
        y = self.observations[index % self.observations.shape[0]]
        _, trajectory = sample_ddnm_nlc(
            self.denoiser,
            self.nlc,
            self.schedule,
            self.op,
            y,
            self.eta,
            rng,
            normalize_direction=self.normalize_direction,
            seed=index,
        )
        return annotate_distances(trajectory, self.spec)


class IterProjJob(NamedTuple):
    """
    Draw restoration i with iterative projection, observation `observations[i % count]`.
    """

    denoiser: DenoiserFn
    nlc: NoiseLevelCorrection
    op: LinearOperator
    observations: np.ndarray
    config: IterProjConfig
    spec: ManifoldSpec
    seed: int

    def __call__(self, index: int) -> Trajectory:
        rng = fork(self.seed, STREAM_SAMPLING, index)
        y = self.observations[index % self.observations.shape[0]]
        result = iterproj_nlc(self.denoiser, self.nlc, self.op, y, self.config, rng, seed=index)
        if not result.converged:
            LOGGER.debug("Restoration %d hit the iteration cap", index)
        return annotate_distances(result.trajectory, self.spec)


def run_batch(job: TrajectoryJob, count: int, jobs: int = 1) -> List[Trajectory]:
    """
    Run trajectories 0 .. count - 1, in order.
    :param job: Picklable callable producing trajectory i.
    :param count: Batch size.
    :param jobs: Worker processes, 1 runs in this process.
    :return: Trajectories ordered by index.
    """
    if count < 1 or jobs < 1:
        raise InvalidRange(f"need count >= 1 and jobs >= 1, got {count}, {jobs}")
    indices = range(count)
    if jobs == 1:
        progress = tqdm(indices, desc="trajectories", disable=progress_disabled())
        return [job(index) for index in progress]

    LOGGER.info("Running %d trajectories on %d workers", count, jobs)
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        chunk = max(1, count // (4 * jobs))
        return list(
            tqdm(
                pool.map(job, indices, chunksize=chunk),
                total=count,
                desc="trajectories",
                disable=progress_disabled(),
            )
        )


def bias_series(trajectory: Trajectory, spec: ManifoldSpec) -> List[float]:
    """
    (dist_K(x_t) - sqrt(n) sigma_hat_t) / (sqrt(n) sigma_t) for every step with sigma_t > 0.
    :param trajectory: Trajectory.
    :param spec: Manifold.
    :return: Bias per step.
    """
    annotated = annotate_distances(trajectory, spec)
    values = bias_values(annotated)
    return [float(v) for v in values[annotated.sigmas > 0]]


def _stack(columns: Sequence[np.ndarray]) -> np.ndarray:
    """
    Stack per-seed columns of possibly different lengths, padding with NaN.
    """
    longest = max(column.shape[0] for column in columns)
    table = np.full((len(columns), longest), np.nan)
    for row, column in enumerate(columns):
        table[row, : column.shape[0]] = column
    return table


def _aggregate(table: np.ndarray) -> SeriesStat:
    """
    Mean / std over seeds (axis 0) ignoring NaN. Values are sorted first so the result does not
    depend on seed order.
    """
    ordered = np.sort(table, axis=0)
    finite = np.isfinite(ordered)
    counts = finite.sum(axis=0)
    filled = np.where(finite, ordered, 0.0)
    safe_counts = np.maximum(counts, 1)
    means = filled.sum(axis=0) / safe_counts
    deviations = np.where(finite, ordered - means, 0.0)
    stds = np.sqrt((deviations**2).sum(axis=0) / safe_counts)
    means = np.where(counts > 0, means, np.nan)
    stds = np.where(counts > 0, stds, np.nan)
    return SeriesStat(mean=[float(v) for v in means], std=[float(v) for v in stds])


def _final_stat(values: np.ndarray) -> Tuple[float, float]:
    stat = _aggregate(values[:, np.newaxis])
    return stat.mean[0], stat.std[0]


def summarize(
    label: str,
    trajectories: Sequence[Trajectory],
    spec: ManifoldSpec,
    config: Mapping[str, artifacts.JsonValue],
) -> RunReport:
    """
    :param label: Method name shown in comparisons.
    :param trajectories: At least two trajectories of the same method.
    :param spec: Manifold for the distance oracle.
    :param config: Snapshot of the settings that produced the batch.
    :return: The report.
    """
    if len(trajectories) < 2:
        raise ShapeMismatch(f"a report needs at least 2 seeds, got {len(trajectories)}")

    annotated = [annotate_distances(trajectory, spec) for trajectory in trajectories]
    root_n = np.sqrt(spec.n)
    biases = [bias_values(trajectory) for trajectory in annotated]
    series = {
        METRIC_DIST: _aggregate(_stack([t.distances for t in annotated])),
        METRIC_BIAS: _aggregate(_stack(biases)),
        METRIC_ABS_BIAS: _aggregate(_stack([np.abs(b) for b in biases])),
        METRIC_SIGMA_HAT: _aggregate(_stack([t.sigma_hats for t in annotated])),
        METRIC_SQRT_N_SIGMA: _aggregate(_stack([root_n * t.sigmas for t in annotated])),
        METRIC_SQRT_N_SIGMA_HAT: _aggregate(_stack([root_n * t.sigma_hats for t in annotated])),
    }
    final = {
        COMPARE_FINAL_DIST: _final_stat(np.array([t.distances[-1] for t in annotated])),
    }
    consistency = np.array([t.consistency[-1] for t in annotated])
    if np.all(np.isfinite(consistency)):
        series[METRIC_CONSISTENCY] = _aggregate(_stack([t.consistency for t in annotated]))
        final[COMPARE_FINAL_CONSISTENCY] = _final_stat(consistency)

    steps = max(t.sigmas.shape[0] for t in annotated) - 1
    LOGGER.info(
        "%s: mean final distance %.6g over %d seeds",
        label,
        final[COMPARE_FINAL_DIST][0],
        len(annotated),
    )
    return RunReport(
        label=label,
        config=dict(config),
        seeds=[t.seed for t in annotated],
        steps=steps,
        series=series,
        final=final,
    )


def misalignment_series(
    trajectories: Sequence[Trajectory], spec: ManifoldSpec
) -> MisalignmentSeries:
    """
    :param trajectories: Trajectories of one method.
    :param spec: Manifold.
    :return: Mean distance per step next to sqrt(n) sigma_t and sqrt(n) sigma_hat_t.
    """
    annotated = [annotate_distances(trajectory, spec) for trajectory in trajectories]
    root_n = np.sqrt(spec.n)
    return MisalignmentSeries(
        sqrt_n_sigma=_aggregate(_stack([root_n * t.sigmas for t in annotated])).mean,
        sqrt_n_sigma_hat=_aggregate(_stack([root_n * t.sigma_hats for t in annotated])).mean,
        mean_dist=_aggregate(_stack([t.distances for t in annotated])).mean,
    )


def initial_distance_check(
    spec: ManifoldSpec, sigma_t: float, num_samples: int, rng: Rng
) -> InitialDistanceStats:
    """
    Draw x_T = sqrt(sigma_T^2 + 1) z and compare the mean of dist_K(x_T)^2 with n sigma_T^2.
    :param spec: Manifold.
    :param sigma_t: Largest noise level sigma_T.
    :param num_samples: Number of draws, at least 100.
    :param rng: Draws z.
    :return: The statistic.
    """
    if num_samples < MIN_INITIAL_SAMPLES:
        raise InvalidRange(f"need at least {MIN_INITIAL_SAMPLES} samples, got {num_samples}")
    if sigma_t < 0:
        raise InvalidRange(f"sigma_T must be >= 0, got {sigma_t}")
    starts = np.sqrt(sigma_t**2 + 1.0) * gaussian_mat(rng, num_samples, spec.n)
    mean_dist_sq = float(np.mean(exact_distances(spec, starts) ** 2))
    threshold = spec.n * sigma_t**2
    return InitialDistanceStats(
        sigma_t=float(sigma_t),
        num_samples=num_samples,
        mean_dist_sq=mean_dist_sq,
        threshold=threshold,
        holds=mean_dist_sq > threshold,
    )


def _scalar_metrics(report: RunReport) -> Dict[str, float]:
    metrics = {name: stat[0] for name, stat in report.final.items()}
    abs_bias = [v for v in report.series[METRIC_ABS_BIAS].mean if np.isfinite(v)]
    metrics[COMPARE_MEAN_ABS_BIAS] = float(np.mean(abs_bias)) if abs_bias else float("nan")
    return metrics


def compare(reports: Sequence[RunReport]) -> ComparisonTable:
    """
    Compare the scalar metrics every report has. The first report is the baseline for the
    relative improvements.
    :param reports: At least two reports with the same number of steps.
    :return: The table.
    """
    if len(reports) < 2:
        raise ShapeMismatch(f"need at least 2 reports to compare, got {len(reports)}")
    if len({report.steps for report in reports}) != 1:
        raise ShapeMismatch("reports differ in their number of steps")

    per_report = [_scalar_metrics(report) for report in reports]
    shared = [name for name in per_report[0] if all(name in metrics for metrics in per_report)]
    labels = [report.label for report in reports]

    rows: List[ComparisonRow] = []
    for name in sorted(shared):
        values = [metrics[name] for metrics in per_report]
        baseline = values[0]
        improvements = [
            100.0 * (baseline - value) / abs(baseline) if baseline != 0 else 0.0 for value in values
        ]
        winner = labels[int(np.argmin(values))]
        rows.append(
            ComparisonRow(metric=name, values=values, winner=winner, improvements=improvements)
        )
    return ComparisonTable(labels=labels, rows=rows)


def _json_floats(values: Sequence[float]) -> List[artifacts.JsonValue]:
    return [artifacts.finite_or_none(v) for v in values]


def report_document(report: RunReport) -> artifacts.JsonValue:
    """
    :param report: Report.
    :return: JSON document, NaN written as null.
    """
    return {
        "label": report.label,
        "config": report.config,
        "seeds": list(report.seeds),
        "steps": report.steps,
        "series": {
            name: {"mean": _json_floats(stat.mean), "std": _json_floats(stat.std)}
            for name, stat in report.series.items()
        },
        "final": {
            name: {"mean": artifacts.finite_or_none(mean), "std": artifacts.finite_or_none(std)}
            for name, (mean, std) in report.final.items()
        },
    }


def write_report(report: RunReport, path: Union[str, Path]) -> None:
    """
    :param report: Report.
    :param path: Destination.
    :return: None
    """
    artifacts.write_json(path, report_document(report))


def _floats(value: artifacts.JsonValue, what: str) -> List[float]:
    if not isinstance(value, list):
        raise IoFailure(f"{what} must be a list")
    result: List[float] = []
    for item in value:
        if item is None:
            result.append(float("nan"))
        elif isinstance(item, (int, float)) and not isinstance(item, bool):
            result.append(float(item))
        else:
            raise IoFailure(f"{what} holds a non-numeric value")
    return result


def _number(value: Optional[artifacts.JsonValue]) -> float:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    return float("nan")


def load_report(path: Union[str, Path]) -> RunReport:
    """
    :param path: File written by `write_report`.
    :return: The report.
    """
    document = artifacts.json_mapping(artifacts.read_json(path), str(path))
    label = document.get("label")
    steps = document.get("steps")
    seeds = document.get("seeds")
    config = document.get("config", {})
    if not isinstance(label, str) or not isinstance(steps, int) or not isinstance(seeds, list):
        raise IoFailure(f"{path} is not a run report")
    if not isinstance(config, dict):
        raise IoFailure(f"{path} has a malformed config")

    series: Dict[str, SeriesStat] = {}
    for name, stat in artifacts.json_mapping(document.get("series"), f"{path} series").items():
        fields = artifacts.json_mapping(stat, f"{path} series {name}")
        series[name] = SeriesStat(
            mean=_floats(fields.get("mean"), f"{path} {name} mean"),
            std=_floats(fields.get("std"), f"{path} {name} std"),
        )
    if METRIC_ABS_BIAS not in series:
        raise IoFailure(f"{path} has no {METRIC_ABS_BIAS} series")

    final: Dict[str, Tuple[float, float]] = {}
    for name, stat in artifacts.json_mapping(document.get("final"), f"{path} final").items():
        fields = artifacts.json_mapping(stat, f"{path} final {name}")
        final[name] = (_number(fields.get("mean")), _number(fields.get("std")))

    return RunReport(
        label=label,
        config=config,
        seeds=[int(seed) for seed in seeds if isinstance(seed, int)],
        steps=steps,
        series=series,
        final=final,
    )


def comparison_document(table: ComparisonTable) -> artifacts.JsonValue:
    """
    :param table: Comparison.
    :return: JSON document.
    """
    return {
        "labels": list(table.labels),
        "rows": [
            {
                "metric": row.metric,
                "values": _json_floats(row.values),
                "winner": row.winner,
                "improvement_percent": _json_floats(row.improvements),
            }
            for row in table.rows
        ],
    }


def initial_distance_document(stats: Sequence[InitialDistanceStats]) -> artifacts.JsonValue:
    """
    :param stats: One entry per sigma_T.
    :return: JSON document.
    """
    return {
        "checks": [
            {
                "sigma_t": entry.sigma_t,
                "num_samples": entry.num_samples,
                "mean_dist_sq": entry.mean_dist_sq,
                "threshold": entry.threshold,
                "holds": entry.holds,
            }
            for entry in stats
        ]
    }


def write_long_csv(reports: Sequence[RunReport], path: Union[str, Path]) -> None:
    """
    Plot ready table (method, step, metric, mean, std), empty cells for missing values.
    :param reports: Reports, in output order.
    :param path: Destination.
    :return: None
    """
    rows: List[Tuple[artifacts.CsvCell, ...]] = []
    for report in reports:
        for name in sorted(report.series):
            stat = report.series[name]
            for step, (mean, std) in enumerate(zip(stat.mean, stat.std)):
                rows.append(
                    (
                        report.label,
                        step,
                        name,
                        mean if np.isfinite(mean) else "",
                        std if np.isfinite(std) else "",
                    )
                )
    artifacts.write_csv(path, LONG_CSV_HEADER, rows)
