"""
Command line entry point. Each command has a table of options; values are merged
defaults < `[<command>]` table of a `--config` TOML file < flags, then handed to the modules
that do the work. Every failure ends as one `error kind=... message=...` line on stderr.
"""

import argparse
import logging
import sys
import tomllib
from contextlib import contextmanager
from pathlib import Path
from typing import (
    Callable,
    Dict,
    Iterator,
    List,
    Mapping,
    NamedTuple,
    NoReturn,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from nlc_lab import artifacts
from nlc_lab.constrained import (
    DEFAULT_ALPHA,
    DEFAULT_ETA,
    DEFAULT_K_MAX,
    DEFAULT_SIGMA_MAX,
    DEFAULT_SIGMA_MIN,
    IterProjConfig,
    LinearOperator,
    load_operator,
    make_iterproj_config,
    random_row_operator,
    save_operator,
    write_restoration_csv,
)
from nlc_lab.errors import ConfigInvalid, InvalidRange, exit_code, one_line
from nlc_lab.experiment import (
    DEFAULT_SEEDS,
    MIN_INITIAL_SAMPLES,
    DdnmJob,
    IterProjJob,
    SamplingJob,
    compare,
    comparison_document,
    initial_distance_check,
    initial_distance_document,
    load_report,
    run_batch,
    summarize,
    write_long_csv,
    write_report,
)
from nlc_lab.log import configure_logging, level_name_from_env
from nlc_lab.manifold import (
    DEFAULT_NOISE_STD,
    Dataset,
    generate_dataset,
    load_dataset,
    make_manifold_spec,
    save_dataset,
)
from nlc_lab.neural import (
    DEFAULT_LEARNING_RATE,
    ROLE_CORRECTOR,
    ROLE_DENOISER,
    MlpNet,
    denoiser_fn,
    load_checkpoint,
    residual_fn,
)
from nlc_lab.numeric_core import (
    STREAM_OPERATOR,
    STREAM_POINTS,
    STREAM_ROTATIONS,
    STREAM_SAMPLING,
    fork,
)
from nlc_lab.sampler import (
    ALGO_DDIM,
    ALGORITHMS,
    NLC_LUT,
    NLC_MODES,
    NLC_NETWORK,
    NLC_OFF,
    NoiseLevelCorrection,
    Trajectory,
    make_sampler_config,
    nlc_lut,
    nlc_network,
    nlc_off,
    write_trajectory_csv,
)
from nlc_lab.schedule import (
    DEFAULT_BETA_MAX,
    DEFAULT_BETA_MIN,
    DEFAULT_EDM_RHO,
    DEFAULT_EDM_SIGMA_MAX,
    DEFAULT_EDM_SIGMA_MIN,
    DEFAULT_LUT_BINS,
    DEFAULT_T,
    NoiseSchedule,
    build_ddpm_schedule,
    build_edm_schedule,
    load_lut,
    record_and_build_lut,
    save_lut,
    subsample,
)
from nlc_lab.training import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_DELTA,
    DEFAULT_HIDDEN,
    DEFAULT_REPORT_INTERVAL,
    make_train_config,
    train,
    write_train_report,
)

LOGGER = logging.getLogger(__name__)

ConfigValue = Union[None, bool, int, float, str, List[float], List[str]]
Settings = Mapping[str, ConfigValue]

KIND_INT = "int"
KIND_FLOAT = "float"
KIND_STR = "str"
KIND_FLAG = "flag"
KIND_FLOATS = "floats"
KIND_STRS = "strs"

SCHEDULE_DDPM = "ddpm"
SCHEDULE_EDM = "edm"
SCHEDULES = (SCHEDULE_DDPM, SCHEDULE_EDM)

NORMALIZE_AUTO = "auto"
NORMALIZE_CHOICES = (NORMALIZE_AUTO, "on", "off")

METHOD_DDNM = "ddnm"
METHOD_ITERPROJ = "iterproj"
METHODS = (METHOD_DDNM, METHOD_ITERPROJ)

OBSERVE_ZERO = "zero"
OBSERVE_DATASET = "dataset"
OBSERVATIONS = (OBSERVE_ZERO, OBSERVE_DATASET)

DEFAULT_STEPS = 10
DEFAULT_EVAL_SIGMAS = [5.0, 10.0, 50.0]
DEFAULT_EVAL_SAMPLES = 500

NLC_LABEL_SUFFIX = {NLC_OFF: "", NLC_NETWORK: "-nlc", NLC_LUT: "-lt-nlc"}


class Option(NamedTuple):
    """
    One configurable value of a command, shared by the flag parser and the TOML reader.
    """

    key: str
    kind: str
    default: ConfigValue
    help: str
    choices: Tuple[str, ...] = ()

    @property
    def flag(self) -> str:
        """
        :return: The command line spelling of the key.
        """
        return "--" + self.key.replace("_", "-")


SEED_OPTION = Option("seed", KIND_INT, 0, "Run seed, every random stream is forked from it.")
JOBS_OPTION = Option("jobs", KIND_INT, 1, "Worker processes for batch sampling.")
DATA_OPTION = Option("data", KIND_STR, None, "Dataset file (.nlcd).")
DENOISER_OPTION = Option("denoiser", KIND_STR, None, "Denoiser checkpoint (.nlcn).")
CORRECTOR_OPTION = Option("corrector", KIND_STR, None, "Corrector checkpoint, for --nlc network.")
LUT_OPTION = Option("lut", KIND_STR, None, "Lookup table JSON, for --nlc lut.")
NLC_OPTION = Option("nlc", KIND_STR, NLC_OFF, "Noise level correction.", NLC_MODES)
COUNT_OPTION = Option("count", KIND_INT, DEFAULT_SEEDS, "Number of trajectories.")
NORMALIZE_OPTION = Option(
    "normalize",
    KIND_STR,
    NORMALIZE_AUTO,
    "Rescale the denoiser output to norm sqrt(n). auto: on whenever a correction is used.",
    NORMALIZE_CHOICES,
)
REPORT_OPTION = Option("report", KIND_STR, None, "Also write a summary report JSON here.")
LABEL_OPTION = Option("label", KIND_STR, None, "Method name used in the report.")

TRAINING_SCHEDULE_OPTIONS = (
    Option("timesteps", KIND_INT, DEFAULT_T, "Length of the linear-beta training schedule."),
    Option("beta_min", KIND_FLOAT, DEFAULT_BETA_MIN, "First beta of the schedule."),
    Option("beta_max", KIND_FLOAT, DEFAULT_BETA_MAX, "Last beta of the schedule."),
)

SAMPLING_SCHEDULE_OPTIONS = TRAINING_SCHEDULE_OPTIONS + (
    Option("schedule", KIND_STR, SCHEDULE_DDPM, "Sampling schedule family.", SCHEDULES),
    Option("steps", KIND_INT, DEFAULT_STEPS, "Sampling steps."),
    Option("sigma_min", KIND_FLOAT, DEFAULT_EDM_SIGMA_MIN, "Smallest sigma of the edm schedule."),
    Option("sigma_max", KIND_FLOAT, DEFAULT_EDM_SIGMA_MAX, "Largest sigma of the edm schedule."),
    Option("rho", KIND_FLOAT, DEFAULT_EDM_RHO, "Curvature of the edm schedule."),
)

TRAIN_OPTIONS = TRAINING_SCHEDULE_OPTIONS + (
    DATA_OPTION,
    SEED_OPTION,
    Option("out", KIND_STR, None, "Checkpoint to write."),
    Option("report", KIND_STR, None, "Training report JSON, defaults to <out>.report.json."),
    Option("batch_size", KIND_INT, DEFAULT_BATCH_SIZE, "Points per Adam step."),
    Option("iterations", KIND_INT, None, "Adam steps, defaults to the role's budget."),
    Option("lr", KIND_FLOAT, DEFAULT_LEARNING_RATE, "Learning rate."),
    Option("hidden", KIND_INT, DEFAULT_HIDDEN, "Hidden width."),
    Option("layers", KIND_INT, None, "Dense layers, defaults to the role's depth."),
    Option("report_interval", KIND_INT, DEFAULT_REPORT_INTERVAL, "Iterations per loss entry."),
)

COMMAND_OPTIONS: Dict[str, Tuple[Option, ...]] = {
    "gen-data": (
        Option("n", KIND_INT, 100, "Ambient dimension."),
        Option("d", KIND_INT, 1, "Sphere dimension."),
        Option("m", KIND_INT, 4, "Number of spheres."),
        Option("count", KIND_INT, 10_000, "Number of points."),
        Option("noise_std", KIND_FLOAT, DEFAULT_NOISE_STD, "Off-manifold jitter."),
        Option("identity", KIND_FLAG, False, "Use identity rotations."),
        SEED_OPTION,
        Option("out", KIND_STR, None, "Dataset file to write."),
    ),
    "train-denoiser": TRAIN_OPTIONS,
    "train-nlc": TRAIN_OPTIONS
    + (
        Option("delta", KIND_FLOAT, DEFAULT_DELTA, "Half width of the lambda range, in [0, 1)."),
        DENOISER_OPTION,
    ),
    "build-lut": SAMPLING_SCHEDULE_OPTIONS
    + (
        DATA_OPTION,
        DENOISER_OPTION,
        CORRECTOR_OPTION,
        Option("algo", KIND_STR, ALGO_DDIM, "Sampler that visits the recorded states.", ALGORITHMS),
        COUNT_OPTION,
        Option("bins", KIND_INT, DEFAULT_LUT_BINS, "Number of sigma bins."),
        SEED_OPTION,
        JOBS_OPTION,
        Option("out", KIND_STR, None, "Lookup table JSON to write."),
    ),
    "sample": SAMPLING_SCHEDULE_OPTIONS
    + (
        DATA_OPTION,
        DENOISER_OPTION,
        CORRECTOR_OPTION,
        LUT_OPTION,
        NLC_OPTION,
        Option("algo", KIND_STR, ALGO_DDIM, "Sampler.", ALGORITHMS),
        Option("eta", KIND_FLOAT, None, "Randomness scale, defaults to 1 for ddpm else 0."),
        NORMALIZE_OPTION,
        COUNT_OPTION,
        SEED_OPTION,
        JOBS_OPTION,
        Option("out", KIND_STR, None, "Trajectory CSV to write."),
        REPORT_OPTION,
        LABEL_OPTION,
    ),
    "restore": SAMPLING_SCHEDULE_OPTIONS
    + (
        DATA_OPTION,
        DENOISER_OPTION,
        CORRECTOR_OPTION,
        LUT_OPTION,
        NLC_OPTION,
        Option("method", KIND_STR, METHOD_DDNM, "Constrained sampler.", METHODS),
        Option("operator", KIND_STR, None, "Operator file (.nlcm), else a random-row operator."),
        Option("operator_out", KIND_STR, None, "Save the random-row operator here."),
        Option("rows", KIND_INT, 1, "Rows of the random-row operator."),
        Option("observe", KIND_STR, OBSERVE_ZERO, "Observations y.", OBSERVATIONS),
        Option("eta", KIND_FLOAT, 0.0, "DDNM randomness scale."),
        NORMALIZE_OPTION,
        Option("iter_sigma_max", KIND_FLOAT, DEFAULT_SIGMA_MAX, "IterProj starting sigma."),
        Option("iter_sigma_min", KIND_FLOAT, DEFAULT_SIGMA_MIN, "IterProj restart threshold."),
        Option("iter_sigma_restart", KIND_FLOAT, None, "IterProj restart sigma."),
        Option("alpha", KIND_FLOAT, DEFAULT_ALPHA, "IterProj sigma decay."),
        Option("iter_eta", KIND_FLOAT, DEFAULT_ETA, "IterProj fresh noise weight."),
        Option("k_max", KIND_INT, DEFAULT_K_MAX, "IterProj iteration cap."),
        Option("stop_tol", KIND_FLOAT, None, "IterProj stopping tolerance."),
        COUNT_OPTION,
        SEED_OPTION,
        JOBS_OPTION,
        Option("out", KIND_STR, None, "Restoration CSV to write."),
        REPORT_OPTION,
        LABEL_OPTION,
    ),
    "eval": (
        DATA_OPTION,
        Option("sigma_t", KIND_FLOATS, DEFAULT_EVAL_SIGMAS, "Largest noise levels to check."),
        Option("samples", KIND_INT, DEFAULT_EVAL_SAMPLES, "Draws per noise level."),
        SEED_OPTION,
        Option("out", KIND_STR, None, "Statistics JSON to write."),
    ),
    "report": (
        Option("inputs", KIND_STRS, None, "Run reports, the first one is the baseline."),
        Option("out", KIND_STR, None, "Comparison JSON to write."),
        Option("csv", KIND_STR, None, "Also write the long format CSV here."),
    ),
}


class _ArgumentParser(argparse.ArgumentParser):
    """
    Parse failures become `ConfigInvalid` instead of a usage dump and `sys.exit(2)`.
    """

    def error(self, message: str) -> NoReturn:
        raise ConfigInvalid(message)


FLAG_TYPES: Dict[str, Callable[[str], object]] = {
    KIND_INT: int,
    KIND_FLOAT: float,
    KIND_FLOATS: float,
}


def _add_option(parser: argparse.ArgumentParser, option: Option) -> None:
    if option.kind == KIND_FLAG:
        parser.add_argument(option.flag, dest=option.key, action="store_true", help=option.help)
        return
    value_type = FLAG_TYPES.get(option.kind, str)
    parser.add_argument(
        option.flag,
        dest=option.key,
        type=value_type,
        nargs="+" if option.kind in (KIND_FLOATS, KIND_STRS) else None,
        choices=option.choices or None,
        help=option.help,
    )


def build_parser() -> argparse.ArgumentParser:
    """
    Flags default to "absent" so that only what was typed overrides the config file.
    :return: The parser.
    """
    parser = _ArgumentParser(prog="nlc-lab", description="Noise level correction lab.")
    commands = parser.add_subparsers(dest="command", required=True)
    for command, options in COMMAND_OPTIONS.items():
        sub = commands.add_parser(command, argument_default=argparse.SUPPRESS)
        sub.add_argument("--config", dest="config", help=f"TOML file with a [{command}] table.")
        for option in options:
            _add_option(sub, option)
    return parser


def _is_number(value: object) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _checked_value(option: Option, value: object) -> ConfigValue:
    """
    Check a config file or flag value against the option's kind.
    :param option: Target option.
    :param value: Raw value from `tomllib` or argparse.
    :return: The value in its canonical Python type.
    """
    converted: ConfigValue
    if option.kind == KIND_INT and isinstance(value, int) and not isinstance(value, bool):
        converted = value
    elif (
        option.kind == KIND_FLOAT
        and isinstance(value, (int, float))
        and not isinstance(value, bool)
    ):
        converted = float(value)
    elif option.kind == KIND_STR and isinstance(value, str):
        converted = value
    elif option.kind == KIND_FLAG and isinstance(value, bool):
        converted = value
    elif option.kind == KIND_FLOATS and isinstance(value, list) and all(map(_is_number, value)):
        converted = [float(item) for item in value]
    elif (
        option.kind == KIND_STRS
        and isinstance(value, list)
        and all(isinstance(item, str) for item in value)
    ):
        converted = [str(item) for item in value]
    else:
        raise ConfigInvalid(f"config key {option.key!r} must be of kind {option.kind}")
    if option.choices and converted not in option.choices:
        raise ConfigInvalid(f"config key {option.key!r} must be one of {option.choices}")
    return converted


def read_config_table(path: Union[str, Path], command: str) -> Dict[str, object]:
    """
    :param path: TOML file.
    :param command: Command whose table is wanted.
    :return: The `[<command>]` table, empty when the file has none.
    """
    if not Path(path).is_file():
        raise ConfigInvalid(f"config file {path} does not exist")
    try:
        with open(path, "rb") as config_file:
            document = tomllib.load(config_file)
    except tomllib.TOMLDecodeError as error:
        raise ConfigInvalid(f"cannot parse {path}: {error}") from error
    table = document.get(command, {})
    if not isinstance(table, dict):
        raise ConfigInvalid(f"[{command}] in {path} must be a table")
    return dict(table)


def merge_settings(
    command: str, flags: Mapping[str, object], table: Optional[Mapping[str, object]] = None
) -> Dict[str, ConfigValue]:
    """
    defaults < config table < flags.
    :param command: Command name.
    :param flags: Values typed on the command line.
    :param table: Values from the config file.
    :return: One value per option of the command.
    """
    options = {option.key: option for option in COMMAND_OPTIONS[command]}
    settings: Dict[str, ConfigValue] = {key: option.default for key, option in options.items()}
    for key, value in (table or {}).items():
        if key not in options:
            raise ConfigInvalid(f"unknown key {key!r} in the [{command}] config table")
        settings[key] = _checked_value(options[key], value)
    for key, value in flags.items():
        if key in options:
            settings[key] = _checked_value(options[key], value)
    return settings


def _missing(key: str) -> ConfigInvalid:
    return ConfigInvalid(f"--{key.replace('_', '-')} is required")


def _int(settings: Settings, key: str) -> int:
    value = settings[key]
    if not isinstance(value, int) or isinstance(value, bool):
        raise _missing(key)
    return value


def _optional_int(settings: Settings, key: str) -> Optional[int]:
    return None if settings[key] is None else _int(settings, key)


def _float(settings: Settings, key: str) -> float:
    value = settings[key]
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise _missing(key)
    return float(value)


def _optional_float(settings: Settings, key: str) -> Optional[float]:
    return None if settings[key] is None else _float(settings, key)


def _str(settings: Settings, key: str) -> str:
    value = settings[key]
    if not isinstance(value, str):
        raise _missing(key)
    return value


def _floats(settings: Settings, key: str) -> List[float]:
    value = settings[key]
    if not isinstance(value, list) or not value:
        raise _missing(key)
    return [float(item) for item in value]


def _strs(settings: Settings, key: str) -> List[str]:
    value = settings[key]
    if not isinstance(value, list) or not value:
        raise _missing(key)
    return [str(item) for item in value]


def _input_path(settings: Settings, key: str) -> Path:
    path = Path(_str(settings, key))
    if not path.is_file():
        raise ConfigInvalid(f"--{key.replace('_', '-')} {path} does not exist")
    return path


@contextmanager
def _checked_settings() -> Iterator[None]:
    """
    Range errors raised while settings are turned into configs are configuration errors.
    """
    try:
        yield
    except InvalidRange as error:
        raise ConfigInvalid(str(error)) from error


def _positive_int(settings: Settings, key: str) -> int:
    value = _int(settings, key)
    if value < 1:
        raise ConfigInvalid(f"--{key.replace('_', '-')} must be at least 1, got {value}")
    return value


def _unit_float(settings: Settings, key: str) -> float:
    value = _float(settings, key)
    if not 0.0 <= value <= 1.0:
        raise ConfigInvalid(f"--{key.replace('_', '-')} must be in [0, 1], got {value}")
    return value


def _snapshot(settings: Settings) -> Dict[str, artifacts.JsonValue]:
    snapshot: Dict[str, artifacts.JsonValue] = {}
    for key, value in sorted(settings.items()):
        if isinstance(value, list):
            items: List[artifacts.JsonValue] = list(value)
            snapshot[key] = items
        else:
            snapshot[key] = value
    return snapshot


def _load_net(path: Path, role: str, n: int) -> MlpNet:
    net, _ = load_checkpoint(path)
    if net.role != role:
        raise ConfigInvalid(f"{path} holds a {net.role} network, expected a {role}")
    if net.layer_dims[0] != n + 1:
        raise ConfigInvalid(f"{path} takes {net.layer_dims[0] - 1} inputs, the data has n={n}")
    return net


def _training_schedule(settings: Settings) -> NoiseSchedule:
    with _checked_settings():
        return build_ddpm_schedule(
            _int(settings, "timesteps"), _float(settings, "beta_min"), _float(settings, "beta_max")
        )


def _sampling_schedule(settings: Settings) -> NoiseSchedule:
    steps = _int(settings, "steps")
    with _checked_settings():
        if _str(settings, "schedule") == SCHEDULE_EDM:
            return build_edm_schedule(
                steps,
                _float(settings, "sigma_min"),
                _float(settings, "sigma_max"),
                _float(settings, "rho"),
            )
        return subsample(_training_schedule(settings), steps)


def _noise_level_correction(settings: Settings, n: int) -> NoiseLevelCorrection:
    mode = _str(settings, "nlc")
    if mode == NLC_NETWORK:
        corrector = _load_net(_input_path(settings, "corrector"), ROLE_CORRECTOR, n)
        return nlc_network(residual_fn(corrector))
    if mode == NLC_LUT:
        return nlc_lut(load_lut(_input_path(settings, "lut")))
    return nlc_off()


def _normalize(settings: Settings) -> Optional[bool]:
    choice = _str(settings, "normalize")
    return None if choice == NORMALIZE_AUTO else choice == "on"


def _label(settings: Settings, method: str) -> str:
    if settings["label"] is not None:
        return _str(settings, "label")
    return method + NLC_LABEL_SUFFIX[_str(settings, "nlc")]


def _write_summary(
    settings: Settings, label: str, trajectories: Sequence[Trajectory], dataset: Dataset
) -> None:
    if settings["report"] is None:
        return
    report = summarize(label, trajectories, dataset.spec, _snapshot(settings))
    write_report(report, _str(settings, "report"))


def run_gen_data(settings: Settings) -> None:
    """
    Draw a manifold and sample a dataset from it.
    :param settings: Merged `gen-data` settings.
    :return: None
    """
    seed = _int(settings, "seed")
    out = _str(settings, "out")
    count = _positive_int(settings, "count")
    with _checked_settings():
        spec = make_manifold_spec(
            _int(settings, "n"),
            _int(settings, "d"),
            _int(settings, "m"),
            fork(seed, STREAM_ROTATIONS),
            noise_std=_float(settings, "noise_std"),
            identity=bool(settings["identity"]),
        )
    dataset = generate_dataset(spec, count, fork(seed, STREAM_POINTS), seed=seed)
    save_dataset(dataset, out)
    LOGGER.info("Wrote %d points to %s", dataset.points.shape[0], out)


def _run_training(settings: Settings, role: str) -> None:
    out = _str(settings, "out")
    with _checked_settings():
        config = make_train_config(
            role,
            batch_size=_int(settings, "batch_size"),
            iterations=_optional_int(settings, "iterations"),
            lr=_float(settings, "lr"),
            delta=_float(settings, "delta") if role == ROLE_CORRECTOR else DEFAULT_DELTA,
            seed=_int(settings, "seed"),
            report_interval=_int(settings, "report_interval"),
            hidden=_int(settings, "hidden"),
            layers=_optional_int(settings, "layers"),
        )
    training_schedule = _training_schedule(settings)
    report_path = out + ".report.json" if settings["report"] is None else _str(settings, "report")

    dataset = load_dataset(_input_path(settings, "data"))
    if role == ROLE_CORRECTOR:
        _load_net(_input_path(settings, "denoiser"), ROLE_DENOISER, dataset.spec.n)
    _, report = train(role, config, dataset, training_schedule, checkpoint_path=out)
    write_train_report(report, report_path)


def run_train_denoiser(settings: Settings) -> None:
    """
    :param settings: Merged `train-denoiser` settings.
    :return: None
    """
    _run_training(settings, ROLE_DENOISER)


def run_train_nlc(settings: Settings) -> None:
    """
    Train the corrector. The denoiser checkpoint is only checked for compatibility, the
    corrector objective does not evaluate it.
    :param settings: Merged `train-nlc` settings.
    :return: None
    """
    _run_training(settings, ROLE_CORRECTOR)


def residual_records(trajectories: Sequence[Trajectory]) -> np.ndarray:
    """
    :param trajectories: Corrected trajectories.
    :return: (count, 2) array of the (sigma_t, r) pairs visited, sentinel rows left out.
    """
    pairs = [
        np.column_stack((trajectory.sigmas, trajectory.residuals)) for trajectory in trajectories
    ]
    records = np.concatenate(pairs, axis=0) if pairs else np.zeros((0, 2))
    keep = (records[:, 0] > 0) & np.isfinite(records[:, 1])
    return records[keep]


def run_build_lut(settings: Settings) -> None:
    """
    Sample with the corrector network and bin the residuals it produced.
    :param settings: Merged `build-lut` settings.
    :return: None
    """
    out = _str(settings, "out")
    count = _positive_int(settings, "count")
    jobs = _positive_int(settings, "jobs")
    bins = _positive_int(settings, "bins")
    with _checked_settings():
        config = make_sampler_config(
            _str(settings, "algo"), NLC_NETWORK, seed=_int(settings, "seed")
        )
    sampling_schedule = _sampling_schedule(settings)

    dataset = load_dataset(_input_path(settings, "data"))
    n = dataset.spec.n
    denoiser = denoiser_fn(_load_net(_input_path(settings, "denoiser"), ROLE_DENOISER, n))
    corrector = _load_net(_input_path(settings, "corrector"), ROLE_CORRECTOR, n)
    nlc = nlc_network(residual_fn(corrector))
    job = SamplingJob(denoiser, nlc, sampling_schedule, config, dataset.spec)
    trajectories = run_batch(job, count, jobs)
    save_lut(record_and_build_lut(residual_records(trajectories), bins), out)


def run_sample(settings: Settings) -> None:
    """
    Draw a batch of unconstrained trajectories.
    :param settings: Merged `sample` settings.
    :return: None
    """
    out = _str(settings, "out")
    count = _positive_int(settings, "count")
    jobs = _positive_int(settings, "jobs")
    algorithm = _str(settings, "algo")
    with _checked_settings():
        config = make_sampler_config(
            algorithm,
            _str(settings, "nlc"),
            eta=_optional_float(settings, "eta"),
            normalize_direction=_normalize(settings),
            seed=_int(settings, "seed"),
        )
    sampling_schedule = _sampling_schedule(settings)

    dataset = load_dataset(_input_path(settings, "data"))
    n = dataset.spec.n
    denoiser = denoiser_fn(_load_net(_input_path(settings, "denoiser"), ROLE_DENOISER, n))
    nlc = _noise_level_correction(settings, n)
    job = SamplingJob(denoiser, nlc, sampling_schedule, config, dataset.spec)
    trajectories = run_batch(job, count, jobs)
    write_trajectory_csv(trajectories, out)
    _write_summary(settings, _label(settings, algorithm), trajectories, dataset)


def _iterproj_config(settings: Settings, normalize: bool) -> IterProjConfig:
    with _checked_settings():
        return make_iterproj_config(
            sigma_max=_float(settings, "iter_sigma_max"),
            sigma_min=_float(settings, "iter_sigma_min"),
            sigma_restart=_optional_float(settings, "iter_sigma_restart"),
            alpha=_float(settings, "alpha"),
            eta=_float(settings, "iter_eta"),
            k_max=_int(settings, "k_max"),
            stop_tol=_optional_float(settings, "stop_tol"),
            normalize_direction=normalize,
        )


def _operator(settings: Settings, n: int) -> LinearOperator:
    if settings["operator"] is not None:
        op = load_operator(_input_path(settings, "operator"))
        if op.matrix.shape[1] != n:
            raise ConfigInvalid(f"operator acts on n={op.matrix.shape[1]}, the data has n={n}")
        return op
    rng = fork(_int(settings, "seed"), STREAM_OPERATOR)
    return random_row_operator(rng, _int(settings, "rows"), n)


def observations_for(
    op: LinearOperator, dataset: Dataset, observe: str, count: int
) -> np.ndarray:
    """
    :param op: Measurement operator.
    :param dataset: Source of ground truth points.
    :param observe: `zero` for y = 0, `dataset` for y = A x of the first `count` points.
    :param count: Number of restorations.
    :return: (k, rows) observations, restoration i uses row i % k.
    """
    if observe == OBSERVE_ZERO:
        observations: np.ndarray = np.zeros((1, op.matrix.shape[0]))
        return observations
    points = dataset.points[: min(count, dataset.points.shape[0])]
    measured: np.ndarray = points @ op.matrix.T
    return measured


def run_restore(settings: Settings) -> None:
    """
    Solve a batch of linear inverse problems with DDNM or iterative projection.
    :param settings: Merged `restore` settings.
    :return: None
    """
    out = _str(settings, "out")
    seed = _int(settings, "seed")
    count = _positive_int(settings, "count")
    jobs = _positive_int(settings, "jobs")
    _positive_int(settings, "rows")
    method = _str(settings, "method")
    normalize = _normalize(settings)
    if normalize is None:
        normalize = _str(settings, "nlc") != NLC_OFF
    eta = _unit_float(settings, "eta")
    iterproj_config: Optional[IterProjConfig] = None
    ddnm_schedule: Optional[NoiseSchedule] = None
    if method == METHOD_ITERPROJ:
        iterproj_config = _iterproj_config(settings, normalize)
    else:
        ddnm_schedule = _sampling_schedule(settings)

    dataset = load_dataset(_input_path(settings, "data"))
    n = dataset.spec.n
    denoiser = denoiser_fn(_load_net(_input_path(settings, "denoiser"), ROLE_DENOISER, n))
    nlc = _noise_level_correction(settings, n)
    op = _operator(settings, n)
    observations = observations_for(op, dataset, _str(settings, "observe"), count)
    job: Union[DdnmJob, IterProjJob]
    if iterproj_config is not None:
        job = IterProjJob(denoiser, nlc, op, observations, iterproj_config, dataset.spec, seed)
    else:
        job = DdnmJob(
            denoiser, nlc, ddnm_schedule, op, observations, eta, normalize, dataset.spec, seed
        )
    trajectories = run_batch(job, count, jobs)
    write_restoration_csv(trajectories, out)
    if settings["operator"] is None and settings["operator_out"] is not None:
        save_operator(op, _str(settings, "operator_out"), seed=seed)
    _write_summary(settings, _label(settings, method), trajectories, dataset)


def run_eval(settings: Settings) -> None:
    """
    Check that the initial noise puts samples farther than sqrt(n) sigma_T from the manifold.
    :param settings: Merged `eval` settings.
    :return: None
    """
    out = _str(settings, "out")
    seed = _int(settings, "seed")
    samples = _int(settings, "samples")
    sigmas = _floats(settings, "sigma_t")
    if samples < MIN_INITIAL_SAMPLES:
        raise ConfigInvalid(f"--samples must be at least {MIN_INITIAL_SAMPLES}, got {samples}")
    if min(sigmas) < 0:
        raise ConfigInvalid(f"--sigma-t values must be >= 0, got {sigmas}")

    dataset = load_dataset(_input_path(settings, "data"))
    stats = [
        initial_distance_check(dataset.spec, sigma_t, samples, fork(seed, STREAM_SAMPLING, index))
        for index, sigma_t in enumerate(sigmas)
    ]
    for stat in stats:
        if not stat.holds:
            LOGGER.warning(
                "sigma_T=%g: mean squared distance %.6g is not above n sigma_T^2 = %.6g",
                stat.sigma_t,
                stat.mean_dist_sq,
                stat.threshold,
            )
    artifacts.write_json(out, initial_distance_document(stats))


def run_report(settings: Settings) -> None:
    """
    Compare run reports against the first one.
    :param settings: Merged `report` settings.
    :return: None
    """
    out = _str(settings, "out")
    paths = _strs(settings, "inputs")
    for path in paths:
        if not Path(path).is_file():
            raise ConfigInvalid(f"--inputs {path} does not exist")
    reports = [load_report(path) for path in paths]
    artifacts.write_json(out, comparison_document(compare(reports)))
    if settings["csv"] is not None:
        write_long_csv(reports, _str(settings, "csv"))


HANDLERS: Dict[str, Callable[[Settings], None]] = {
    "gen-data": run_gen_data,
    "train-denoiser": run_train_denoiser,
    "train-nlc": run_train_nlc,
    "build-lut": run_build_lut,
    "sample": run_sample,
    "restore": run_restore,
    "eval": run_eval,
    "report": run_report,
}


def execute(argv: Sequence[str]) -> int:
    """
    Run one command.
    :param argv: Arguments without the program name, e.g. `["sample", "--steps", "10", ...]`.
    :return: Process exit status, 0 on success.
    """
    try:
        configure_logging(level_name_from_env())
        namespace = vars(build_parser().parse_args(list(argv)))
        command = str(namespace.pop("command"))
        config_path = namespace.pop("config", None)
        table = None if config_path is None else read_config_table(str(config_path), command)
        settings = merge_settings(command, namespace, table)
        LOGGER.debug("Running %s with %s", command, settings)
        HANDLERS[command](settings)
    except Exception as error:  # pylint: disable=broad-except
        LOGGER.debug("Command failed", exc_info=True)
        print(one_line(error), file=sys.stderr)
        return exit_code(error)
    return 0


def main() -> None:
    """
    Console script entry point.
    :return: None
    """
    sys.exit(execute(sys.argv[1:]))
