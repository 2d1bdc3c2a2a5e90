"""
The command line surface: option merging, error reporting and a tiny end to end pipeline.
"""

import json
import os
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import pytest
from _pytest.capture import CaptureFixture
from pytest_mock import MockerFixture

from nlc_lab import cli
from nlc_lab.constrained import coordinate_mask_operator
from nlc_lab.errors import EXIT_CONFIG, EXIT_IO, ConfigInvalid
from nlc_lab.manifold import load_dataset
from test.assets import ASSETS_DIRECTORY_PATH

SAMPLE_CONFIG = os.path.join(ASSETS_DIRECTORY_PATH, "sample.toml")
BAD_KEY_CONFIG = os.path.join(ASSETS_DIRECTORY_PATH, "bad_key.toml")

TINY_TRAINING = ["--iterations", "20", "--report-interval", "10", "--hidden", "16"]

# Input flags each command needs, in the order they are passed.
COMMAND_INPUTS: Dict[str, Tuple[str, ...]] = {
    "gen-data": (),
    "train-denoiser": ("--data",),
    "train-nlc": ("--data", "--denoiser"),
    "build-lut": ("--data", "--denoiser", "--corrector"),
    "sample": ("--data", "--denoiser"),
    "restore": ("--data", "--denoiser"),
    "eval": ("--data",),
}


def _gen_data(directory: Path) -> str:
    path = str(directory / "data.nlcd")
    argv = ["gen-data", "--n", "8", "--count", "200", "--seed", "1", "--out", path]
    assert cli.execute(argv) == 0
    return path


def _train(directory: Path, data: str) -> Tuple[str, str]:
    denoiser = str(directory / "denoiser.nlcn")
    corrector = str(directory / "corrector.nlcn")
    assert cli.execute(["train-denoiser", "--data", data, "--out", denoiser] + TINY_TRAINING) == 0
    assert (
        cli.execute(
            ["train-nlc", "--data", data, "--denoiser", denoiser, "--out", corrector]
            + TINY_TRAINING
        )
        == 0
    )
    return denoiser, corrector


def test_gen_data(tmp_path: Path) -> None:
    """
    :param tmp_path: Fixture.
    :return: None
    """
    dataset = load_dataset(_gen_data(tmp_path))
    assert dataset.points.shape == (200, 8)
    assert (dataset.spec.n, dataset.spec.d, dataset.spec.m) == (8, 1, 4)


def test_gen_data_is_reproducible(tmp_path: Path) -> None:
    """
    :param tmp_path: Fixture.
    :return: None
    """
    first = tmp_path / "first"
    second = tmp_path / "second"
    first.mkdir()
    second.mkdir()
    _gen_data(first)
    _gen_data(second)
    assert (first / "data.nlcd").read_bytes() == (second / "data.nlcd").read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        ["gen-data", "--bogus", "1"],
        ["gen-data", "--n", "ten"],
        ["sample", "--nlc", "sometimes"],
        ["frobnicate"],
        [],
    ],
)
def test_bad_arguments(tmp_path: Path, capsys: CaptureFixture[str], argv: List[str]) -> None:
    """
    Parse failures exit with 2, print one error line and write nothing.
    :param tmp_path: Fixture.
    :param capsys: Fixture.
    :param argv: Arguments to parse.
    :return: None
    """
    out = tmp_path / "out.nlcd"
    extra = ["--out", str(out)] if argv else []
    assert cli.execute(argv + extra) == EXIT_CONFIG
    assert not out.exists()
    assert capsys.readouterr().err.strip().splitlines()[-1].startswith(
        "error kind=ConfigInvalid message="
    )


def test_missing_required_option(capsys: CaptureFixture[str]) -> None:
    """
    :param capsys: Fixture.
    :return: None
    """
    assert cli.execute(["gen-data", "--n", "3"]) == EXIT_CONFIG
    assert capsys.readouterr().err.strip().endswith("message=--out is required")


def test_missing_input_file(tmp_path: Path, capsys: CaptureFixture[str]) -> None:
    """
    :param tmp_path: Fixture.
    :param capsys: Fixture.
    :return: None
    """
    missing = tmp_path / "nowhere.nlcd"
    argv = ["sample", "--data", str(missing), "--out", str(tmp_path / "x.csv")]
    assert cli.execute(argv) == EXIT_CONFIG
    assert str(missing) in capsys.readouterr().err


def test_corrupt_input_file(tmp_path: Path, capsys: CaptureFixture[str]) -> None:
    """
    A damaged dataset is an IO failure with exit status 3.
    :param tmp_path: Fixture.
    :param capsys: Fixture.
    :return: None
    """
    data = Path(_gen_data(tmp_path))
    data.write_bytes(data.read_bytes()[:20])
    argv = ["eval", "--data", str(data), "--out", str(tmp_path / "eval.json")]
    assert cli.execute(argv) == EXIT_IO
    assert "error kind=CorruptPayload" in capsys.readouterr().err


@pytest.fixture(name="trained_inputs", scope="module")
def fixture_trained_inputs(tmp_path_factory: pytest.TempPathFactory) -> Dict[str, str]:
    """
    :param tmp_path_factory: Fixture.
    :return: Input flags of a valid dataset and both networks.
    """
    directory = tmp_path_factory.mktemp("inputs")
    data = _gen_data(directory)
    denoiser, corrector = _train(directory, data)
    return {"--data": data, "--denoiser": denoiser, "--corrector": corrector}


@pytest.mark.parametrize(
    "argv,fragment",
    [
        (["gen-data", "--n", "1", "--d", "1"], "d + 1 <= n"),
        (["gen-data", "--count", "0"], "--count must be at least 1"),
        (["train-denoiser", "--lr", "0"], "lr must be positive"),
        (["train-nlc", "--delta", "1.0"], "delta must be in [0, 1)"),
        (["build-lut", "--bins", "0"], "--bins must be at least 1"),
        (["sample", "--steps", "1"], "steps"),
        (["sample", "--eta", "2"], "eta must be in [0, 1]"),
        (["sample", "--algo", "edm-euler", "--normalize", "on"], "does not normalize"),
        (["sample", "--jobs", "0"], "--jobs must be at least 1"),
        (["restore", "--eta", "1.5"], "--eta must be in [0, 1]"),
        (["restore", "--method", "iterproj", "--alpha", "1.0"], "alpha must be in (0, 1)"),
        (["restore", "--method", "iterproj", "--iter-eta", "1.5"], "eta must be in [0, 1]"),
        (["restore", "--schedule", "edm", "--sigma-min", "5", "--sigma-max", "1"], "sigma_min"),
        (["eval", "--samples", "50"], "--samples must be at least 100"),
    ],
)
def test_out_of_range_settings(
    tmp_path: Path,
    capsys: CaptureFixture[str],
    trained_inputs: Dict[str, str],
    argv: List[str],
    fragment: str,
) -> None:
    """
    Values the modules reject are configuration errors: exit 2, one error line and no files, even
    when every input is valid.
    :param tmp_path: Fixture.
    :param capsys: Fixture.
    :param trained_inputs: Fixture.
    :param argv: Command and the offending options.
    :param fragment: Part of the expected message.
    :return: None
    """
    out = tmp_path / "out"
    operator_out = tmp_path / "operator.nlcm"
    inputs = [part for flag in COMMAND_INPUTS[argv[0]] for part in (flag, trained_inputs[flag])]
    extra = ["--operator-out", str(operator_out)] if argv[0] == "restore" else []
    assert cli.execute(argv + inputs + extra + ["--out", str(out)]) == EXIT_CONFIG
    assert sorted(tmp_path.iterdir()) == []
    last = capsys.readouterr().err.strip().splitlines()[-1]
    assert last.startswith("error kind=ConfigInvalid message=")
    assert fragment in last


def test_merge_settings_precedence() -> None:
    """
    defaults < config table < flags.
    :return: None
    """
    table = cli.read_config_table(SAMPLE_CONFIG, "sample")
    settings = cli.merge_settings("sample", {"count": 2}, table)
    assert settings["count"] == 2
    assert settings["steps"] == 5
    assert settings["seed"] == 9
    assert settings["nlc"] == "off"
    assert settings["schedule"] == "ddpm"
    assert cli.read_config_table(SAMPLE_CONFIG, "restore") == {}


def test_merge_settings_types() -> None:
    """
    Integers are accepted for float options, everything else must match its kind.
    :return: None
    """
    settings = cli.merge_settings("restore", {}, {"alpha": 1, "observe": "dataset"})
    assert settings["alpha"] == 1.0 and isinstance(settings["alpha"], float)
    with pytest.raises(ConfigInvalid):
        cli.merge_settings("sample", {}, {"steps": "five"})
    with pytest.raises(ConfigInvalid):
        cli.merge_settings("sample", {}, {"steps": True})
    with pytest.raises(ConfigInvalid):
        cli.merge_settings("restore", {}, {"observe": "everything"})
    misspelled = cli.read_config_table(BAD_KEY_CONFIG, "sample")
    with pytest.raises(ConfigInvalid):
        cli.merge_settings("sample", {}, misspelled)


def test_bad_config_files(tmp_path: Path, capsys: CaptureFixture[str]) -> None:
    """
    :param tmp_path: Fixture.
    :param capsys: Fixture.
    :return: None
    """
    broken = tmp_path / "broken.toml"
    broken.write_text("[sample\nsteps = ")
    for config in (BAD_KEY_CONFIG, str(broken), str(tmp_path / "absent.toml")):
        assert cli.execute(["sample", "--config", config]) == EXIT_CONFIG
    assert capsys.readouterr().err.count("error kind=ConfigInvalid") == 3


def test_log_level_from_env(monkeypatch: pytest.MonkeyPatch, capsys: CaptureFixture[str]) -> None:
    """
    :param monkeypatch: Fixture.
    :param capsys: Fixture.
    :return: None
    """
    monkeypatch.setenv("NLC_LOG", "chatty")
    assert cli.execute(["gen-data"]) == EXIT_CONFIG
    assert "NLC_LOG" in capsys.readouterr().err


def test_main_exits_with_status(mocker: MockerFixture) -> None:
    """
    :param mocker: Fixture.
    :return: None
    """
    mocker.patch.object(cli.sys, "argv", ["nlc-lab", "gen-data"])
    with pytest.raises(SystemExit) as info:
        cli.main()
    assert info.value.code == EXIT_CONFIG


def test_observations_for(tmp_path: Path) -> None:
    """
    :param tmp_path: Fixture.
    :return: None
    """
    dataset = load_dataset(_gen_data(tmp_path))
    op = coordinate_mask_operator([0, 3], 8)
    zero = cli.observations_for(op, dataset, cli.OBSERVE_ZERO, 5)
    np.testing.assert_array_equal(zero, np.zeros((1, 2)))
    measured = cli.observations_for(op, dataset, cli.OBSERVE_DATASET, 5)
    np.testing.assert_array_equal(measured, dataset.points[:5][:, [0, 3]])


def test_pipeline(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    """
    gen-data, both trainings, build-lut, sample with every correction mode, both restorations,
    eval and report, on a problem small enough to finish in seconds.
    :param tmp_path: Fixture.
    :param monkeypatch: Fixture.
    :return: None
    """
    monkeypatch.setenv("NLC_LOG", "quiet")
    data = _gen_data(tmp_path)
    denoiser, corrector = _train(tmp_path, data)
    train_report = json.loads(Path(denoiser + ".report.json").read_text())
    assert len(train_report["losses"]) == 2

    lut = str(tmp_path / "lut.json")
    common = ["--data", data, "--denoiser", denoiser, "--steps", "5", "--count", "3"]
    argv = ["build-lut", "--corrector", corrector, "--bins", "4", "--out", lut]
    assert cli.execute(argv + common) == 0

    reports: List[str] = []
    modes: List[Tuple[str, List[str]]] = [
        ("off", []),
        ("network", ["--corrector", corrector]),
        ("lut", ["--lut", lut]),
    ]
    for mode, extra in modes:
        out = str(tmp_path / f"sample-{mode}.csv")
        report = str(tmp_path / f"sample-{mode}.json")
        argv = ["sample", "--nlc", mode, "--out", out, "--report", report] + common + extra
        assert cli.execute(argv) == 0
        assert len(Path(out).read_text().splitlines()) == 1 + 3 * 6
        reports.append(report)
    assert json.loads(Path(reports[1]).read_text())["label"] == "ddim-nlc"
    assert json.loads(Path(reports[2]).read_text())["label"] == "ddim-lt-nlc"

    operator = str(tmp_path / "op.nlcm")
    ddnm = ["restore", "--operator-out", operator, "--observe", "dataset"] + common
    assert cli.execute(ddnm + ["--out", str(tmp_path / "ddnm.csv")]) == 0
    assert Path(operator).exists() and Path(operator + ".json").exists()
    iterproj = ["restore", "--method", "iterproj", "--operator", operator, "--k-max", "10"]
    iterproj += ["--report", str(tmp_path / "iterproj.json"), "--out", str(tmp_path / "ip.csv")]
    assert cli.execute(iterproj + common) == 0
    assert json.loads((tmp_path / "iterproj.json").read_text())["label"] == "iterproj"

    evaluation = tmp_path / "eval.json"
    argv = ["eval", "--config", SAMPLE_CONFIG, "--data", data, "--out", str(evaluation)]
    assert cli.execute(argv) == 0
    checks = json.loads(evaluation.read_text())["checks"]
    assert [check["sigma_t"] for check in checks] == [5.0]
    assert checks[0]["num_samples"] == 100

    comparison = tmp_path / "comparison.json"
    long_csv = tmp_path / "long.csv"
    argv = ["report", "--inputs"] + reports + ["--out", str(comparison), "--csv", str(long_csv)]
    assert cli.execute(argv) == 0
    document = json.loads(comparison.read_text())
    assert document["labels"] == ["ddim", "ddim-nlc", "ddim-lt-nlc"]
    assert long_csv.read_text().startswith("method,step,metric,mean,std\n")


def test_sample_is_reproducible(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    """
    Same seed, same bytes, whatever the worker count. The config file supplies the seed and
    count, a flag overrides the count.
    :param tmp_path: Fixture.
    :param monkeypatch: Fixture.
    :return: None
    """
    monkeypatch.setenv("NLC_LOG", "quiet")
    data = _gen_data(tmp_path)
    denoiser, _ = _train(tmp_path, data)
    outputs = []
    for name, jobs in (("a", "1"), ("b", "1"), ("c", "2")):
        out = tmp_path / f"{name}.csv"
        argv = ["sample", "--config", SAMPLE_CONFIG, "--data", data, "--denoiser", denoiser]
        assert cli.execute(argv + ["--count", "2", "--jobs", jobs, "--out", str(out)]) == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1] == outputs[2]
    assert len(outputs[0].decode().splitlines()) == 1 + 2 * 6
    assert outputs[0].decode().splitlines()[1].startswith("0,0,")


def test_commands_are_reproducible(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    """
    Running the whole pipeline a second time rewrites every file with the same bytes.
    :param tmp_path: Fixture.
    :param monkeypatch: Fixture.
    :return: None
    """
    monkeypatch.setenv("NLC_LOG", "quiet")
    data = str(tmp_path / "data.nlcd")
    denoiser = str(tmp_path / "denoiser.nlcn")
    corrector = str(tmp_path / "corrector.nlcn")
    lut = str(tmp_path / "lut.json")
    common = ["--data", data, "--denoiser", denoiser, "--steps", "5", "--count", "2"]
    sample = ["sample", "--nlc", "lut", "--lut", lut, "--report", str(tmp_path / "s.json")]
    restore = ["restore", "--nlc", "network", "--corrector", corrector, "--method", "iterproj"]
    restore += ["--report", str(tmp_path / "r.json")]
    commands = [
        ["gen-data", "--n", "6", "--count", "100", "--out", data],
        ["train-denoiser", "--data", data, "--out", denoiser] + TINY_TRAINING,
        ["train-nlc", "--data", data, "--denoiser", denoiser, "--out", corrector] + TINY_TRAINING,
        ["build-lut", "--corrector", corrector, "--bins", "3", "--out", lut] + common,
        sample + ["--out", str(tmp_path / "s.csv")] + common,
        restore + ["--k-max", "5", "--out", str(tmp_path / "r.csv")] + common,
        ["eval", "--data", data, "--samples", "100", "--out", str(tmp_path / "e.json")],
    ]
    snapshots: List[Dict[str, bytes]] = []
    for _ in range(2):
        for argv in commands:
            assert cli.execute(argv) == 0, argv
        snapshots.append({path.name: path.read_bytes() for path in sorted(tmp_path.iterdir())})
    assert snapshots[0] == snapshots[1]
    assert len(snapshots[0]) >= 10
