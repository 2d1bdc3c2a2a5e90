"""
Writing files to disk. Everything goes through a temp file + rename so a crashed command never
leaves half an artifact behind, and JSON/CSV are rendered deterministically so that two runs with
the same seed produce byte-identical files.
"""

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Union

from nlc_lab.errors import IoFailure

# Values that can appear in a JSON artifact.
JsonValue = Union[None, bool, int, float, str, List["JsonValue"], Dict[str, "JsonValue"]]

CsvCell = Union[int, float, str]


def atomic_write_bytes(path: Union[str, Path], payload: bytes) -> None:
    """
    Write `payload` to `path`, all or nothing.
    :param path: Destination.
    :param payload: Bytes to write.
    :return: None
    """
    destination = Path(path)
    directory = destination.parent if str(destination.parent) else Path(".")
    try:
        directory.mkdir(parents=True, exist_ok=True)
        handle, temp_name = tempfile.mkstemp(
            prefix=f".{destination.name}.", suffix=".tmp", dir=str(directory)
        )
        try:
            with os.fdopen(handle, "wb") as f:
                f.write(payload)
            os.replace(temp_name, destination)
        except BaseException:
            if os.path.exists(temp_name):
                os.remove(temp_name)
            raise
    except OSError as e:
        raise IoFailure(f"could not write {destination}: {e}") from e


def atomic_write_text(path: Union[str, Path], text: str) -> None:
    """
    Text flavor of `atomic_write_bytes`, always utf-8 with unix newlines.
    :param path: Destination.
    :param text: Contents.
    :return: None
    """
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(value: JsonValue) -> str:
    """
    The one JSON rendering used for every artifact.
    :param value: Document.
    :return: Sorted-key, indented JSON with a trailing newline.
    """
    return json.dumps(value, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: Union[str, Path], value: JsonValue) -> None:
    """
    Atomically write a JSON document.
    :param path: Destination.
    :param value: Document.
    :return: None
    """
    atomic_write_text(path, dumps_json(value))


def read_json(path: Union[str, Path]) -> JsonValue:
    """
    Read a JSON document, converting OS errors into `IoFailure`.
    :param path: Source.
    :return: Parsed document.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            value: JsonValue = json.load(f)
    except OSError as e:
        raise IoFailure(f"could not read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise IoFailure(f"{path} is not valid JSON: {e}") from e
    return value


def read_bytes(path: Union[str, Path]) -> bytes:
    """
    Read a whole binary file, converting OS errors into `IoFailure`.
    :param path: Source.
    :return: File contents.
    """
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise IoFailure(f"could not read {path}: {e}") from e


def finite_or_none(value: float) -> JsonValue:
    """
    JSON has no NaN, missing values are written as null.
    :param value: Float to convert.
    :return: The float, or None if it isn't finite.
    """
    as_float = float(value)
    if as_float != as_float or as_float in (float("inf"), float("-inf")):
        return None
    return as_float


def format_cell(cell: CsvCell) -> str:
    """
    Floats are written with `repr` so they survive a round trip exactly.
    :param cell: Value to render.
    :return: CSV cell text.
    """
    if isinstance(cell, float):
        return repr(cell)
    return str(cell)


def render_csv(header: Sequence[str], rows: Sequence[Sequence[CsvCell]]) -> str:
    """
    Render a table as CSV text.
    :param header: Column names.
    :param rows: Table body.
    :return: CSV with `\\n` line endings.
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_cell(cell) for cell in row])
    return buffer.getvalue()


def write_csv(
    path: Union[str, Path], header: Sequence[str], rows: Sequence[Sequence[CsvCell]]
) -> None:
    """
    Atomically write a CSV table.
    :param path: Destination.
    :param header: Column names.
    :param rows: Table body.
    :return: None
    """
    atomic_write_text(path, render_csv(header, rows))


def json_mapping(value: JsonValue, what: str) -> Mapping[str, JsonValue]:
    """
    Narrow a parsed JSON value to an object, raising `IoFailure` for anything else.
    :param value: Parsed JSON.
    :param what: Used in the error message.
    :return: The value as a mapping.
    """
    if not isinstance(value, dict):
        raise IoFailure(f"{what} must be a JSON object")
    return value
