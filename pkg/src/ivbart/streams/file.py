"""JSON-lines draw files and stamped CSV tables.

A draw file starts with a header object carrying the schema tag, the master
seed and the config hash; every following line is one draw record. A table
starts with ``# key=value`` stamp lines followed by plain CSV.
"""

import json
from pathlib import Path

import pandas as pd

from ivbart import SCHEMA_VERSION
from ivbart.exceptions import InputError, SchemaVersionError
from ivbart.streams.stream import DrawSink, DrawSource


class FileOutput(DrawSink):
    def __init__(self, path):
        self._path = Path(path)
        self._file = None
        self.count = 0

    def write_header(self, header: dict):
        if self._file is not None:
            raise InputError(f"Header of {self._path} already written")
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self._path, 'w', encoding='utf-8', newline='\n')  # pylint: disable=consider-using-with
        self._file.write(json.dumps({"schema": SCHEMA_VERSION, **header}, sort_keys=True) + "\n")

    def write(self, record: dict):
        if self._file is None:
            raise InputError("write_header must be called before writing records")
        self._file.write(json.dumps(record, sort_keys=True) + "\n")
        self.count += 1

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None


class FileInput(DrawSource):
    def __init__(self, path):
        self._input = Path(path)
        self.header = self._read_header()

    def _read_header(self) -> dict:
        try:
            with open(self._input, encoding='utf-8') as f:
                line = f.readline()
        except OSError as e:
            raise InputError(f"Cannot read {self._input}: {e}") from e
        try:
            header = json.loads(line)
        except json.JSONDecodeError as e:
            raise InputError(f"{self._input} is not a draw file") from e
        schema = header.get("schema") if isinstance(header, dict) else None
        if schema != SCHEMA_VERSION:
            raise SchemaVersionError(f"{self._input} has schema {schema!r}, expected {SCHEMA_VERSION!r}")
        return header

    def __iter__(self):
        with open(self._input, encoding='utf-8') as f:
            f.readline()
            for line in f:
                if line.strip():
                    yield json.loads(line)


def write_table(frame: pd.DataFrame, path, stamp: dict) -> Path:
    """Write a CSV preceded by ``# key=value`` comment lines.

    Floats are written with 17 significant digits, so reading back is lossless.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        for key, value in stamp.items():
            f.write(f"# {key}={value}\n")
        frame.to_csv(f, index=False, float_format="%.17g", lineterminator="\n")
    return path


def read_stamp(path) -> tuple[dict, int]:
    """Parse the leading ``#`` lines of a table.

    Only the lines before the header row are stamp lines; a ``#`` further down
    is ordinary cell content.

    Raises:
        InputError: when the file cannot be read

    Returns:
        the ``key=value`` pairs and the number of stamp lines
    """
    stamp, count = {}, 0
    try:
        with open(path, encoding='utf-8') as f:
            for line in f:
                if not line.startswith("#"):
                    break
                count += 1
                key, sep, value = line[1:].strip().partition("=")
                if sep:
                    stamp[key.strip()] = value
    except OSError as e:
        raise InputError(f"Cannot read {path}: {e}") from e
    return stamp, count


def read_table(path) -> tuple[pd.DataFrame, dict]:
    """Read a CSV written by write_table; returns the frame and the stamp."""
    stamp, skip = read_stamp(path)
    return pd.read_csv(path, skiprows=skip, float_precision="round_trip"), stamp
