import json

import pandas as pd
import pytest

from ivbart import SCHEMA_VERSION
from ivbart.exceptions import InputError, SchemaVersionError
from ivbart.streams import DrawSink, DrawSource, FileInput, FileOutput, read_stamp, read_table, write_table


def test_file_stream(tmp_path):
    path = tmp_path / "draws" / "draws.jsonl"
    with FileOutput(path) as stream:
        with pytest.raises(InputError):
            stream.write({"chain": 0})
        stream.write_header({"seed": 3, "config_hash": "abc"})
        stream.write({"chain": 0, "iteration": 1, "pd": [[0.1, 0.2]]})
        stream.write({"chain": 1, "iteration": 1, "pd": [[0.3, 0.4]]})
        with pytest.raises(InputError):
            stream.write_header({})
    assert stream.count == 2

    first = path.read_text(encoding="utf-8").splitlines()[0]
    assert json.loads(first) == {"config_hash": "abc", "schema": SCHEMA_VERSION, "seed": 3}

    draws = FileInput(path)
    assert draws.header["seed"] == 3
    records = draws.read()
    assert [r["chain"] for r in records] == [0, 1]
    assert records[1]["pd"] == [[0.3, 0.4]]


@pytest.mark.parametrize("first_line", [
    '{"schema": "ivbart/0"}',
    '{"seed": 1}',
    '[1, 2]',
])
def test_schema_mismatch(tmp_path, first_line):
    path = tmp_path / "old.jsonl"
    path.write_text(first_line + "\n", encoding="utf-8")
    with pytest.raises(SchemaVersionError):
        FileInput(path)


def test_not_a_draw_file(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("y,t\n1,2\n", encoding="utf-8")
    with pytest.raises(InputError):
        FileInput(path)


def test_stream_subclasshook():
    class Sink:
        def write_header(self, header):
            pass

        def write(self, record):
            pass

    class RecordsOnly:
        def write(self, record):
            pass

    class Source:
        def __iter__(self):
            return iter([])

        def read(self):
            return []

    assert issubclass(Sink, DrawSink)
    assert not issubclass(RecordsOnly, DrawSink)
    assert not issubclass(Sink, DrawSource)
    assert issubclass(Source, DrawSource)
    assert not issubclass(list, DrawSource)


def test_sink_closes_on_exit(tmp_path):
    class Recorder(DrawSink):
        def __init__(self):
            self.header, self.records, self.closed = None, [], False

        def write_header(self, header):
            self.header = header

        def write(self, record):
            self.records.append(record)

        def close(self):
            self.closed = True

    with Recorder() as sink:
        sink.write_header({"seed": 1})
        sink.write({"iteration": 0})
    assert sink.closed
    assert sink.records == [{"iteration": 0}]

    with FileOutput(tmp_path / "draws.jsonl") as stream:
        stream.write_header({"seed": 1})
    with pytest.raises(InputError):
        stream.write({"iteration": 0})


def test_stamped_table(tmp_path):
    frame = pd.DataFrame({"profile": ["x1=-0.5", "x1=+0.5"], "mean": [0.1 + 0.2, 1.0 / 3.0]})
    path = write_table(frame, tmp_path / "table.csv", {"schema": SCHEMA_VERSION, "seed": 4})
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[:3] == [f"# schema={SCHEMA_VERSION}", "# seed=4", "profile,mean"]

    read, stamp = read_table(path)
    assert stamp == {"schema": SCHEMA_VERSION, "seed": "4"}
    assert read["profile"].tolist() == ["x1=-0.5", "x1=+0.5"]
    assert read["mean"].tolist() == [0.1 + 0.2, 1.0 / 3.0]


def test_hash_inside_cells_survives(tmp_path):
    frame = pd.DataFrame({"profile": ["sex#1", "#2"], "mean": [0.5, 1.5]})
    path = write_table(frame, tmp_path / "table.csv", {"seed": 4})
    read, stamp = read_table(path)
    assert stamp == {"seed": "4"}
    assert read["profile"].tolist() == ["sex#1", "#2"]
    assert read_stamp(path) == ({"seed": "4"}, 1)

    with pytest.raises(InputError):
        read_stamp(tmp_path / "missing.csv")
