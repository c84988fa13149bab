from ivbart.streams.stream import DrawSink, DrawSource  # noqa: F401
from ivbart.streams.file import FileInput, FileOutput, read_stamp, read_table, write_table  # noqa: F401
