"""Draw streams: one header object followed by the draw records of a fit."""

import abc
from typing import Iterator


class DrawSink(metaclass=abc.ABCMeta):
    """Destination of a fit's header and draw records; closed on leaving a ``with`` block."""

    @classmethod
    def __subclasshook__(cls, subclass):
        if cls is not DrawSink:
            return NotImplemented
        return all(callable(getattr(subclass, name, None)) for name in ("write_header", "write")) or NotImplemented

    @abc.abstractmethod
    def write_header(self, header: dict):
        raise NotImplementedError

    @abc.abstractmethod
    def write(self, record: dict):
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class DrawSource(metaclass=abc.ABCMeta):
    """Header and draw records of an earlier fit."""

    @classmethod
    def __subclasshook__(cls, subclass):
        if cls is not DrawSource:
            return NotImplemented
        return all(callable(getattr(subclass, name, None)) for name in ("__iter__", "read")) or NotImplemented

    @abc.abstractmethod
    def __iter__(self) -> Iterator[dict]:
        raise NotImplementedError

    def read(self) -> list[dict]:
        return list(self)
