# flake8: noqa

"""All exceptions used by ivbart.
"""


class IvBartException(Exception): ...
class InputError(IvBartException): ...
class InvariantViolation(IvBartException): ...
class RankDeficiencyError(IvBartException): ...
class GenerationError(IvBartException): ...
class ConfigError(IvBartException): ...
class SchemaVersionError(IvBartException): ...
