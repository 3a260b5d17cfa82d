"""Exception hierarchy. The CLI maps the three branches to exit codes:
config errors -> 2, data errors -> 3, numeric failures -> 4.
"""


class VolreconError(Exception):
    pass


class ConfigError(VolreconError):
    pass


class DataError(VolreconError):
    pass


class NumericError(VolreconError):
    pass


# -- configuration ----------------------------------------------------------

class ConfigInvalid(ConfigError):
    pass


# -- data / geometry --------------------------------------------------------

class GeometryOutOfBounds(DataError):
    pass


class DimsMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class EmptyDataset(DataError):
    pass


class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class SampleSetMismatch(DataError):
    pass


class IncompatibleCheckpoint(DataError):
    pass


class ModelInputDimsMismatch(DataError):
    pass


class WindowTooLarge(DataError):
    pass


class EmptyMesh(DataError):
    pass


class EmptyCodebook(DataError):
    pass


# -- numerics ---------------------------------------------------------------

class SingularAffine(NumericError):
    pass


class NonFiniteParams(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


class RankDeficient(NumericError):
    pass
