"""Exception hierarchy shared by every module of the package."""


class CifAlignError(Exception):
    """Base class; ``module`` names the subsystem that raised."""

    module = "cifalign"

    def __str__(self):
        return f"[{self.module}] {super().__str__()}"


class ConfigError(CifAlignError, ValueError):
    module = "config"


# diffcore
class ShapeMismatch(CifAlignError, ValueError):
    module = "diffcore"


class ZeroNormVector(CifAlignError, ValueError):
    module = "diffcore"


class NonFiniteValue(CifAlignError, FloatingPointError):
    module = "diffcore"


class CorruptTensor(CifAlignError, ValueError):
    module = "diffcore"


# cif
class DegenerateWeights(CifAlignError, ValueError):
    module = "cif"


class EmptyOutput(CifAlignError, RuntimeError):
    module = "cif"


# losses
class NonPositiveTemperature(CifAlignError, ValueError):
    module = "losses"


class NonFiniteComponent(CifAlignError, FloatingPointError):
    module = "losses"


class IdOutOfRange(CifAlignError, IndexError):
    module = "losses"


# models
class TooShortInput(CifAlignError, ValueError):
    module = "models"


class DepthOutOfRange(CifAlignError, ValueError):
    module = "models"


class DimensionMismatch(CifAlignError, ValueError):
    module = "models"


class CorruptCheckpoint(CifAlignError, ValueError):
    module = "models"


# synthdata
class CorruptFile(CifAlignError, ValueError):
    module = "synthdata"

    def __init__(self, message, record_index=None):
        super().__init__(message)
        self.record_index = record_index


class BadFractions(CifAlignError, ValueError):
    module = "synthdata"


class IoFailure(CifAlignError, OSError):
    module = "synthdata"


# train
class StepOutOfRange(CifAlignError, ValueError):
    module = "train"


class DivergedLoss(CifAlignError, FloatingPointError):
    module = "train"


# evalmetrics
class CountMismatch(CifAlignError, ValueError):
    module = "evalmetrics"


class EmptyErrors(CifAlignError, ValueError):
    module = "evalmetrics"


class NonSquare(CifAlignError, ValueError):
    module = "evalmetrics"


class DegenerateData(CifAlignError, ValueError):
    module = "evalmetrics"
