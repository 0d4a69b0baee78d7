"""Exception hierarchy.

Every error class carries an ``exit_code`` so the command-line layer can map
failures to a stable, scriptable status without string matching.
"""


class PsrnnError(Exception):
    exit_code = 1


class DimensionMismatch(PsrnnError, ValueError):
    exit_code = 10


class SingularUpdate(PsrnnError, ArithmeticError):
    exit_code = 11


class NumericalFailure(PsrnnError, ArithmeticError):
    exit_code = 12


class NormalizationUnderflow(PsrnnError, ArithmeticError):
    exit_code = 13


class SingularNormalizer(PsrnnError, ArithmeticError):
    exit_code = 14


class NonFiniteGradient(PsrnnError, ArithmeticError):
    exit_code = 15

    def __init__(self, parameter, step=None):
        self.parameter = parameter
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite gradient for {parameter!r}{where}")


class EmptyData(PsrnnError, ValueError):
    exit_code = 20


class DegenerateSample(PsrnnError, ValueError):
    exit_code = 21


class SequenceTooShort(PsrnnError, ValueError):
    exit_code = 22


class ZeroProbabilityObservation(PsrnnError, ValueError):
    exit_code = 23


class IoError(PsrnnError, OSError):
    exit_code = 30


class EmptyCorpus(PsrnnError, ValueError):
    exit_code = 31


class RaggedRows(PsrnnError, ValueError):
    exit_code = 32


class NonNumeric(PsrnnError, ValueError):
    exit_code = 33


class ModelFormatError(PsrnnError, ValueError):
    """Bad magic, unsupported version, or corrupted payload in a model file."""

    exit_code = 40


class ConfigError(PsrnnError, ValueError):
    exit_code = 41


class RankWarning(UserWarning):
    """Moment matrix has fewer samples than feature dimensions."""


class RankDeficient(UserWarning):
    """Projection asked for more directions than the data supports."""
