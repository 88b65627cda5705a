"""Exception hierarchy shared across the package."""


class AgeIfrError(Exception):
    """Base class for all package errors."""


# -- data ingest ------------------------------------------------------------

class DataError(AgeIfrError):
    """Malformed input data.  Carries the file, row and rule when known."""

    def __init__(self, message, file=None, row=None, rule=None):
        self.file = file
        self.row = row
        self.rule = rule
        where = []
        if file is not None:
            where.append(str(file))
        if row is not None:
            where.append(f"row {row}")
        prefix = f"{':'.join(where)}: " if where else ""
        suffix = f" [{rule}]" if rule else ""
        super().__init__(f"{prefix}{message}{suffix}")


class MissingFile(DataError):
    pass


class SchemaViolation(DataError):
    pass


class ReferentialIntegrity(DataError):
    pass


class BinOverlap(DataError):
    pass


class CountViolation(DataError):
    pass


# -- age density ------------------------------------------------------------

class DensityError(AgeIfrError):
    pass


class NonNormalized(DensityError):
    pass


class ZeroNationalMass(DensityError):
    pass


class DegenerateFit(DensityError):
    pass


class EmptyBin(DensityError):
    pass


class ZeroMassBin(DensityError):
    pass


# -- model / sampler ----------------------------------------------------------

class ConfigError(AgeIfrError):
    """Invalid model, sampler or run configuration.  ``field`` names the key."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class NonFinite(AgeIfrError):
    """A log-density term evaluated to a non-finite value."""

    def __init__(self, term, value):
        self.term = term
        self.value = value
        super().__init__(f"log-density term {term!r} is {value}")


class InitializationFailure(AgeIfrError):
    pass


class AllDivergent(AgeIfrError):
    pass


class InsufficientChains(AgeIfrError):
    pass


# -- diagnostics / summaries --------------------------------------------------

class ZeroVariance(AgeIfrError):
    pass


class NoDraws(AgeIfrError):
    pass


class InsufficientDraws(AgeIfrError):
    pass


class ZeroInfections(AgeIfrError):
    pass


class DegenerateTest(AgeIfrError):
    pass


class ZeroPrevalence(AgeIfrError):
    pass
