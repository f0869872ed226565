"""Exception hierarchy shared by every ssaflsim module"""


class SSAFLError(Exception):
    """Base class for all simulator errors"""


class ConfigError(SSAFLError):
    """Invalid configuration value; `field` is the dotted config path"""

    def __init__(self, field, message):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")

    def within(self, section):
        """Return the same error qualified by a parent section name"""
        return ConfigError(f"{section}.{self.field}", self.message)


# Intent / strategy modeling

class IntentError(SSAFLError):
    """Base class for strategy modeling errors"""


class DSLSyntaxError(IntentError):
    """Strategy text does not match the DSL grammar"""

    def __init__(self, line, column, expected, found=None):
        self.line = line
        self.column = column
        self.expected = sorted(expected or [])
        self.found = found
        detail = f"line {line}, column {column}"
        if found is not None:
            detail += f": unexpected {found!r}"
        if self.expected:
            detail += f"; expected one of {', '.join(self.expected)}"
        super().__init__(detail)


class SemanticError(IntentError):
    """Strategy parses but violates a type invariant"""


class MissingMetric(IntentError):
    """Telemetry sample lacks a reading for a goal metric"""

    def __init__(self, metric):
        self.metric = metric
        super().__init__(f"no reading for metric '{metric}'")


class EmptyWindow(IntentError):
    """No telemetry samples fall inside the strategy window"""


# Similarity scoring and selection

class SimilarityError(SSAFLError):
    """Base class for scoring errors"""


class ZeroThreshold(SimilarityError):
    """Condition similarity needs a non-zero reference threshold"""


class EmptySelection(SimilarityError):
    """No node clears the suitability threshold"""


# Models, training and aggregation

class TrainingError(SSAFLError):
    """Base class for model and aggregation errors"""


class DimensionMismatch(TrainingError):
    """Input row does not match the model input dimension"""


class ArchMismatch(TrainingError):
    """Two models with different architectures were combined"""


class NonFiniteLoss(TrainingError):
    """Loss diverged (non-finite or above the divergence ceiling)"""


class BadWeights(TrainingError):
    """Aggregation weights do not form a probability vector"""


class AllZeroWeights(TrainingError):
    """Every pre-weight in an aggregation window is zero"""


class InfeasibleFloor(TrainingError):
    """w_min times the window size exceeds one"""


class DegenerateTargets(TrainingError):
    """Targets have zero variance, so R2 is undefined"""


# Simulation and diagnostics

class SimulationError(SSAFLError):
    """Base class for simulator errors"""


class BadSpec(ConfigError, SimulationError):
    """Invalid synthetic data specification"""


class NoWindows(SimulationError):
    """Trace holds no aggregation windows"""


class Diverged(SimulationError):
    """Diagnostic run failed to contract"""
