"""Exception hierarchy shared by every reenactor workflow.

Each class carries the exit code the command line uses when it escapes a
subcommand.
"""


class ReenactorError(Exception):
    """Base class for all reenactor failures."""

    exit_code = 1


class ConfigError(ReenactorError):
    """Invalid or inconsistent configuration (bad resolution, channel lists...)."""

    exit_code = 1


class DataError(ReenactorError):
    """Problems with images, landmarks or manifests."""

    exit_code = 2


class AlignmentError(DataError):
    """Landmarks too degenerate to fit a similarity transform."""


class ContractError(ReenactorError):
    """A tensor or plugin output violates its shape contract."""

    exit_code = 2


class PluginError(ReenactorError):
    """A named backend, extractor or embedder is unknown or unavailable."""

    exit_code = 1

    def __init__(self, plugin, message=None):
        self.plugin = plugin
        super().__init__(message or f"Plugin '{plugin}' is not available")


class WarpError(DataError):
    """Destination landmarks are collapsed or collinear."""


class EvalError(ReenactorError):
    """Evaluation cannot run (empty pair list, uncalibrated threshold)."""

    exit_code = 2


class NumericError(ReenactorError):
    """A loss term became NaN or infinite during training."""

    exit_code = 3

    def __init__(self, term, diagnostics=None):
        self.term = term
        self.diagnostics = diagnostics or {}
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        super().__init__(f"Non-finite loss term '{term}' ({details})")
