# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.
"""Exception hierarchy shared by every echodex module."""


class EchodexError(Exception):
    """Base class for all echodex errors."""

    def __init__(self, message: str = "echodex error"):
        self.message = message
        super().__init__(self.message)


class ConfigurationError(EchodexError):
    """Raised when network, region or experiment configuration is inconsistent."""

    def __init__(self, message: str = "inconsistent configuration"):
        super().__init__(message)


class InputWindowError(EchodexError):
    """Raised when a computation reads outside the stored window of an input sequence."""

    def __init__(self, message: str = "input window exhausted"):
        super().__init__(message)


class GeneratorError(EchodexError):
    """Raised when an input generator receives invalid parameters."""


class CertificationError(EchodexError):
    """Raised when a certifier cannot be evaluated on its inputs."""


class EstimationError(EchodexError):
    """Raised when ensemble-based estimation cannot run."""


class SeparatrixError(EstimationError):
    """Raised when a basin boundary cannot be bracketed."""


class TrainingError(EchodexError):
    """Raised when reservoir initialisation or readout training fails."""


class PresetError(EchodexError):
    """Raised when an experiment preset is unknown or misconfigured."""
