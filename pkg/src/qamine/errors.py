"""Shared exception types."""


class PipelineError(Exception):
    """Base class for stage-level failures."""


class ConfigError(PipelineError):
    """Invalid configuration; maps to exit code 2 in the CLI."""


class IntegrityError(PipelineError):
    """Cross-stage referential integrity violated (duplicate or missing ids)."""


class StaleCheckpointError(PipelineError):
    """Resume attempted against a checkpoint whose inputs have changed."""
