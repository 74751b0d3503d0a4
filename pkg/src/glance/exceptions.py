"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class GlanceError(Exception):
    exit_code = 1


class ConfigError(GlanceError, ValueError):
    exit_code = 2


class GraphError(ConfigError):
    """Malformed graph input (bad ids, labels, feature dimensions)."""


class MissingArtifactError(GlanceError, FileNotFoundError):
    exit_code = 3


class ArtifactHashError(GlanceError):
    """A checkpoint on disk no longer matches the hash pinned in a manifest."""

    exit_code = 3


class ProviderError(GlanceError):
    """Embedding provider failure. ``prompt_hash`` identifies the first failing prompt."""

    exit_code = 4

    def __init__(self, message, prompt_hash=None, retryable=True):
        super().__init__(message)
        self.prompt_hash = prompt_hash
        self.retryable = retryable


class DivergenceError(GlanceError, FloatingPointError):
    exit_code = 5

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
