"""Exception types shared across stages; the CLI maps them to exit codes."""


class NumericalError(RuntimeError):
    """A loss or parameter became non-finite."""


class CheckpointError(ValueError):
    """A binary artifact is truncated, corrupt or of the wrong version."""


class ConfigError(ValueError):
    """Invalid configuration key or value."""


class MissingArtifactError(RuntimeError):
    def __init__(self, stage: str, path):
        super().__init__(f"stage '{stage}' has not been run (expected {path})")
        self.stage = stage


class StaleArtifactError(RuntimeError):
    pass
