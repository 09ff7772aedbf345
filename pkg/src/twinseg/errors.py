"""Exception types shared across the package."""


class ConfigError(Exception):
    """Invalid configuration file, preset name, or override key/value."""


class DataError(Exception):
    """Dataset layout or content problem (missing files, bad masks)."""


class CheckpointError(Exception):
    """Unreadable or corrupted checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version does not match this build."""

    def __init__(self, found: str, expected: str):
        super().__init__(
            f"checkpoint version {found!r} does not match expected {expected!r}"
        )
        self.found = found
        self.expected = expected


class DimensionError(ValueError):
    """Input shape incompatible with the encoder stride contract."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; message carries per-term values."""
