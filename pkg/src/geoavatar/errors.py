"""Exception hierarchy shared across the toolkit."""


class GeoAvatarError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(GeoAvatarError, ValueError):
    """Invalid configuration or parameter combination."""


class DataError(GeoAvatarError, ValueError):
    """Input data violates a precondition."""


class InsufficientDataError(DataError):
    pass


class ShapeError(DataError):
    pass


class AssignmentError(DataError):
    """A role in a sequence has no geographic assignment."""


class MissingArtifactError(GeoAvatarError, FileNotFoundError):
    """An upstream pipeline artifact does not exist yet."""

    def __init__(self, path, producer):
        self.path = path
        self.producer = producer
        super().__init__(f"missing artifact {path}; run `geoavatar {producer}` first")
