"""
Exception hierarchy for rcdmkit.

Every error carries a short ``kind`` and the process ``exit_code`` the CLI
maps it to: 2 for usage and configuration problems, 3 for artifact and
integrity problems, 4 for numerical failures.
"""


class RcdmError(Exception):
    """Base exception for rcdmkit."""

    kind = "error"
    exit_code = 1


class ConfigurationError(RcdmError):
    """Invalid parameters, ranges or preconditions."""

    kind = "config"
    exit_code = 2


class ShapeMismatchError(ConfigurationError):
    """Array shapes or representation dimensions do not agree."""

    kind = "shape"


class IndexOutOfRangeError(ConfigurationError):
    """A dimension, row or class index falls outside its valid range."""

    kind = "index"


class UnknownIdError(ConfigurationError):
    """An identifier is not present in a representation bank."""

    kind = "unknown-id"


class ArtifactError(RcdmError):
    """Missing, unreadable or locked artifacts."""

    kind = "artifact"
    exit_code = 3


class IntegrityError(ArtifactError):
    """A checkpoint blob failed its checksum."""

    kind = "integrity"


class VersionMismatchError(ArtifactError):
    """A persisted container was written with another schema version."""

    kind = "version"


class ComponentTypeError(ArtifactError):
    """A checkpoint holds a different component than the one requested."""

    kind = "component"


class FingerprintMismatchError(ArtifactError):
    """Components trained against different encoders were paired."""

    kind = "fingerprint"


class NumericalError(RcdmError):
    """Non-finite values, divergence or ill-conditioned quantities."""

    kind = "numerical"
    exit_code = 4
