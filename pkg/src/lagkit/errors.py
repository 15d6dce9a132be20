"""Exception hierarchy shared across lagkit."""


class LagkitError(Exception):
    """Base class for all lagkit errors."""


class ContractError(LagkitError, ValueError):
    """An input violates an operation's precondition (shape, sign, ...)."""


class InsufficientDataError(LagkitError, ValueError):
    pass


class ConfigError(LagkitError, ValueError):
    """Malformed run configuration; ``fields`` maps field name -> message."""

    def __init__(self, fields):
        self.fields = dict(fields)
        detail = "; ".join(f"{k}: {v}" for k, v in sorted(self.fields.items()))
        super().__init__(f"invalid configuration ({detail})")


class ContainerError(LagkitError):
    """Binary container could not be decoded."""

    code = "container-error"


class MagicMismatchError(ContainerError):
    code = "magic-mismatch"


class TruncatedContainerError(ContainerError):
    code = "truncated"


class UnsupportedVersionError(ContainerError):
    code = "unsupported-version"
