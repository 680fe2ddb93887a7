"""Exception types raised across the package."""


class FedVTCError(Exception):
    pass


class ConfigError(FedVTCError, ValueError):
    pass


class MissingPrototypeError(FedVTCError, KeyError):
    def __init__(self, class_id):
        super().__init__(class_id)
        self.class_id = class_id

    def __str__(self):
        return f"no prototype for class {self.class_id}"


class PartitionError(FedVTCError, ValueError):
    pass


class IngestionError(FedVTCError, OSError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)


class ProtocolError(FedVTCError, RuntimeError):
    pass


class GenerationError(FedVTCError, RuntimeError):
    pass


class NonFiniteLossError(FedVTCError, FloatingPointError):
    """Training produced a NaN/inf loss. ``context`` carries the loss breakdown."""

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = dict(context or {})

    def __str__(self):
        base = super().__str__()
        if not self.context:
            return base
        detail = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{base} ({detail})"
