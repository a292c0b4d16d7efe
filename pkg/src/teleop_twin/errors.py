"""Exception types shared across the simulator."""


class TeleopTwinError(Exception):
    """Base class for all library errors."""


class DegenerateQuaternion(TeleopTwinError):
    """Quaternion norm too close to zero to normalize."""


class ConfigError(TeleopTwinError):
    """Invalid or inconsistent configuration value."""


class ParseError(TeleopTwinError):
    """Malformed input file. Carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NotEnoughData(TeleopTwinError):
    """History too short for the requested model fit."""


class HorizonOutOfRange(TeleopTwinError):
    """Requested prediction horizon outside [0, H_max]."""


class InstrumentationError(TeleopTwinError):
    """Packet is missing the timestamps needed for latency accounting."""


class EmptyEpisode(TeleopTwinError):
    """Metric requested on an episode record with no samples."""


class NumericalError(TeleopTwinError):
    """Non-finite values encountered where finite math is required."""


class Stage2Timeout(TeleopTwinError):
    """Live pose source starved during online training."""


class VersionError(TeleopTwinError):
    """Checkpoint does not match the current config/schema."""
