class SimError(Exception):
    """Base class for every simulator error."""


# nand_core
class ProgramOnNonFreePage(SimError):
    pass


class BadLength(SimError):
    pass


class ReadFreePage(SimError):
    pass


class ZoneFull(SimError):
    pass


# versioning_ftl
class OvZoneFullStop(SimError):
    """OV space exhausted; the device refuses writes to protect old versions."""


class CapacityExceeded(SimError):
    pass


class UnmappedLpa(SimError):
    pass


class BrokenChain(SimError):
    pass


class NoVictim(SimError):
    pass


class ClockRegression(SimError):
    pass


# secure_channel / policy_engine
class AuthFailed(SimError):
    pass


class ReplayDetected(AuthFailed):
    pass


class CounterReuse(SimError):
    pass


class UnknownPolicy(SimError):
    pass


class DuplicatePolicy(SimError):
    pass


# host_shim
class ParseError(SimError):
    pass


class DeviceUnreachable(SimError):
    pass


class UnknownFile(SimError):
    pass


# recovery
class NothingAtTime(SimError):
    pass


class OverlappingOffsets(SimError):
    pass


# bench
class TraceParseError(SimError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line
