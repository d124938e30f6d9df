"""Exception hierarchy shared by all solvers."""


class CalibrationError(Exception):
    pass


# geometry
class NearIdentity(CalibrationError):
    """Rotation too close to identity for its axis to be defined."""


class BehindCamera(CalibrationError):
    pass


# hand-eye
class InsufficientPairs(CalibrationError):
    pass


class DegenerateAxes(CalibrationError):
    pass


class RankDeficient(CalibrationError):
    def __init__(self, message, unobservable=()):
        super().__init__(message)
        self.unobservable = tuple(unobservable)


# lidar odometry
class NoOverlap(CalibrationError):
    pass


class Diverged(CalibrationError):
    pass


class InsufficientScans(CalibrationError):
    pass


# camera odometry
class TooFewMatches(CalibrationError):
    pass


class NoConsensus(CalibrationError):
    pass


class CheiralityAmbiguous(CalibrationError):
    pass


# fusion odometry
class NoVisiblePoints(CalibrationError):
    pass


class TrackerFailure(CalibrationError):
    pass


class DegenerateConfiguration(CalibrationError):
    pass


# pipeline
class InitializationFailed(CalibrationError):
    pass


class DivergenceDetected(CalibrationError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DegenerateGeometry(CalibrationError):
    pass


# io
class ParseError(CalibrationError):
    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.path = path
        self.line = line
        self.offset = offset
