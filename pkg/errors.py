class DefenceError(Exception):
    """Base class for errors reported to callers of the de-fencing pipeline"""


class ConfigError(DefenceError):
    """Invalid configuration; the message names the offending dotted key"""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class MissingFeatureError(DefenceError):
    """Feature file has no record for a requested window centre"""

    def __init__(self, cx, cy):
        self.cx = cx
        self.cy = cy
        super().__init__(f"no feature vector for window centre ({cx}, {cy})")


class NoDataError(DefenceError):
    """Problem or metric region carries no data"""


class FileFormatError(DefenceError):
    """Malformed .flo, classifier model or feature file"""
