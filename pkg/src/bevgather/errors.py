"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Inputs are individually valid but inconsistent with each other."""


class FormatError(ValueError):
    """A serialized file or byte stream is malformed."""


class FingerprintError(FormatError):
    """A stored index graph was built for a different rig, grid or binning."""


class CalibrationError(ValueError):
    """A calibration file describes an invalid camera."""
