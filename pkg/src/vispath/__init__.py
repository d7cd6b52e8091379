"""Appearance-based localization along indoor visual paths.

Dense patch descriptors, vector-quantized frame encodings, cross-journey
retrieval and a leave-one-journey-out error-distribution harness.
"""

__version__ = "0.1.0"

METHODS = ("DSIFT", "SF_GABOR", "LW_COLOR", "ST_GABOR", "ST_GAUSS")
ENCODINGS = ("HA", "VLAD", "RAW")
METRICS = ("chi2", "hellinger")


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""
