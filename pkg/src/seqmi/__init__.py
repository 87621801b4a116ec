"""Sequential membership-inference tests, their error theory, and DP auditing."""

from seqmi.errors import ConfigError, CovarianceError
from seqmi.stats_core import GaussianParams, RngStream

__all__ = ["ConfigError", "CovarianceError", "GaussianParams", "RngStream"]
__version__ = "0.1.0"
