"""Concentration of sample paths near invariant manifolds of slow-fast SDEs."""
__version__ = "0.1.0"

from .errors import SlowFastError  # noqa: E402
from .model import Box, NoiseParams, SlowFastSystem, builtin_catalog, get_system  # noqa: E402

__all__ = ["Box", "NoiseParams", "SlowFastError", "SlowFastSystem", "builtin_catalog", "get_system", "__version__"]
