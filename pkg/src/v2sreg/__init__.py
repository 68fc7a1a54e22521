"""Volume-to-surface non-rigid point cloud registration workbench."""

__version__ = "0.1.0"

from .backend import BACKEND, USING_NUMBA  # noqa: F401
from .errors import FormatError, InvalidInput, SingularFit  # noqa: F401
