"""Vector fields, controlled paths and the time-stepping / Picard solvers."""

from .fields import *  # noqa: F401,F403
from .fields import __all__ as _fields_all
from .solver import *  # noqa: F401,F403
from .solver import __all__ as _solver_all

__all__ = list(_fields_all) + list(_solver_all)
