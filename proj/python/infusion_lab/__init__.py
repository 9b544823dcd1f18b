"""Python bindings for the infusion toy diffusion library."""

from ._infusion import *  # noqa: F401,F403
from ._infusion import __doc__  # noqa: F401
