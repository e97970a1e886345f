"""Alias of :mod:`gsmark.render`."""

from gsmark.render import *  # noqa: F401,F403
from gsmark.render import __all__  # noqa: F401
