"""Alias of :mod:`gsmark.cloud`."""

from gsmark.cloud import *  # noqa: F401,F403
from gsmark.cloud import __all__  # noqa: F401
