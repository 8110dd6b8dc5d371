"""Alias of :mod:`evaction.events`."""

from .events import *  # noqa: F401,F403
