"""Oblivious select-project-join and grouping-aggregation queries over a
simulated trusted-module / untrusted-memory machine."""

from .errors import *  # noqa: F401,F403
from .memsim import Session, Trace, TmContext, UntrustedMemory, trace_digest
from .relmodel import Attribute, ForeignKey, RelHandle, Schema, Tuple, int_attr, str_attr

__version__ = "0.1.0"
