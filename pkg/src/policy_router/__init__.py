"""Retrieval-based policy routing over a heterogeneous policy pool."""

from __future__ import annotations

__version__ = "0.1.0"
