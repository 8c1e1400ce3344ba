"""Multimodal enhancement of attack graphs built from CTI reports."""

from __future__ import annotations

__version__ = "0.1.0"
