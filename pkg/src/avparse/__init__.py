"""Weakly supervised audio-visual video parsing with teacher-elaborated dense labels."""

__version__ = "0.1.0"
