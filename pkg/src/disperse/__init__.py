"""Dispersing billiards on the torus and the structure of their singularities."""

__version__ = "0.1.0"
