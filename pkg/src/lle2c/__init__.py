"""Localized-learning E2C/E2CO surrogates for two-phase porous-media flow."""

__version__ = "0.1.0"
