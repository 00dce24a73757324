"""
Setup script for the tsdplab package.

This setup.py is kept for compatibility but configuration is in pyproject.toml.
"""

from setuptools import setup

# Configuration is in pyproject.toml
setup()
